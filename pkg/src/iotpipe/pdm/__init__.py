"""Predictive-maintenance stages: cleaning, features, classifiers and evaluation."""

from .clean import CleanParams, CleanReport, clean
from .crossval import CVResult, cross_validate, select_features, stratified_folds
from .features import FEATURE_NAMES, N_FEATURES, FeatureError, FeatureVector, features_from_segments
from .models import (
    DTParams,
    FeatureMismatch,
    ModelError,
    Prediction,
    RFParams,
    SVMParams,
    TrainedModel,
    load_model,
    predict,
    save_model,
    train,
    train_dt,
    train_rf,
    train_svm,
)
from .moments import excess_kurtosis, skewness, time_features
from .spectrum import SpectrumError, spectrum_features
from .training import feature_matrix, featurize_signals
