#!/usr/bin/env python3
"""
Training and cross-validating the three classifiers on a seeded simulated dataset.
"""

import time

import numpy as np

from iotpipe.pdm import cross_validate, feature_matrix, select_features, train_dt, train_rf
from iotpipe.pdm.features import FEATURE_NAMES
from iotpipe.simulator import SimConfig, plan_dataset

n_per_class = 20
t0 = time.perf_counter()
cycles = plan_dataset(n_per_class, SimConfig(seed=42, duration_scale=0.05))
X, y, ids = feature_matrix(cycles)
print(f"{X.shape[0]} cycles x {X.shape[1]} features in {time.perf_counter() - t0:.1f} s")
print("class counts:", {c: int(np.sum(np.array(y) == c)) for c in sorted(set(y))})

for kind in ("dt", "rf", "svm"):
    cv = cross_validate(kind, None, X, y, k_folds=5, seed=0, ids=ids)
    print(f"{kind.upper():3s} 5-fold accuracy: {cv.mean_accuracy:.3f}  folds {np.round(cv.fold_accuracies, 3)}")

# a forest of one unbagged tree that sees every feature is the decision tree
one = train_rf(X, y, {"n_trees": 1, "bootstrap": False, "features_per_split": X.shape[1]})
print("RF(1 tree, no bootstrap, all features) == DT:",
      one.predict_labels(X) == train_dt(X, y).predict_labels(X))

top = select_features(X, y, 8, seed=0)
print("most informative features:")
for i in top:
    print("  ", FEATURE_NAMES[i])
