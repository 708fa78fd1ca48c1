"""Trained classifier container, the three trainers, prediction and JSON persistence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..simulator.prng import XorShiftRng, derive_seed
from ..storage import atomic_write
from .features import FEATURE_NAMES, FeatureVector
from .tree import Tree, forest_votes, grow_forest, grow_tree, tree_importances

MODEL_KINDS = ("dt", "rf", "svm")


class ModelError(ValueError):
    pass


class FeatureMismatch(ModelError):
    pass


@dataclass
class DTParams:
    max_depth: int | None = None
    min_samples_leaf: int = 1
    seed: int = 0


@dataclass
class RFParams:
    n_trees: int = 100
    bootstrap: bool = True
    features_per_split: int = 8
    max_depth: int | None = None
    min_samples_leaf: int = 1
    seed: int = 0


@dataclass
class SVMParams:
    epochs: int = 60
    learning_rate: float = 0.05
    regularization: float = 1e-3
    seed: int = 0


PARAM_TYPES = {"dt": DTParams, "rf": RFParams, "svm": SVMParams}


def make_params(kind: str, params=None):
    cls = PARAM_TYPES.get(kind)
    if cls is None:
        raise ModelError(f"unknown model kind {kind!r}")
    if params is None:
        return cls()
    if isinstance(params, cls):
        return params
    return cls(**params)


@dataclass
class TrainedModel:
    model_kind: str
    params: dict
    classes: list[str]
    feature_names: list[str]
    structure: dict = field(default_factory=dict)
    seed: int = 0

    # structure keys: "constant" (label) | "trees" | "weights", "bias", "mean", "scale"

    @property
    def is_constant(self) -> bool:
        return "constant" in self.structure

    def scores(self, X) -> np.ndarray:
        """Per-class scores, shape (n, n_classes), columns in ``classes`` order."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.feature_names):
            raise FeatureMismatch(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        if self.is_constant:
            return np.ones((len(X), 1))
        if self.model_kind in ("dt", "rf"):
            trees = self._trees()
            if self.model_kind == "dt":
                return trees[0].predict_proba(X)
            return forest_votes(trees, X, len(self.classes))
        W = np.asarray(self.structure["weights"])
        b = np.asarray(self.structure["bias"])
        Z = (X - np.asarray(self.structure["mean"])) / np.asarray(self.structure["scale"])
        return Z @ W.T + b

    def _trees(self) -> list[Tree]:
        cache = getattr(self, "_tree_cache", None)
        if cache is None:
            cache = [Tree.from_dict(d, len(self.classes)) for d in self.structure["trees"]]
            self._tree_cache = cache
        return cache

    def predict_labels(self, X) -> list[str]:
        # classes are sorted, so argmax's first-maximum rule breaks ties lexicographically
        idx = np.argmax(self.scores(X), axis=1)
        return [self.classes[i] for i in idx]

    def to_dict(self) -> dict:
        return {"model_kind": self.model_kind, "params": self.params, "classes": self.classes,
                "feature_names": self.feature_names, "structure": self.structure,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("model_kind") not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {d.get('model_kind')!r}")
        return cls(d["model_kind"], dict(d["params"]), list(d["classes"]),
                   list(d["feature_names"]), d["structure"], int(d.get("seed", 0)))


@dataclass
class Prediction:
    cycle_id: str
    label: str
    scores: dict[str, float]
    model_kind: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        return cls(d["cycle_id"], d["label"], dict(d["scores"]), d["model_kind"])


def _encode(y) -> tuple[list[str], np.ndarray]:
    labels = [str(v) for v in y]
    classes = sorted(set(labels))
    lookup = {c: i for i, c in enumerate(classes)}
    return classes, np.array([lookup[v] for v in labels], dtype=np.int64)


def _check_xy(X, y) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ModelError("X must be 2-D with one row per label")
    if len(y) < 2:
        raise ModelError("need at least two training rows")
    if not np.all(np.isfinite(X)):
        raise ModelError("training features must be finite")
    return X


def _names(feature_names, m: int) -> list[str]:
    if feature_names is None:
        return list(FEATURE_NAMES) if m == len(FEATURE_NAMES) else [f"f{i}" for i in range(m)]
    if len(feature_names) != m:
        raise ModelError("feature_names length differs from X")
    return list(feature_names)


def _constant(kind, params, label, names, seed) -> TrainedModel:
    return TrainedModel(kind, asdict(params), [label], names, {"constant": label}, seed)


def train_dt(X, y, params=None, feature_names=None) -> TrainedModel:
    p = make_params("dt", params)
    X = _check_xy(X, y)
    classes, yi = _encode(y)
    names = _names(feature_names, X.shape[1])
    if len(classes) == 1:
        return _constant("dt", p, classes[0], names, p.seed)
    tree = grow_tree(X, yi, len(classes), p.max_depth, p.min_samples_leaf)
    return TrainedModel("dt", asdict(p), classes, names, {"trees": [tree.to_dict()]}, p.seed)


def train_rf(X, y, params=None, feature_names=None) -> TrainedModel:
    p = make_params("rf", params)
    X = _check_xy(X, y)
    classes, yi = _encode(y)
    names = _names(feature_names, X.shape[1])
    if len(classes) == 1:
        return _constant("rf", p, classes[0], names, p.seed)
    trees = grow_forest(X, yi, len(classes), p.n_trees, p.bootstrap, p.features_per_split,
                        p.max_depth, p.min_samples_leaf, p.seed)
    imp = np.mean([tree_importances(t, X.shape[1]) for t in trees], axis=0)
    model = TrainedModel("rf", asdict(p), classes, names,
                         {"trees": [t.to_dict() for t in trees],
                          "importances": [float(v) for v in imp]}, p.seed)
    model._tree_cache = trees
    return model


def standardize_constants(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def train_svm(X, y, params=None, feature_names=None) -> TrainedModel:
    """Linear one-vs-rest SVM: per-class hinge loss + L2, fitted by
    subgradient descent over a seeded per-epoch permutation of the rows."""
    p = make_params("svm", params)
    X = _check_xy(X, y)
    classes, yi = _encode(y)
    names = _names(feature_names, X.shape[1])
    if len(classes) == 1:
        return _constant("svm", p, classes[0], names, p.seed)
    mean, scale = standardize_constants(X)
    Z = (X - mean) / scale
    n, m = Z.shape
    C = len(classes)
    targets = np.where(yi[:, None] == np.arange(C)[None, :], 1.0, -1.0)
    W = np.zeros((C, m))
    b = np.zeros(C)
    lam = p.regularization
    step = 0
    for epoch in range(p.epochs):
        rng = XorShiftRng(derive_seed(p.seed, 0x5E, epoch))
        for i in np.argsort(rng.uniform(n), kind="stable"):
            eta = p.learning_rate / (1.0 + p.learning_rate * lam * step)
            step += 1
            t = targets[i]
            active = t * (W @ Z[i] + b) < 1.0
            W *= 1.0 - eta * lam
            if active.any():
                W[active] += eta * t[active, None] * Z[i][None, :]
                b[active] += eta * t[active]
    structure = {"weights": W.tolist(), "bias": b.tolist(), "mean": mean.tolist(),
                 "scale": scale.tolist()}
    return TrainedModel("svm", asdict(p), classes, names, structure, p.seed)


TRAINERS = {"dt": train_dt, "rf": train_rf, "svm": train_svm}


def train(kind: str, X, y, params=None, feature_names=None) -> TrainedModel:
    if kind not in TRAINERS:
        raise ModelError(f"unknown model kind {kind!r}")
    return TRAINERS[kind](X, y, params, feature_names)


def predict(model: TrainedModel, fv: FeatureVector) -> Prediction:
    if list(fv.names) != list(model.feature_names):
        raise FeatureMismatch("feature vector names differ from the model's")
    s = model.scores(fv.values[None, :])[0]
    label = model.classes[int(np.argmax(s))]
    return Prediction(fv.cycle_id, label, {c: float(v) for c, v in zip(model.classes, s)},
                      model.model_kind)


def save_model(model: TrainedModel, path: str | Path) -> Path:
    data = json.dumps(model.to_dict(), sort_keys=True).encode("utf-8")
    return atomic_write(path, data, overwrite=True)


def load_model(path: str | Path) -> TrainedModel:
    return TrainedModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
