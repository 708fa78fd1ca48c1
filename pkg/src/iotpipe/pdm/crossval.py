"""Stratified k-fold cross-validation and random-forest feature ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simulator.prng import XorShiftRng, derive_seed
from .models import ModelError, make_params, train
from .tree import grow_forest, tree_importances


def canonical_order(X, y, ids=None) -> np.ndarray:
    """Row order that depends only on the rows' content: by label, then by
    ``ids`` when given, otherwise by the feature values."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.array([str(v) for v in y])
    if ids is not None:
        keys = [np.array([str(i) for i in ids])]
    else:
        keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys + [labels])


def stratified_folds(X, y, k_folds: int, seed: int = 0, ids=None) -> np.ndarray:
    """Fold number for each input row.

    Rows of each label are put in canonical order, permuted with a
    label-specific seeded stream and dealt round-robin into the folds, so the
    assignment follows the rows if the input is reordered.
    """
    if k_folds < 2:
        raise ModelError("k_folds must be >= 2")
    labels = np.array([str(v) for v in y])
    order = canonical_order(X, labels, ids)
    folds = np.empty(len(labels), dtype=np.int64)
    for c, label in enumerate(sorted(set(labels))):
        rows = order[labels[order] == label]
        if len(rows) < k_folds:
            raise ModelError(f"label {label!r} has {len(rows)} rows, fewer than {k_folds} folds")
        perm = np.argsort(XorShiftRng(derive_seed(seed, 0xF01D, c)).uniform(len(rows)),
                          kind="stable")
        folds[rows[perm]] = np.arange(len(rows)) % k_folds
    return folds


@dataclass
class CVResult:
    model_kind: str
    fold_accuracies: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))


def cross_validate(kind: str, params, X, y, k_folds: int = 5, seed: int = 0,
                   ids=None) -> CVResult:
    X = np.asarray(X, dtype=np.float64)
    labels = np.array([str(v) for v in y])
    folds = stratified_folds(X, labels, k_folds, seed, ids)
    canon = canonical_order(X, labels, ids)
    p = make_params(kind, params)
    accs = []
    for f in range(k_folds):
        tr = canon[folds[canon] != f]
        te = canon[folds[canon] == f]
        model = train(kind, X[tr], labels[tr], p)
        pred = np.array(model.predict_labels(X[te]))
        accs.append(float(np.mean(pred == labels[te])))
    return CVResult(kind, accs)


def feature_importances(X, y, n_trees: int = 100, seed: int = 0,
                        features_per_split: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    labels = np.array([str(v) for v in y])
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ModelError("feature selection needs at least two classes")
    yi = np.searchsorted(classes, labels)
    canon = canonical_order(X, labels)
    k = features_per_split or max(1, int(np.sqrt(X.shape[1])))
    trees = grow_forest(X[canon], yi[canon], len(classes), n_trees, True, k, seed=seed)
    return np.mean([tree_importances(t, X.shape[1]) for t in trees], axis=0)


def select_features(X, y, k: int, seed: int = 0, n_trees: int = 100) -> list[int]:
    """Top-``k`` feature indices by mean impurity decrease, ties to the lower index."""
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= k <= X.shape[1]:
        raise ModelError(f"k must be in [1, {X.shape[1]}]")
    imp = feature_importances(X, y, n_trees, seed)
    return [int(i) for i in np.argsort(-imp, kind="stable")[:k]]
