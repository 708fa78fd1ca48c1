"""CART decision trees (Gini) and a bagged random forest built from them."""

from __future__ import annotations

import numpy as np

from ..simulator.prng import XorShiftRng, derive_seed

TIE_EPS = 1e-12


class Tree:
    """Flat array representation. ``feature[i] == -1`` marks a leaf; rows with
    ``x[feature] <= threshold`` go left."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.counts: list[list[int]] = []
        self.importance_raw: dict[int, float] = {}

    def _add(self, counts: np.ndarray) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([int(c) for c in counts])
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = feat[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, feat[nd]] <= thr[nd]
            node[r] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        counts = np.asarray(self.counts, dtype=np.float64)[self.leaf_index(X)]
        return counts / counts.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # argmax takes the first maximum, i.e. the lexicographically smallest label
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self) -> dict:
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict, n_classes: int) -> "Tree":
        t = cls(n_classes)
        t.feature = [int(v) for v in d["feature"]]
        t.threshold = [float(v) for v in d["threshold"]]
        t.left = [int(v) for v in d["left"]]
        t.right = [int(v) for v in d["right"]]
        t.counts = [[int(c) for c in row] for row in d["counts"]]
        return t


def gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


def best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features,
               min_samples_leaf: int = 1) -> tuple[int, float, float] | None:
    """Exhaustive scan. Returns (feature, threshold, weighted child Gini) or None.

    Features are visited in the given order and thresholds ascending; a later
    candidate replaces the incumbent only when its impurity is strictly lower.
    """
    n = len(y)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    best = None
    best_score = -np.inf  # maximise sum(c_l^2)/n_l + sum(c_r^2)/n_r
    total = onehot.sum(axis=0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cl = np.cumsum(onehot[order], axis=0)[:-1]
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        valid = (xs[1:] > xs[:-1]) & (nl >= min_samples_leaf) & (nr >= min_samples_leaf)
        if not valid.any():
            continue
        cr = total[None, :] - cl
        score = (cl * cl).sum(axis=1) / nl + (cr * cr).sum(axis=1) / nr
        score[~valid] = -np.inf
        i = int(np.argmax(score))
        if score[i] > best_score + TIE_EPS:
            best_score = float(score[i])
            mid = (xs[i] + xs[i + 1]) / 2.0
            if mid >= xs[i + 1]:  # adjacent floats
                mid = xs[i]
            best = (int(f), float(mid))
    if best is None:
        return None
    return best[0], best[1], float((n - best_score) / n)


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int | None = None,
              min_samples_leaf: int = 1, feature_sampler=None) -> Tree:
    """Grow a CART tree. ``feature_sampler()`` returns the ascending feature
    subset to scan at each node; all features when omitted."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    tree = Tree(n_classes)
    n_total = len(y)
    all_features = np.arange(X.shape[1])
    stack = [(np.arange(len(y)), 0, None, False)]
    while stack:
        idx, depth, parent, is_right = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes)
        node = tree._add(counts)
        if parent is not None:
            (tree.right if is_right else tree.left)[parent] = node
        if np.count_nonzero(counts) <= 1 or (max_depth is not None and depth >= max_depth):
            continue
        if len(idx) < 2 * min_samples_leaf:
            continue
        feats = all_features if feature_sampler is None else feature_sampler()
        split = best_split(X[idx], y[idx], n_classes, feats, min_samples_leaf)
        if split is None:
            continue
        f, thr, child_gini = split
        tree.feature[node] = f
        tree.threshold[node] = thr
        decrease = len(idx) / n_total * (gini(counts) - child_gini)
        tree.importance_raw[f] = tree.importance_raw.get(f, 0.0) + max(decrease, 0.0)
        go_left = X[idx, f] <= thr
        # push right first so the left subtree gets the lower node ids
        stack.append((idx[~go_left], depth + 1, node, True))
        stack.append((idx[go_left], depth + 1, node, False))
    return tree


def tree_importances(tree: Tree, n_features: int) -> np.ndarray:
    imp = np.zeros(n_features)
    for f, v in tree.importance_raw.items():
        imp[f] = v
    s = imp.sum()
    return imp / s if s > 0 else imp


def grow_forest(X: np.ndarray, y: np.ndarray, n_classes: int, n_trees: int = 100,
                bootstrap: bool = True, features_per_split: int = 8,
                max_depth: int | None = None, min_samples_leaf: int = 1,
                seed: int = 0) -> list[Tree]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, m = X.shape
    k = max(1, min(int(features_per_split), m))
    trees = []
    for t in range(n_trees):
        rng = XorShiftRng(derive_seed(seed, 0x7EE, t))
        if bootstrap:
            idx = np.minimum((rng.uniform(n) * n).astype(np.int64), n - 1)
        else:
            idx = np.arange(n)

        def sampler(rng=rng):
            if k == m:
                return np.arange(m)
            return np.sort(np.argsort(rng.uniform(m), kind="stable")[:k])

        trees.append(grow_tree(X[idx], y[idx], n_classes, max_depth, min_samples_leaf, sampler))
    return trees


def forest_votes(trees: list[Tree], X, n_classes: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    votes = np.zeros((len(X), n_classes))
    for t in trees:
        votes[np.arange(len(X)), t.predict(X)] += 1.0
    return votes / max(len(trees), 1)
