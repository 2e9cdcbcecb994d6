"""Classical baselines: k-nearest neighbours, CART decision tree, random forest.

Defaults follow the usual library defaults: 5 neighbours with uniform votes,
unpruned Gini trees split down to purity (min 2 samples to split), and 100
bootstrapped trees with sqrt(C) candidate features per split.
"""
from __future__ import annotations

import math

import numpy as np

from .. import _backend


def _n_classes(y, n_classes):
    return int(n_classes if n_classes is not None else np.max(y) + 1)


def knn_predict(train_x, train_y, test_x, k=5, n_classes=None):
    """Vote fractions among the ``k`` nearest training points (Euclidean).

    Equal distances are resolved in favour of the lower training index.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    n = len(train_x)
    if n == 0:
        raise ValueError("knn_predict needs a non-empty training set")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, n_train={n}]")
    K = _n_classes(train_y, n_classes)
    diff = test_x[:, None, :] - train_x[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    votes = train_y[nearest]
    proba = np.zeros((len(test_x), K))
    for c in range(K):
        proba[:, c] = (votes == c).sum(axis=1)
    return proba / k


class DecisionTree:
    def __init__(self, max_features=None, min_samples_split=2, seed=0):
        self.max_features = max_features
        self.min_samples_split = min_samples_split
        self.seed = seed

    def fit(self, x, y, n_classes=None, sample_weight=None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        if len(x) == 0:
            raise ValueError("cannot fit a tree on zero samples")
        w = np.ones(len(x)) if sample_weight is None else np.ascontiguousarray(sample_weight, dtype=np.float64)
        C = x.shape[1]
        mf = C if self.max_features is None else max(1, min(C, int(self.max_features)))
        self.n_classes = _n_classes(y, n_classes)
        (self.feature, self.threshold, self.left, self.right, self.value) = _backend.K.build_tree(
            x, y, w, self.n_classes, mf, float(self.min_samples_split), int(self.seed) & (2**64 - 1)
        )
        return self

    @property
    def node_count(self):
        return len(self.feature)

    def depth(self):
        depth = {0: 0}
        for node in range(self.node_count):
            if self.left[node] >= 0:
                depth[int(self.left[node])] = depth[int(self.right[node])] = depth[node] + 1
        return max(depth.values())

    def apply(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        return _backend.K.tree_apply(x, self.feature, self.threshold, self.left, self.right)

    def predict_proba(self, x):
        return self.value[self.apply(x)]


class RandomForest:
    def __init__(self, n_estimators=100, max_features="sqrt", bootstrap=True, seed=0):
        self.n_estimators = n_estimators
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed

    def fit(self, x, y, n_classes=None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        n, C = x.shape
        if n == 0:
            raise ValueError("cannot fit a forest on zero samples")
        if self.max_features == "sqrt":
            mf = max(1, int(math.sqrt(C)))
        elif self.max_features is None:
            mf = C
        else:
            mf = int(self.max_features)
        self.n_classes = _n_classes(y, n_classes)
        rng = np.random.default_rng(self.seed)
        self.trees, self.bootstrap_weights = [], []
        for _ in range(self.n_estimators):
            if self.bootstrap:
                w = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
            else:
                w = np.ones(n)
            tree = DecisionTree(max_features=mf, seed=int(rng.integers(2**63))).fit(x, y, self.n_classes, w)
            self.trees.append(tree)
            self.bootstrap_weights.append(w)
        return self

    def predict_proba(self, x):
        return np.mean([t.predict_proba(x) for t in self.trees], axis=0)


def tree_predict(train_x, train_y, test_x, n_classes=None, seed=0):
    return DecisionTree(seed=seed).fit(train_x, train_y, n_classes).predict_proba(test_x)


def forest_predict(train_x, train_y, test_x, n_classes=None, seed=0, n_estimators=100):
    return RandomForest(n_estimators=n_estimators, seed=seed).fit(train_x, train_y, n_classes).predict_proba(test_x)
