"""Binary random forests from scratch: greedy Gini trees over bootstrap
samples with per-node feature subsetting. Leaves store the positive-class
fraction; the forest prediction is the mean leaf probability over trees.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 2
    feature_subset: str = "sqrt"  # "sqrt" -> ceil(sqrt(d)) per node, "all"
    bootstrap: bool = True

    def subset_size(self, n_features: int) -> int:
        if self.feature_subset == "all":
            return n_features
        if self.feature_subset == "sqrt":
            return min(n_features, ceil(sqrt(n_features)))
        raise ValueError(f"unknown feature_subset {self.feature_subset!r}")


@dataclass
class TreeNode:
    prob: float
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


def _gini(n_pos, n) -> float:
    if n == 0:
        return 0.0
    p = n_pos / n
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def _best_split(x, y, rows, features, min_leaf):
    """Lowest weighted-Gini (feature, midpoint) split, scanning features in
    index order and thresholds in increasing order; strict improvement only.

    Returns (cost, feature, threshold) or None if no admissible split.
    """
    n = rows.size
    best = None
    best_cost = np.inf
    for f in np.sort(features):
        vals = x[rows, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        sy = y[rows][order]
        pos_prefix = np.cumsum(sy)
        total_pos = pos_prefix[-1]
        # split after position i (left gets i+1 samples); valid only between
        # distinct values so the midpoint separates them
        cut = np.nonzero(sv[:-1] < sv[1:])[0]
        for i in cut:
            n_l = i + 1
            n_r = n - n_l
            if n_l < min_leaf or n_r < min_leaf:
                continue
            pos_l = pos_prefix[i]
            pos_r = total_pos - pos_l
            cost = (n_l * _gini(pos_l, n_l) + n_r * _gini(pos_r, n_r)) / n
            if cost < best_cost:
                best_cost = cost
                best = (cost, int(f), float((sv[i] + sv[i + 1]) / 2.0))
    return best


def _grow(x, y, rows, config, rng, depth) -> TreeNode:
    n_pos = int(y[rows].sum())
    node = TreeNode(prob=n_pos / rows.size)
    if depth >= config.max_depth or rows.size < 2 * config.min_leaf:
        return node
    if n_pos == 0 or n_pos == rows.size:
        return node
    k = config.subset_size(x.shape[1])
    features = rng.choice(x.shape[1], size=k, replace=False)
    split = _best_split(x, y, rows, features, config.min_leaf)
    if split is None:
        return node
    _, node.feature, node.threshold = split
    mask = x[rows, node.feature] < node.threshold
    node.left = _grow(x, y, rows[mask], config, rng, depth + 1)
    node.right = _grow(x, y, rows[~mask], config, rng, depth + 1)
    return node


def train_tree(x, y, config: ForestConfig, rng) -> TreeNode:
    """Grow one tree on a bootstrap sample (if configured).

    Degenerate input (all rows identical, or a pure class) yields a single
    leaf carrying the positive-class fraction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise ValueError("need at least 2 rows and 1 feature")
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("labels must be binary 0/1")
    rows = (
        rng.integers(0, x.shape[0], size=x.shape[0])
        if config.bootstrap
        else np.arange(x.shape[0])
    )
    return _grow(x, y, rows, config, rng, depth=0)


def _tree_predict(node: TreeNode, row) -> float:
    while not node.is_leaf:
        node = node.left if row[node.feature] < node.threshold else node.right
    return node.prob


class RandomForest:
    """Bag of Gini trees; per-tree seeds derive from the forest seed."""

    def __init__(self, config: ForestConfig = ForestConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.trees: list[TreeNode] = []
        self.n_features = None

    def fit(self, x, y) -> "RandomForest":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.n_features = x.shape[1]
        self.trees = []
        for child_seq in np.random.SeedSequence(self.seed).spawn(self.config.n_trees):
            self.trees.append(train_tree(x, y, self.config, np.random.default_rng(child_seq)))
        return self

    def predict_proba(self, x) -> np.ndarray:
        """Mean of leaf probabilities across trees, per row."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.n_features is None:
            raise RuntimeError("forest not fitted")
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        out = np.zeros(x.shape[0])
        for tree in self.trees:
            out += np.fromiter(
                (_tree_predict(tree, row) for row in x), np.float64, count=x.shape[0]
            )
        return out / len(self.trees)


def forest_predict(forest: RandomForest, features) -> float:
    """Probability for a single feature vector."""
    return float(forest.predict_proba(np.asarray(features)[None])[0])
