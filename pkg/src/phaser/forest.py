"""Random forest of Gini CART trees for binary labels.

Each tree draws its bootstrap sample and its per-node feature subsets
from private RNG streams derived from (seed, tree index), so training
trees in parallel or permuting dataset rows cannot change the result:
a tree is a deterministic function of its materialized bootstrap
matrix plus its split stream. fit_tree is public for exactly that
reason - the suite rebuilds trees from materialized samples and
expects bit-identical nodes.

Importance bookkeeping follows the usual impurity-decrease recipe:
every split adds (node_size / root_size) * decrease to its feature,
and the forest total is normalized to sum to one (all-zero stays
all-zero for degenerate fits).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import split_search, tree_apply
from .util import child_seed, make_rng

N_TREES = 100
MAX_DEPTH = 8
MIN_SPLIT = 2


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    importances: np.ndarray  # raw decrease sums per feature

    def apply(self, x):
        return tree_apply(self.feature, self.threshold, self.left,
                          self.right, self.value,
                          np.atleast_2d(np.asarray(x, dtype=np.float64)))

    @property
    def n_nodes(self):
        return len(self.feature)


def fit_tree(x, y, rng, *, max_depth=MAX_DEPTH, min_split=MIN_SPLIT,
             max_features=None):
    """Grow one CART tree on the given matrix (already bootstrapped if
    the caller wants bagging). Deterministic in (x, y, rng state)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    n, d = x.shape
    if max_features is None:
        max_features = max(1, int(math.sqrt(d)))
    max_features = min(max_features, d)

    feature, threshold, left, right, value = [], [], [], [], []
    importances = np.zeros(d)

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(rows, depth):
        node = new_node()
        ys = y[rows]
        pos = int(ys.sum())
        value[node] = pos / len(rows)
        if depth >= max_depth or len(rows) < min_split \
                or pos == 0 or pos == len(rows):
            return node
        cand = np.sort(rng.choice(d, size=max_features, replace=False))
        col, thr, dec = split_search(x[rows][:, cand], ys, 1)
        if col < 0 or dec <= 0.0:
            return node
        f = int(cand[col])
        go_left = x[rows, f] <= thr
        importances[f] += (len(rows) / n) * dec
        feature[node] = f
        threshold[node] = thr
        left[node] = build(rows[go_left], depth + 1)
        right[node] = build(rows[~go_left], depth + 1)
        return node

    build(np.arange(n), 0)
    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        importances=importances,
    )


def bootstrap_indices(seed, tree_index, n):
    """The bagging draw for one tree; exposed so materialized samples
    can be reconstructed."""
    rng = make_rng(child_seed(seed, "tree", tree_index, "boot"))
    return rng.integers(0, n, size=n)


def split_stream(seed, tree_index):
    """The feature-subset RNG for one tree."""
    return make_rng(child_seed(seed, "tree", tree_index, "split"))


@dataclass
class Forest:
    trees: list = field(default_factory=list)
    importances: np.ndarray | None = None  # normalized; zeros if degenerate
    n_features: int = 0
    constant: float | None = None  # class-1 rate of a degenerate fit
    seed: int = 0

    @property
    def degenerate(self):
        return not self.trees

    def predict_proba(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.degenerate:
            return np.full(x.shape[0], self.constant)
        acc = np.zeros(x.shape[0])
        for tree in self.trees:
            acc += tree.apply(x)
        return acc / len(self.trees)

    def predict(self, x):
        return self.predict_proba(x) > 0.5


def fit_forest(x, y, *, n_trees=N_TREES, max_depth=MAX_DEPTH,
               min_split=MIN_SPLIT, max_features=None, seed=0,
               workers=None):
    """Bagged forest. Degenerates to a constant predictor with zero
    importances when there are fewer than two rows or one label."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    n, d = x.shape
    if n < 2 or len(np.unique(y)) < 2:
        return Forest(trees=[], importances=np.zeros(d), n_features=d,
                      constant=float(y.mean()) if n else 0.0, seed=seed)

    def one(t):
        idx = bootstrap_indices(seed, t, n)
        return fit_tree(x[idx], y[idx], split_stream(seed, t),
                        max_depth=max_depth, min_split=min_split,
                        max_features=max_features)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(one, range(n_trees)))
    else:
        trees = [one(t) for t in range(n_trees)]

    total = np.zeros(d)
    for tree in trees:
        total += tree.importances
    s = total.sum()
    importances = total / s if s > 0 else total
    return Forest(trees=trees, importances=importances, n_features=d,
                  seed=seed)
