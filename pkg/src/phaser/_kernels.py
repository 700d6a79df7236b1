"""Hot loops for tree fitting and application, in two interchangeable
flavors: numba-compiled loops and vectorized numpy.

Selection: PHASER_NUMBA=1 forces numba (import error if absent),
PHASER_NUMBA=0 forces the numpy path, unset tries numba and falls back.
Both paths perform the same IEEE operations element for element, so
fitted trees and predictions are bit-identical; the test suite holds
them to that.

Split-score convention: candidate thresholds are midpoints between
adjacent distinct sorted values; the score is the Gini impurity
decrease at the node (parent impurity minus size-weighted child
impurity). Ties keep the earliest candidate column, then the lowest
threshold, making the fit deterministic given the input matrix.
"""

from __future__ import annotations

import os

import numpy as np

MISSING = -1.0e308  # score lower than any real impurity decrease


# -- numpy path ---------------------------------------------------------

def _split_search_np(xcols, y, min_leaf):
    """Best split over candidate columns.

    xcols: (n, m) float64, y: (n,) int64 in {0, 1}.
    Returns (col, threshold, decrease); col = -1 when nothing splits."""
    n, m = xcols.shape
    total_pos = int(y.sum())
    parent = 1.0 - (total_pos / n) ** 2 - ((n - total_pos) / n) ** 2
    best_col, best_thr, best_dec = -1, 0.0, MISSING
    for j in range(m):
        order = np.argsort(xcols[:, j], kind="stable")
        xs = xcols[order, j]
        ys = y[order]
        left_pos = np.cumsum(ys)[:-1]
        left_n = np.arange(1, n)
        right_n = n - left_n
        valid = (xs[1:] != xs[:-1]) & (left_n >= min_leaf) \
            & (right_n >= min_leaf)
        if not valid.any():
            continue
        right_pos = total_pos - left_pos
        gl = 1.0 - (left_pos / left_n) ** 2 \
            - ((left_n - left_pos) / left_n) ** 2
        gr = 1.0 - (right_pos / right_n) ** 2 \
            - ((right_n - right_pos) / right_n) ** 2
        dec = parent - (left_n * gl + right_n * gr) / n
        dec[~valid] = MISSING
        i = int(np.argmax(dec))
        if dec[i] > best_dec:
            best_col = j
            best_thr = xs[i] + (xs[i + 1] - xs[i]) / 2.0
            best_dec = float(dec[i])
    return best_col, best_thr, best_dec


def _tree_apply_np(feature, threshold, left, right, value, x):
    """Leaf values for every row of x. Internal nodes have left >= 0;
    leaves carry left == -1."""
    node = np.zeros(x.shape[0], dtype=np.int64)
    while True:
        at_leaf = left[node] < 0
        if at_leaf.all():
            return value[node]
        go_left = x[np.arange(x.shape[0]), feature[node]] <= threshold[node]
        nxt = np.where(go_left, left[node], right[node])
        node = np.where(at_leaf, node, nxt)


# -- numba path ---------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def split_search(xcols, y, min_leaf):
        n, m = xcols.shape
        total_pos = 0
        for i in range(n):
            total_pos += y[i]
        parent = 1.0 - (total_pos / n) ** 2 - ((n - total_pos) / n) ** 2
        best_col = -1
        best_thr = 0.0
        best_dec = MISSING
        for j in range(m):
            order = np.argsort(xcols[:, j], kind="mergesort")
            pos = 0
            for i in range(n - 1):
                pos += y[order[i]]
                left_n = i + 1
                right_n = n - left_n
                xs_i = xcols[order[i], j]
                xs_next = xcols[order[i + 1], j]
                if xs_i == xs_next or left_n < min_leaf \
                        or right_n < min_leaf:
                    continue
                left_pos = pos
                right_pos = total_pos - pos
                gl = 1.0 - (left_pos / left_n) ** 2 \
                    - ((left_n - left_pos) / left_n) ** 2
                gr = 1.0 - (right_pos / right_n) ** 2 \
                    - ((right_n - right_pos) / right_n) ** 2
                dec = parent - (left_n * gl + right_n * gr) / n
                if dec > best_dec:
                    best_col = j
                    best_thr = xs_i + (xs_next - xs_i) / 2.0
                    best_dec = dec
        return best_col, best_thr, best_dec

    @njit(cache=True)
    def tree_apply(feature, threshold, left, right, value, x):
        n = x.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            node = 0
            while left[node] >= 0:
                if x[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = value[node]
        return out

    return split_search, tree_apply


_ACTIVE = None  # (name, split_search, tree_apply)


def _select():
    global _ACTIVE
    if _ACTIVE is not None:
        return _ACTIVE
    flag = os.environ.get("PHASER_NUMBA", "").strip()
    if flag == "0":
        _ACTIVE = ("numpy", _split_search_np, _tree_apply_np)
    elif flag == "1":
        _ACTIVE = ("numba",) + _build_numba()
    else:
        try:
            _ACTIVE = ("numba",) + _build_numba()
        except ImportError:
            _ACTIVE = ("numpy", _split_search_np, _tree_apply_np)
    return _ACTIVE


def use_backend(name):
    """Force 'numba' or 'numpy' for this process (tests, benchmarks)."""
    global _ACTIVE
    if name == "numpy":
        _ACTIVE = ("numpy", _split_search_np, _tree_apply_np)
    elif name == "numba":
        _ACTIVE = ("numba",) + _build_numba()
    else:
        raise ValueError(f"unknown kernel backend '{name}'")


def active_backend():
    return _select()[0]


def split_search(xcols, y, min_leaf=1):
    return _select()[1](np.ascontiguousarray(xcols, dtype=np.float64),
                        np.ascontiguousarray(y, dtype=np.int64),
                        min_leaf)


def tree_apply(feature, threshold, left, right, value, x):
    return _select()[2](feature, threshold, left, right, value,
                        np.ascontiguousarray(x, dtype=np.float64))
