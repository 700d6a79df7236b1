"""Per-pass improvement analysis over episode logs.

For each analyzed pass a binary dataset is built from logged steps
where that pass was the action: input = the observation just before
it (program features or applied-pass histogram), label = strict
reward > 0. A bagged forest per pass then yields impurity-decrease
importances, assembled into a row-normalized matrix whose rows are
passes and columns are features or prior passes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset, PhaserError
from .forest import (MAX_DEPTH, MIN_SPLIT, N_TREES, Forest,  # noqa: F401
                     fit_forest)
from .irfeatures import FEATURE_NAMES, N_FEATURES
from .passes import PASS_TABLE


@dataclass
class LabeledDataset:
    x: np.ndarray        # (rows, width) float64
    y: np.ndarray        # (rows,) bool
    pass_id: int
    mode: str            # "features" | "histogram"
    columns: tuple = ()  # column names, parallel to x's width

    def __len__(self):
        return self.x.shape[0]


def _feature_row(step, record):
    obs = step.observation
    if obs is None:
        return None
    if record.mode == "features":
        return obs
    if record.mode == "combined":
        return obs[:len(obs) - len(record.action_space)]
    return None


def build_dataset(episodes, pass_id, mode="features"):
    """One labeled row per logged application of pass_id.

    mode 'features' needs episodes recorded with features or combined
    observations; 'histogram' is reconstructed from the logged actions
    themselves, so it works for any episode log."""
    if mode not in ("features", "histogram"):
        raise PhaserError(f"unknown dataset mode '{mode}'")
    rows, labels = [], []
    columns = ()
    for rec in episodes:
        if rec.mode == "vector":
            continue
        space = list(rec.action_space)
        if pass_id not in space:
            continue
        hist = np.zeros(len(space), dtype=np.float64)
        index_of = {p: i for i, p in enumerate(space)}
        for step in rec.steps:
            if step.action == pass_id:
                if mode == "features":
                    row = _feature_row(step, rec)
                    if row is None:
                        raise EmptyDataset(
                            "features mode needs episodes recorded with "
                            "features or combined observations")
                else:
                    row = hist.copy()
                    columns = tuple(PASS_TABLE[p] for p in space)
                rows.append(row)
                labels.append(float(step.reward) > 0)
            hist[index_of[step.action]] += 1
    if not rows:
        raise EmptyDataset(f"pass {pass_id} never applied in these logs")
    x = np.asarray(rows, dtype=np.float64)
    if mode == "features":
        columns = (tuple(FEATURE_NAMES) if x.shape[1] == N_FEATURES
                   else tuple(f"f{i}" for i in range(x.shape[1])))
    return LabeledDataset(x=x, y=np.asarray(labels, dtype=bool),
                          pass_id=pass_id, mode=mode, columns=columns)


def train_forest(ds, *, n_trees=N_TREES, max_depth=MAX_DEPTH,
                 min_split=MIN_SPLIT, max_features=None, seed=0,
                 workers=None):
    """Forest for one pass's dataset; degenerate (constant prediction,
    zero importances) when rows or labels are one-sided."""
    return fit_forest(ds.x, ds.y.astype(np.int64), n_trees=n_trees,
                      max_depth=max_depth, min_split=min_split,
                      max_features=max_features, seed=seed, workers=workers)


@dataclass
class ImportanceMatrix:
    values: np.ndarray   # (passes, width), rows sum to 1 or stay 0
    passes: tuple        # pass ids, one per row
    columns: tuple       # column names
    mode: str
    zero_rows: tuple     # pass ids whose forests were degenerate

    def row(self, pass_id):
        return self.values[self.passes.index(pass_id)]


def importance_matrix(forests, *, mode="features", columns=None):
    """Stack per-pass forest importances into a row-normalized matrix.
    forests: dict pass_id -> Forest. All-zero rows are kept but listed
    in zero_rows."""
    if not forests:
        raise EmptyDataset("no forests to assemble")
    passes = tuple(sorted(forests))
    width = forests[passes[0]].n_features
    values = np.zeros((len(passes), width))
    zero_rows = []
    for i, p in enumerate(passes):
        f = forests[p]
        if f.n_features != width:
            raise PhaserError("forests disagree on input width")
        s = f.importances.sum()
        if s > 0:
            values[i] = f.importances / s
        else:
            zero_rows.append(p)
    if columns is None:
        if mode == "features" and width == N_FEATURES:
            columns = tuple(FEATURE_NAMES)
        else:
            columns = tuple(f"c{i}" for i in range(width))
    return ImportanceMatrix(values=values, passes=passes,
                            columns=tuple(columns), mode=mode,
                            zero_rows=tuple(zero_rows))


def filter_by_importance(matrix, threshold):
    """(kept column indices, kept pass ids): columns by column-max,
    passes by row-max, both at >= threshold."""
    if matrix.values.size == 0:
        return (), ()
    col_max = matrix.values.max(axis=0)
    row_max = matrix.values.max(axis=1)
    kept_cols = tuple(int(i) for i in np.flatnonzero(col_max >= threshold))
    kept_passes = tuple(p for p, m in zip(matrix.passes, row_max)
                        if m >= threshold)
    return kept_cols, kept_passes


def write_importance_csv(path, matrix):
    """Wide CSV: one row per pass, one column per feature/prior pass."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass"] + list(matrix.columns))
        for i, p in enumerate(matrix.passes):
            w.writerow([PASS_TABLE[p]]
                       + [repr(float(v)) for v in matrix.values[i]])


def write_importance_long_csv(path, matrix):
    """Long CSV (pass, column, value) for heat-map plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass", "column", "value"])
        for i, p in enumerate(matrix.passes):
            for j, name in enumerate(matrix.columns):
                w.writerow([PASS_TABLE[p], name,
                            repr(float(matrix.values[i, j]))])
