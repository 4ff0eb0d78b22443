"""Metrics: per-group accuracy, worst-group accuracy with small-group pooling,
and the per-(attribute, label) training-weight heatmap."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, GroupLayout
from .errors import InsufficientRecord, ShapeError


@dataclass(frozen=True)
class GroupMetrics:
    """Per-group accuracies before any pooling; robust = plain min over groups."""

    per_group_acc: np.ndarray
    counts: np.ndarray
    robust: float
    average: float
    merged_groups: tuple = ()


def group_accuracies(predictions, ds: Dataset, layout: GroupLayout) -> GroupMetrics:
    preds = np.asarray(predictions, dtype=int)
    if preds.shape != (len(ds),):
        raise ShapeError(f"expected {len(ds)} predictions, got shape {preds.shape}")
    correct = preds == ds.labels
    groups = ds.groups
    acc = np.empty(layout.m)
    counts = np.empty(layout.m, dtype=int)
    for g in range(layout.m):
        members = groups == g
        counts[g] = members.sum()
        acc[g] = correct[members].mean() if counts[g] else np.nan
    return GroupMetrics(
        per_group_acc=acc,
        counts=counts,
        robust=float(np.nanmin(acc)),
        average=float(correct.mean()),
    )


def robust_accuracy_merged(metrics: GroupMetrics, threshold: int) -> tuple[float, tuple]:
    """Worst accuracy after pooling all groups smaller than ``threshold``.

    The pooled group's accuracy is computed over the union of its members'
    examples (count-weighted), not as a mean of member accuracies.
    """
    if threshold < 1:
        raise ShapeError(f"threshold must be >= 1, got {threshold}")
    small = metrics.counts < threshold
    surviving = metrics.per_group_acc[~small]
    candidates = list(surviving)
    merged = tuple(np.flatnonzero(small).tolist())
    if merged:
        pooled_total = int(metrics.counts[small].sum())
        pooled_correct = float(np.sum(metrics.per_group_acc[small] * metrics.counts[small]))
        candidates.append(pooled_correct / pooled_total)
    return float(np.min(candidates)), merged


@dataclass(frozen=True)
class Heatmap:
    """Mean applied training weight per (attribute, label) cell.

    ``matrix`` has one row per epoch plus a final all-epoch summary row.
    """

    cell_names: tuple
    matrix: np.ndarray

    @property
    def summary(self) -> np.ndarray:
        return self.matrix[-1]


def weight_heatmap(record, attributes, labels) -> Heatmap:
    """Aggregate a run's applied per-example weights by clean cell.

    ``record`` must expose per-epoch ``weight_sums`` and ``weight_counts``
    arrays indexed by stable_id (as the training loop records them).
    """
    sums = getattr(record, "weight_sums", None)
    counts = getattr(record, "weight_counts", None)
    if sums is None or counts is None or len(sums) == 0:
        raise InsufficientRecord("run record carries no per-example weight sums")
    sums = np.asarray(sums, dtype=float)
    counts = np.asarray(counts, dtype=float)
    attrs = np.asarray(attributes, dtype=int)
    labs = np.asarray(labels, dtype=int)
    if sums.shape != counts.shape or sums.shape[1] != attrs.size:
        raise ShapeError(f"weight arrays {sums.shape} vs {attrs.size} examples")

    cells = sorted(set(zip(attrs.tolist(), labs.tolist())))
    names = tuple(f"a{a}_y{y}" for a, y in cells)
    n_epochs = sums.shape[0]
    matrix = np.full((n_epochs + 1, len(cells)), np.nan)
    for c, (a, y) in enumerate(cells):
        members = (attrs == a) & (labs == y)
        cell_counts = counts[:, members].sum(axis=1)
        cell_sums = sums[:, members].sum(axis=1)
        seen = cell_counts > 0
        matrix[:-1, c][seen] = cell_sums[seen] / cell_counts[seen]
        total_count = cell_counts.sum()
        if total_count > 0:
            matrix[-1, c] = cell_sums.sum() / total_count
    return Heatmap(cell_names=names, matrix=matrix)


def write_heatmap_csv(heatmap: Heatmap, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", *heatmap.cell_names])
        n_epochs = heatmap.matrix.shape[0] - 1
        for e in range(n_epochs):
            writer.writerow([e + 1, *(repr(float(v)) for v in heatmap.matrix[e])])
        writer.writerow(["all", *(repr(float(v)) for v in heatmap.matrix[-1])])
