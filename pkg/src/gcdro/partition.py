"""Group assignments: clean (attribute, label) cells, configured merges,
generator-provided groupings, and unsupervised k-means clusters."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, GroupLayout
from .errors import (
    IncompleteMergeMap,
    InvalidSpec,
    MissingAttribute,
    TooFewPoints,
)


@dataclass(frozen=True)
class PartitionSpec:
    """How to group a dataset.

    kinds: ``clean`` = one group per (attribute, label) cell; ``merged`` =
    cells pooled via merge_map; ``generator`` = keep the group ids the data
    generator materialized; ``kmeans`` = unsupervised clusters on features.
    """

    kind: str
    merge_map: dict | None = None
    k: int = 8
    iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("clean", "merged", "kmeans", "generator"):
            raise InvalidSpec(f"unknown partition kind {self.kind!r}")
        if self.kind == "merged" and not self.merge_map:
            raise InvalidSpec("merged partition requires a merge_map")
        if self.kind == "kmeans":
            if self.k < 1:
                raise InvalidSpec(f"k must be >= 1, got {self.k}")
            if self.iters < 1:
                raise InvalidSpec(f"iters must be >= 1, got {self.iters}")


def observed_cells(ds: Dataset) -> list[tuple[int, int]]:
    """Sorted (attribute, label) cells present in the data."""
    attrs = ds.attributes
    if np.any(attrs < 0):
        missing = np.flatnonzero(attrs < 0)
        raise MissingAttribute(
            f"{missing.size} examples have no attribute (first id {missing[0]})")
    return sorted(set(zip(attrs.tolist(), ds.labels.tolist())))


def clean_partition(ds: Dataset) -> tuple[np.ndarray, GroupLayout]:
    """One group per observed (attribute, label) cell, lexicographic order."""
    cells = observed_cells(ds)
    index = {cell: i for i, cell in enumerate(cells)}
    assignment = np.array(
        [index[(a, y)] for a, y in zip(ds.attributes.tolist(), ds.labels.tolist())],
        dtype=int,
    )
    return assignment, GroupLayout.from_assignment(assignment, m=len(cells))


def merged_partition(ds: Dataset, spec: PartitionSpec) -> tuple[np.ndarray, GroupLayout]:
    """Groups given by merge_map[(attribute, label)]; the map must cover every
    observed cell and use dense group ids each receiving at least one example."""
    cells = observed_cells(ds)
    merge_map = spec.merge_map or {}
    for cell in cells:
        if cell not in merge_map:
            raise IncompleteMergeMap(f"merge map does not cover cell (a={cell[0]}, y={cell[1]})")
    ids = sorted(set(merge_map.values()))
    m = len(ids)
    if ids != list(range(m)):
        raise InvalidSpec(f"merge map group ids must be dense in [0, m), got {ids}")
    assignment = np.array(
        [merge_map[(a, y)] for a, y in zip(ds.attributes.tolist(), ds.labels.tolist())],
        dtype=int,
    )
    used = set(assignment.tolist())
    empty = [g for g in range(m) if g not in used]
    if empty:
        raise InvalidSpec(f"merge map groups {empty} receive no examples")
    return assignment, GroupLayout.from_assignment(assignment, m=m)


def generator_partition(ds: Dataset) -> tuple[np.ndarray, GroupLayout]:
    """Keep the group ids already materialized on the dataset."""
    assignment = ds.groups.copy()
    return assignment, GroupLayout.from_assignment(assignment)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # all points coincide with a center
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def kmeans_partition(features: np.ndarray, spec: PartitionSpec):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (assignment, layout, inertia history). Runs to an assignment
    fixpoint or ``iters``; nearest-centroid ties go to the lowest centroid
    index; an empty cluster is re-seeded from the point farthest from its
    current centroid (drawn from clusters that can spare a member).
    """
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    if n < spec.k:
        raise TooFewPoints(f"{n} points cannot form {spec.k} clusters")
    if spec.k == 1:
        assignment = np.zeros(n, dtype=int)
        inertia = float(np.sum((x - x.mean(axis=0)) ** 2))
        return assignment, GroupLayout.from_assignment(assignment, m=1), [inertia]

    rng = np.random.default_rng(spec.seed)
    centers = _kmeans_pp_init(x, spec.k, rng)
    prev = None
    history: list[float] = []
    for _ in range(spec.iters):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assignment = np.argmin(d2, axis=1)  # ties: lowest index
        history.append(float(d2[np.arange(n), assignment].sum()))

        counts = np.bincount(assignment, minlength=spec.k)
        for j in np.flatnonzero(counts == 0):
            # farthest point from its assigned centroid, excluding clusters
            # that would themselves become empty
            dist_own = d2[np.arange(n), assignment].copy()
            dist_own[counts[assignment] <= 1] = -1.0
            idx = int(np.argmax(dist_own))
            counts[assignment[idx]] -= 1
            assignment[idx] = j
            counts[j] = 1
            centers[j] = x[idx]

        if prev is not None and np.array_equal(assignment, prev):
            break
        prev = assignment.copy()
        for j in range(spec.k):
            members = assignment == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    return assignment, GroupLayout.from_assignment(assignment, m=spec.k), history


def apply_partition(ds: Dataset, spec: PartitionSpec) -> tuple[np.ndarray, GroupLayout]:
    if spec.kind == "clean":
        return clean_partition(ds)
    if spec.kind == "merged":
        return merged_partition(ds, spec)
    if spec.kind == "generator":
        return generator_partition(ds)
    assignment, layout, _ = kmeans_partition(ds.features, spec)
    return assignment, layout


def write_partition(assignment: np.ndarray, layout: GroupLayout, csv_path, json_path) -> None:
    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "group"])
        for i, g in enumerate(assignment.tolist()):
            writer.writerow([i, g])
    Path(json_path).write_text(json.dumps(layout.to_json(), indent=2) + "\n")
