"""Shared domain types: labeled examples, datasets, group layouts, simplex vectors.

Everything here is immutable after construction and safe to share across
workers; "mutation" means building a new value (e.g. ``Dataset.with_groups``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidDistribution, ShapeError

# Simplex sums are checked at 1e-9 (accumulation over up to ~1e6 doubles);
# short vectors (<= 16 entries) are held to 1e-12.
SIMPLEX_ATOL = 1e-9
SIMPLEX_ATOL_SHORT = 1e-12
_SHORT_VECTOR_LEN = 16


def _simplex_atol(n: int) -> float:
    return SIMPLEX_ATOL_SHORT if n <= _SHORT_VECTOR_LEN else SIMPLEX_ATOL


@dataclass(frozen=True)
class SimplexVector:
    """Non-negative vector summing to one."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size == 0:
            raise InvalidDistribution("simplex vector must be a non-empty 1-D array")
        if np.any(v < 0):
            raise InvalidDistribution(f"negative entry in simplex vector: min={v.min()}")
        if abs(float(v.sum()) - 1.0) > _simplex_atol(v.size):
            raise InvalidDistribution(f"simplex vector sums to {v.sum()!r}, not 1")

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, i):
        return self.values[i]


def normalize_simplex(v) -> SimplexVector:
    """Scale a non-negative vector to sum to one.

    Raises InvalidDistribution if any entry is negative or all entries are zero.
    """
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidDistribution("expected a non-empty 1-D vector")
    if np.any(arr < 0):
        raise InvalidDistribution(f"negative entry: min={arr.min()}")
    total = float(arr.sum())
    if total <= 0:
        raise InvalidDistribution("all entries are zero")
    return SimplexVector(arr / total)


@dataclass(frozen=True)
class LabeledExample:
    """One (x, y, a, g) record.

    ``attribute`` is optional; purely unsupervised partitions have none.
    """

    features: np.ndarray
    label: int
    group: int
    stable_id: int
    attribute: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))


@dataclass(frozen=True)
class GroupLayout:
    """Group count, per-group sizes, and the empirical group prior."""

    m: int
    sizes: np.ndarray
    total: int
    prior: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=int)
        prior = np.asarray(self.prior, dtype=float)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "prior", prior)
        if sizes.size != self.m or prior.size != self.m:
            raise ShapeError(f"layout arrays must have length m={self.m}")
        if int(sizes.sum()) != self.total:
            raise ShapeError(f"sizes sum to {sizes.sum()}, declared total {self.total}")
        if np.any(sizes < 1):
            raise ShapeError("every group must have at least one example")
        if abs(float(prior.sum()) - 1.0) > SIMPLEX_ATOL_SHORT * max(1, self.m):
            raise InvalidDistribution(f"group prior sums to {prior.sum()!r}")

    @classmethod
    def from_assignment(cls, groups: Sequence[int], m: int | None = None) -> "GroupLayout":
        g = np.asarray(groups, dtype=int)
        if m is None:
            m = int(g.max()) + 1 if g.size else 0
        sizes = np.bincount(g, minlength=m)
        total = int(sizes.sum())
        return cls(m=m, sizes=sizes, total=total, prior=sizes / total)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "sizes": self.sizes.tolist(),
            "total": self.total,
            "prior": self.prior.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroupLayout":
        return cls(m=d["m"], sizes=np.array(d["sizes"]), total=d["total"],
                   prior=np.array(d["prior"]))


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of labeled examples plus class/feature metadata.

    Group membership is a materialized integer per example, so the same
    features can carry different groupings via :meth:`with_groups`.
    """

    examples: tuple[LabeledExample, ...]
    num_classes: int
    feature_dim: int
    split_tag: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @cached_property
    def features(self) -> np.ndarray:
        return np.stack([e.features for e in self.examples]) if self.examples else \
            np.zeros((0, self.feature_dim))

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=int)

    @cached_property
    def groups(self) -> np.ndarray:
        return np.array([e.group for e in self.examples], dtype=int)

    @cached_property
    def attributes(self) -> np.ndarray:
        """Attribute ids with -1 standing in for "absent"."""
        return np.array(
            [-1 if e.attribute is None else e.attribute for e in self.examples], dtype=int
        )

    @cached_property
    def stable_ids(self) -> np.ndarray:
        return np.array([e.stable_id for e in self.examples], dtype=int)

    @classmethod
    def from_arrays(cls, features, labels, groups, attributes=None,
                    num_classes=None, split_tag="train") -> "Dataset":
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels, dtype=int)
        groups = np.asarray(groups, dtype=int)
        n = len(labels)
        if features.shape[0] != n or len(groups) != n:
            raise ShapeError("features, labels and groups must agree in length")
        if attributes is None:
            attributes = [None] * n
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if n else 0
        examples = tuple(
            LabeledExample(
                features=features[i],
                label=int(labels[i]),
                group=int(groups[i]),
                stable_id=i,
                attribute=None if attributes[i] is None or attributes[i] < 0
                else int(attributes[i]),
            )
            for i in range(n)
        )
        return cls(examples=examples, num_classes=num_classes,
                   feature_dim=features.shape[1] if n else 0, split_tag=split_tag)

    def with_groups(self, new_groups: Sequence[int]) -> "Dataset":
        """Same data under a different group assignment."""
        g = np.asarray(new_groups, dtype=int)
        if g.size != len(self):
            raise ShapeError(f"assignment length {g.size} != dataset size {len(self)}")
        examples = tuple(replace(e, group=int(g[i])) for i, e in enumerate(self.examples))
        return Dataset(examples=examples, num_classes=self.num_classes,
                       feature_dim=self.feature_dim, split_tag=self.split_tag)

    def layout(self, m: int | None = None) -> GroupLayout:
        return GroupLayout.from_assignment(self.groups, m=m)


def validate_dataset(ds: Dataset, layout: GroupLayout) -> list[str]:
    """Report every invariant violated by ``ds`` against ``layout``.

    Returns an empty list iff the dataset is consistent; never raises.
    """
    report: list[str] = []
    for e in ds.examples:
        if not (0 <= e.label < ds.num_classes):
            report.append(f"example {e.stable_id}: label {e.label} out of range [0, {ds.num_classes})")
        if not (0 <= e.group < layout.m):
            report.append(f"example {e.stable_id}: group index {e.group} out of range [0, {layout.m})")
        if e.features.shape != (ds.feature_dim,):
            report.append(
                f"example {e.stable_id}: feature length {e.features.shape} != ({ds.feature_dim},)"
            )
    ids = sorted(e.stable_id for e in ds.examples)
    if ids != list(range(len(ds))):
        report.append("stable_ids are not unique and dense in [0, N)")
    if layout.total != len(ds):
        report.append(f"layout total {layout.total} != dataset size {len(ds)}")
    counts = np.bincount(
        np.clip(ds.groups, 0, max(layout.m - 1, 0)), minlength=layout.m
    ) if len(ds) else np.zeros(layout.m, dtype=int)
    for g in range(layout.m):
        if np.all((ds.groups == g) | (ds.groups != g)) and counts[g] != layout.sizes[g]:
            report.append(
                f"group {g}: size mismatch (layout says {layout.sizes[g]}, dataset has {counts[g]})"
            )
    return report


# ---------------------------------------------------------------------------
# CSV interchange: header `id,group,attribute,label,f0,...`; attribute may be
# empty; numeric fields only.

def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "group", "attribute", "label"]
                        + [f"f{i}" for i in range(ds.feature_dim)])
        for e in ds.examples:
            attr = "" if e.attribute is None else e.attribute
            writer.writerow([e.stable_id, e.group, attr, e.label]
                            + [repr(float(x)) for x in e.features])


def read_dataset_csv(path: str | Path, num_classes: int | None = None,
                     split_tag: str = "train") -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["id", "group", "attribute", "label"]:
            raise ShapeError(f"unexpected CSV header in {path}: {header[:4]}")
        feature_dim = len(header) - 4
        rows = list(reader)
    rows.sort(key=lambda r: int(r[0]))
    features = np.array([[float(x) for x in r[4:]] for r in rows])
    labels = [int(r[3]) for r in rows]
    groups = [int(r[1]) for r in rows]
    attributes = [int(r[2]) if r[2] != "" else None for r in rows]
    ds = Dataset.from_arrays(features.reshape(len(rows), feature_dim), labels, groups,
                             attributes, num_classes=num_classes, split_tag=split_tag)
    return ds
