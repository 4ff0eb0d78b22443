"""Seeded synthetic dataset generators.

Three constructions: a two-group binary task whose group structure hides a
spurious correlation behind matched conditionals, a 2D four-blob task whose
vertical coordinate is spurious, and a token-sequence arithmetic task with
plantable shortcuts. All are pure functions of (spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, GroupLayout
from .errors import GenerationStalled, InvalidSpec
from .partition import clean_partition

RETRY_CAP = 1000


# ---------------------------------------------------------------------------
# Two-group binary task with matched conditionals (spurious feature S)

@dataclass(frozen=True)
class Table1Spec:
    """Binary task with conditionals P(Y=0|S,G): G1 (0.5, 0), G2 (1, 0.5).

    Features are [S + eps, r + eps'] where r = +-1 tracks the label except for
    a flipped fraction; eps, eps' ~ N(0, feature_noise^2).
    """

    n_per_group: int = 1000
    seed: int = 0
    feature_noise: float = 0.1
    flip_fraction: float = 0.05

    def __post_init__(self):
        if self.n_per_group < 1:
            raise InvalidSpec(f"n_per_group must be >= 1, got {self.n_per_group}")
        if self.feature_noise < 0:
            raise InvalidSpec(f"feature_noise must be >= 0, got {self.feature_noise}")
        if not (0 <= self.flip_fraction < 1):
            raise InvalidSpec(f"flip_fraction must lie in [0, 1), got {self.flip_fraction}")


# P(Y=0 | S, group): rows = group, columns = S
_P_Y0 = np.array([[0.5, 0.0], [1.0, 0.5]])


def gen_table1(spec: Table1Spec, split_tag: str = "train"):
    """Returns (dataset, clean layout over (S, Y) cells, two-group layout).

    The dataset's materialized group ids are the two generator groups; the
    clean cells are recoverable from (attribute=S, label). The two-group
    assignment splits cells across groups, so it cannot be expressed as a
    cell merge; it only exists materialized here.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_per_group
    feats, labels, attrs, groups = [], [], [], []
    for g in range(2):
        s = rng.integers(0, 2, n)
        u = rng.random(n)
        y = np.where(u < _P_Y0[g, s], 0, 1)
        r = np.where(y == 1, 1.0, -1.0)
        flips = rng.random(n) < spec.flip_fraction
        r = np.where(flips, -r, r)
        eps = rng.normal(0.0, spec.feature_noise, (n, 2))
        feats.append(np.column_stack([s + eps[:, 0], r + eps[:, 1]]))
        labels.append(y)
        attrs.append(s)
        groups.append(np.full(n, g))
    ds = Dataset.from_arrays(
        np.vstack(feats), np.concatenate(labels), np.concatenate(groups),
        attributes=np.concatenate(attrs), num_classes=2, split_tag=split_tag)
    _, clean_layout = clean_partition(ds)
    imperfect_layout = GroupLayout.from_assignment(ds.groups, m=2)
    return ds, clean_layout, imperfect_layout


# ---------------------------------------------------------------------------
# 2D four-blob task (vertical coordinate spurious, horizontal robust)

@dataclass(frozen=True)
class Blobs2DSpec:
    """Four Gaussian subclasses; class = sign of the horizontal mean,
    attribute = sign of the vertical mean; subclasses with attribute == label
    are the majorities."""

    majority_per_subclass: int = 500
    minority_per_subclass: int = 25
    subclass_means: tuple = ((2.0, 2.0), (2.0, -2.0), (-2.0, -2.0), (-2.0, 2.0))
    subclass_cov: tuple = ((0.25, 0.0), (0.0, 0.25))
    seed: int = 0

    def __post_init__(self):
        if self.minority_per_subclass < 1:
            raise InvalidSpec("minority_per_subclass must be >= 1 (empty cells break the "
                              "clean partition)")
        if self.minority_per_subclass > self.majority_per_subclass:
            raise InvalidSpec("minority_per_subclass must not exceed majority_per_subclass")
        means = np.asarray(self.subclass_means, dtype=float)
        if means.shape != (4, 2):
            raise InvalidSpec(f"need four 2D means, got shape {means.shape}")
        if np.any(means == 0):
            raise InvalidSpec("subclass means must have nonzero coordinates (signs define "
                              "label and attribute)")
        cells = {(int(mx > 0), int(my > 0)) for mx, my in means}
        if len(cells) != 4:
            raise InvalidSpec("subclass means must cover all four sign quadrants")
        cov = np.asarray(self.subclass_cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise InvalidSpec("covariance must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise InvalidSpec("covariance must be positive definite")


def gen_blobs2d(spec: Blobs2DSpec, split_tag: str = "train"):
    """Returns (dataset, clean layout of the 4 subclasses, two-group layout).

    The two materialized groups pool subclasses by vertical sign, so each
    group mixes one class's majority with the other class's minority; group
    reweighting alone cannot isolate the minorities.
    """
    rng = np.random.default_rng(spec.seed)
    cov = np.asarray(spec.subclass_cov, dtype=float)
    feats, labels, attrs, groups = [], [], [], []
    for mean in np.asarray(spec.subclass_means, dtype=float):
        label = int(mean[0] > 0)
        attr = int(mean[1] > 0)
        n = spec.majority_per_subclass if attr == label else spec.minority_per_subclass
        feats.append(rng.multivariate_normal(mean, cov, size=n))
        labels.append(np.full(n, label))
        attrs.append(np.full(n, attr))
        groups.append(np.full(n, attr))  # shape-group = vertical sign
    ds = Dataset.from_arrays(
        np.vstack(feats), np.concatenate(labels), np.concatenate(groups),
        attributes=np.concatenate(attrs), num_classes=2, split_tag=split_tag)
    _, clean_layout = clean_partition(ds)
    imperfect_layout = GroupLayout.from_assignment(ds.groups, m=2)
    return ds, clean_layout, imperfect_layout


# ---------------------------------------------------------------------------
# Token-sequence arithmetic task

ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class SeqTaskSpec:
    """Sequences of letter chunks wrapped by integers; the label is the sum of
    positive wrapper differences mod 10.

    setting1 forces the last chunk's wrappers increasing on the training
    distribution; setting2 plants a two-token special segment whose own
    indicator always equals the label on the training distribution.
    """

    setting: str = "setting1"
    n_samples: int = 1000
    n_test: int | None = None
    m_range: tuple = (3, 6)
    chunk_len_range: tuple = (3, 5)
    alphabet_size: int = 26
    int_range: tuple = (1, 10)
    special_segment: tuple = ("a", "b")
    seed: int = 0

    def __post_init__(self):
        if self.setting not in ("setting1", "setting2"):
            raise InvalidSpec(f"unknown setting {self.setting!r}")
        if self.n_samples < 1:
            raise InvalidSpec(f"n_samples must be >= 1, got {self.n_samples}")
        if self.n_test is not None and self.n_test < 1:
            raise InvalidSpec(f"n_test must be >= 1, got {self.n_test}")
        for name, (lo, hi) in (("m_range", self.m_range),
                               ("chunk_len_range", self.chunk_len_range),
                               ("int_range", self.int_range)):
            if lo < 1 or hi < lo:
                raise InvalidSpec(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if not (1 <= self.alphabet_size <= len(ALPHABET)):
            raise InvalidSpec(f"alphabet_size must lie in [1, 26], got {self.alphabet_size}")
        if len(self.special_segment) < 1:
            raise InvalidSpec("special_segment must not be empty")

    @property
    def test_size(self) -> int:
        return self.n_test if self.n_test is not None else max(1, self.n_samples // 5)


@dataclass(frozen=True)
class SeqSample:
    tokens: tuple
    label: int
    meta: dict

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))


def _indicator(c1: int, c2: int) -> int:
    return c2 - c1 if c2 > c1 else 0


def seq_label_oracle(tokens) -> int:
    """Recompute the label from raw tokens alone.

    The stream alternates integer wrappers and letter runs; each chunk
    contributes max(0, second wrapper - first wrapper) and the label is the
    sum mod 10.
    """
    total = 0
    i = 0
    toks = list(tokens)
    while i < len(toks):
        c1 = int(toks[i])
        i += 1
        while i < len(toks) and not toks[i].isdigit():
            i += 1
        c2 = int(toks[i])
        i += 1
        total += _indicator(c1, c2)
    return total % 10


def _draw_raw(rng: np.random.Generator, spec: SeqTaskSpec):
    """Unconstrained sample: chunk letter runs and wrapper integer pairs."""
    m = int(rng.integers(spec.m_range[0], spec.m_range[1] + 1))
    chunks = []
    for _ in range(m):
        length = int(rng.integers(spec.chunk_len_range[0], spec.chunk_len_range[1] + 1))
        chars = tuple(ALPHABET[c] for c in rng.integers(0, spec.alphabet_size, length))
        chunks.append(chars)
    pairs = [tuple(int(v) for v in rng.integers(spec.int_range[0], spec.int_range[1] + 1, 2))
             for _ in range(m)]
    return m, chunks, pairs


def _assemble(chunks, pairs, meta) -> SeqSample:
    tokens = []
    for chars, (c1, c2) in zip(chunks, pairs):
        tokens.append(str(c1))
        tokens.extend(chars)
        tokens.append(str(c2))
    d = [_indicator(c1, c2) for c1, c2 in pairs]
    label = sum(d) % 10
    meta = dict(meta, d=d)
    return SeqSample(tokens=tuple(tokens), label=label, meta=meta)


def _draw_int_pair(rng, spec):
    return tuple(int(v) for v in rng.integers(spec.int_range[0], spec.int_range[1] + 1, 2))


def _sample_setting1(rng, spec, in_dist: bool) -> SeqSample:
    m, chunks, pairs = _draw_raw(rng, spec)
    want = (lambda c1, c2: c2 > c1) if in_dist else (lambda c1, c2: c2 <= c1)
    for _ in range(RETRY_CAP):
        if want(*pairs[-1]):
            return _assemble(chunks, pairs,
                             {"setting": "setting1", "m": m, "in_dist": in_dist})
        pairs[-1] = _draw_int_pair(rng, spec)
    raise GenerationStalled(
        f"setting1 last-chunk constraint unsatisfied after {RETRY_CAP} retries "
        f"(in_dist={in_dist}, int_range={spec.int_range})")


def _sample_setting2_special(rng, spec) -> SeqSample:
    m, chunks, pairs = _draw_raw(rng, spec)
    j = int(rng.integers(0, m))
    chunks[j] = tuple(spec.special_segment)
    d_j = _indicator(*pairs[j])
    for _ in range(RETRY_CAP):
        total = sum(_indicator(c1, c2) for c1, c2 in pairs)
        if total % 10 == d_j:
            return _assemble(chunks, pairs,
                             {"setting": "setting2", "m": m, "special_chunk": j,
                              "in_dist": True})
        pairs = [pairs[i] if i == j else _draw_int_pair(rng, spec) for i in range(m)]
    raise GenerationStalled(
        f"setting2 congruence unsatisfied after {RETRY_CAP} retries "
        f"(m={m}, special_chunk={j}, d_j={d_j})")


def _sample_setting2_uniform(rng, spec) -> SeqSample:
    m, chunks, pairs = _draw_raw(rng, spec)
    return _assemble(chunks, pairs,
                     {"setting": "setting2", "m": m, "special_chunk": None,
                      "in_dist": False})


@dataclass(frozen=True)
class SeqTaskData:
    train: tuple
    d_in: tuple
    d_out: tuple
    spec: SeqTaskSpec


def gen_seq_task(spec: SeqTaskSpec) -> SeqTaskData:
    """Train split plus in-distribution and out-of-distribution test splits.

    setting1: train and D_in satisfy the last-chunk increasing-wrapper
    constraint, D_out violates it. setting2: train and D_in carry the special
    segment with the congruence that makes its indicator equal the label;
    D_out is unconstrained uniform sampling.
    """
    rng = np.random.default_rng(spec.seed)
    n_test = spec.test_size
    if spec.setting == "setting1":
        train = tuple(_sample_setting1(rng, spec, True) for _ in range(spec.n_samples))
        d_in = tuple(_sample_setting1(rng, spec, True) for _ in range(n_test))
        d_out = tuple(_sample_setting1(rng, spec, False) for _ in range(n_test))
    else:
        train = tuple(_sample_setting2_special(rng, spec) for _ in range(spec.n_samples))
        d_in = tuple(_sample_setting2_special(rng, spec) for _ in range(n_test))
        d_out = tuple(_sample_setting2_uniform(rng, spec) for _ in range(n_test))
    return SeqTaskData(train=train, d_in=d_in, d_out=d_out, spec=spec)


def write_seq_file(samples, path) -> None:
    """One sample per line: space-joined tokens, TAB, label, TAB, metadata JSON."""
    with Path(path).open("w") as fh:
        for s in samples:
            fh.write(" ".join(s.tokens) + "\t" + str(s.label) + "\t"
                     + json.dumps(s.meta, sort_keys=True) + "\n")


def read_seq_file(path) -> tuple:
    samples = []
    with Path(path).open() as fh:
        for line in fh:
            tokens, label, meta = line.rstrip("\n").split("\t")
            samples.append(SeqSample(tokens=tuple(tokens.split(" ")),
                                     label=int(label), meta=json.loads(meta)))
    return tuple(samples)
