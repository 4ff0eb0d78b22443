"""Worst-case-distribution machinery for robust training.

The pieces: moving-average trackers for group losses and the group prior,
greedy coverage-capped group weights, exponentiated-gradient group weights,
the two-tier within-group instance weights with their cutoff rule, and the
per-example training weight that composes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import GroupLayout, SimplexVector, normalize_simplex
from .errors import (
    DegenerateGroupPrior,
    InvalidAlpha,
    InvalidArguments,
    InvalidDistribution,
    InvalidObservation,
    InvalidStepSize,
    ShapeError,
)


@dataclass(frozen=True)
class EmaTracker:
    """Per-entry exponential moving average, gamma weighting the new observation.

    update: value <- gamma * obs + (1 - gamma) * value. Entries that have never
    been observed take their first observation verbatim.
    """

    values: np.ndarray
    gamma: float
    initialized: np.ndarray

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise InvalidArguments(f"gamma must lie in (0, 1], got {self.gamma}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "initialized", np.asarray(self.initialized, dtype=bool))
        if self.values.shape != self.initialized.shape:
            raise ShapeError("values and initialized mask must have the same shape")

    @classmethod
    def empty(cls, n: int, gamma: float) -> "EmaTracker":
        return cls(values=np.zeros(n), gamma=gamma, initialized=np.zeros(n, dtype=bool))

    def __len__(self) -> int:
        return self.values.size

    def update_at(self, indices, observations) -> "EmaTracker":
        """New tracker with ``observations`` folded in at ``indices`` only."""
        idx = np.asarray(indices, dtype=int)
        obs = np.asarray(observations, dtype=float)
        if idx.shape != obs.shape:
            raise ShapeError(f"indices {idx.shape} vs observations {obs.shape}")
        if not np.all(np.isfinite(obs)):
            raise InvalidObservation(f"non-finite observation at indices {idx[~np.isfinite(obs)]}")
        values = self.values.copy()
        init = self.initialized.copy()
        fresh = ~init[idx]
        values[idx] = self.gamma * obs + (1.0 - self.gamma) * values[idx]
        values[idx[fresh]] = obs[fresh]
        init[idx] = True
        return EmaTracker(values=values, gamma=self.gamma, initialized=init)

    def observe_vector(self, observations) -> "EmaTracker":
        """Fold in a full-length observation vector (all entries at once)."""
        return self.update_at(np.arange(len(self)), observations)

    def cleared(self) -> "EmaTracker":
        """Forget all history; every entry becomes uninitialized again."""
        return EmaTracker.empty(len(self), self.gamma)

    def filled(self, default: float = 0.0) -> np.ndarray:
        """Values with uninitialized entries replaced by ``default``."""
        return np.where(self.initialized, self.values, default)


def greedy_group_weights(prior, losses, alpha: float) -> SimplexVector:
    """Worst-case group mixture under the coverage cap q(g) <= prior(g)/alpha.

    Groups are sorted by decreasing historical loss (ties: lower index first)
    and mass is poured up to each group's cap until the budget of 1 runs out.
    The result maximizes sum_g q(g) * losses(g) over the capped simplex.
    """
    if not (0 < alpha <= 1):
        raise InvalidAlpha(f"alpha must lie in (0, 1], got {alpha}")
    p = prior.values if isinstance(prior, SimplexVector) else SimplexVector(np.asarray(prior)).values
    loss = np.asarray(losses, dtype=float)
    if loss.shape != p.shape:
        raise ShapeError(f"losses {loss.shape} vs prior {p.shape}")
    if not np.all(np.isfinite(loss)):
        raise InvalidArguments("losses must be finite")
    caps = p / alpha
    order = np.argsort(-loss, kind="stable")
    q = np.zeros_like(p)
    remaining = 1.0
    for g in order:
        take = min(caps[g], remaining)
        q[g] = take
        remaining -= take
        if remaining <= 0.0:
            break
    return SimplexVector(q)


def eg_group_weights(q_prev, losses, eta_q: float) -> SimplexVector:
    """Multiplicative-weights group update: q(g) proportional to q_prev(g) * exp(eta_q * loss(g))."""
    if not (eta_q > 0 and np.isfinite(eta_q)):
        raise InvalidStepSize(f"eta_q must be positive and finite, got {eta_q}")
    q = q_prev.values if isinstance(q_prev, SimplexVector) else SimplexVector(np.asarray(q_prev)).values
    if np.any(q <= 0):
        raise InvalidDistribution("eg update needs strictly positive previous weights")
    loss = np.asarray(losses, dtype=float)
    if loss.shape != q.shape:
        raise ShapeError(f"losses {loss.shape} vs weights {q.shape}")
    if not np.all(np.isfinite(loss)):
        raise InvalidArguments("losses must be finite")
    z = eta_q * loss
    z = z - z.max()  # overflow guard; normalization cancels the shift
    out = q * np.exp(z)
    # A group whose loss stays low for many consecutive updates decays
    # multiplicatively until the float underflows to exactly 0, and a zero can
    # never recover under a multiplicative rule.  Floor at the smallest normal
    # float so every group keeps a live (if negligible) weight.
    out = np.maximum(out, np.finfo(float).tiny)
    return normalize_simplex(out)


def gc_cutoff(total: int, n_g: int, beta: float) -> int:
    """Number of instances in a group of size n_g that get the upper-tier weight.

    ceil(beta * n_g * (N - n_g) / (N - beta * n_g)): the count at which
    cutoff/(beta*n_g) + (n_g - cutoff)/N = 1 before rounding, i.e. the two-tier
    conditional normalizes.
    """
    if not (1 <= n_g <= total):
        raise InvalidArguments(f"need 1 <= n_g <= N, got n_g={n_g}, N={total}")
    if not (0 < beta <= 1):
        raise InvalidArguments(f"beta must lie in (0, 1], got {beta}")
    denom = total - beta * n_g
    if denom <= 1e-12:  # beta = 1 and n_g = N: the box collapses to uniform
        return n_g
    raw = beta * n_g * (total - n_g) / denom
    k = math.ceil(raw - 1e-9)  # absorb float dust so exact integers stay put
    return max(0, min(n_g, k))


def gc_cutoff_fraction(total: int, n_g: int, beta: float) -> float:
    """Pre-rounding upweighted fraction beta * (N - n_g) / (N - beta * n_g)."""
    if not (1 <= n_g <= total):
        raise InvalidArguments(f"need 1 <= n_g <= N, got n_g={n_g}, N={total}")
    if not (0 < beta <= 1):
        raise InvalidArguments(f"beta must lie in (0, 1], got {beta}")
    denom = total - beta * n_g
    if denom <= 1e-12:
        return 1.0
    return beta * (total - n_g) / denom


def gc_conditional_weights(group_losses, total: int, n_g: int, beta: float) -> np.ndarray:
    """Two-tier within-group importance ratios, aligned with the input order.

    Instances are ranked by decreasing loss (ties: earlier position first); the
    top gc_cutoff ranks get ratio 1/beta, the rest n_g/N. The implied
    conditional probability ratio/n_g is then renormalized to sum exactly 1
    over the group, scaling all ratios by a common factor.
    """
    loss = np.asarray(group_losses, dtype=float)
    if loss.shape != (n_g,):
        raise ShapeError(f"expected {n_g} losses, got shape {loss.shape}")
    k = gc_cutoff(total, n_g, beta)
    order = np.argsort(-loss, kind="stable")
    ratios = np.full(n_g, n_g / total)
    ratios[order[:k]] = 1.0 / beta
    cond_mass = float(np.sum(ratios / n_g))
    return ratios / cond_mass


@dataclass
class RobustState:
    """Everything the worst-case distribution is made of during a run.

    ``cond_ratio`` is indexed by stable_id and starts at all-ones (no inner
    update yet); ``inst_loss_ema`` tracks per-instance losses for the inner
    update's ranking and is None for methods that never rank instances.
    """

    layout: GroupLayout
    group_loss_ema: EmaTracker
    group_prior_ema: EmaTracker
    q_group: np.ndarray
    cond_ratio: np.ndarray
    inst_loss_ema: EmaTracker | None = None

    @classmethod
    def initial(cls, layout: GroupLayout, gamma_group_loss: float,
                gamma_prior: float, gamma_cond_loss: float | None = None) -> "RobustState":
        inst = None
        if gamma_cond_loss is not None:
            inst = EmaTracker.empty(layout.total, gamma_cond_loss)
        return cls(
            layout=layout,
            group_loss_ema=EmaTracker.empty(layout.m, gamma_group_loss),
            group_prior_ema=EmaTracker.empty(layout.m, gamma_prior),
            q_group=layout.prior.copy(),
            cond_ratio=np.ones(layout.total),
            inst_loss_ema=inst,
        )

    def observe_prior(self, batch_groups: np.ndarray) -> None:
        """Fold the batch's group-frequency vector into the prior tracker."""
        frac = np.bincount(batch_groups, minlength=self.layout.m) / len(batch_groups)
        tracker = self.group_prior_ema.observe_vector(frac)
        total = tracker.values.sum()
        if total <= 0:
            raise InvalidDistribution("prior tracker collapsed to zero mass")
        self.group_prior_ema = EmaTracker(values=tracker.values / total,
                                          gamma=tracker.gamma,
                                          initialized=tracker.initialized)

    def observe_group_losses(self, batch_groups: np.ndarray, losses: np.ndarray) -> None:
        present = np.unique(batch_groups)
        means = np.array([losses[batch_groups == g].mean() for g in present])
        self.group_loss_ema = self.group_loss_ema.update_at(present, means)

    def observe_instance_losses(self, stable_ids: np.ndarray, losses: np.ndarray) -> None:
        if self.inst_loss_ema is None:
            raise InvalidArguments("this state does not track per-instance losses")
        self.inst_loss_ema = self.inst_loss_ema.update_at(stable_ids, losses)

    def recompute_conditional(self, groups: np.ndarray, beta: float) -> None:
        """Inner update: re-rank every group's instances and reassign tiers."""
        if self.inst_loss_ema is None:
            raise InvalidArguments("this state does not track per-instance losses")
        inst = self.inst_loss_ema.filled(0.0)
        for g in range(self.layout.m):
            members = np.flatnonzero(groups == g)
            self.cond_ratio[members] = gc_conditional_weights(
                inst[members], self.layout.total, len(members), beta)

    def clear_group_loss_history(self) -> None:
        self.group_loss_ema = self.group_loss_ema.cleared()

    def batch_weights(self, batch_groups: np.ndarray, stable_ids: np.ndarray) -> np.ndarray:
        """q(g)/p_hat(g) * cond_ratio for each batch member."""
        prior = self.group_prior_ema.filled(0.0)
        p = prior[batch_groups]
        if np.any(p <= 0):
            bad = batch_groups[p <= 0]
            raise DegenerateGroupPrior(f"estimated prior is zero for groups {np.unique(bad)}")
        return self.q_group[batch_groups] / p * self.cond_ratio[stable_ids]

    def to_json(self, step: int | None = None) -> dict:
        d = {
            "q_group": self.q_group.tolist(),
            "cond_ratio": self.cond_ratio.tolist(),
            "group_loss_ema": self.group_loss_ema.filled(0.0).tolist(),
            "group_prior_ema": self.group_prior_ema.filled(0.0).tolist(),
        }
        if step is not None:
            d["step"] = step
        return d


def example_weight(state: RobustState, example) -> float:
    """Applied training weight for one example under the current state."""
    g = example.group
    p = state.group_prior_ema.filled(0.0)[g]
    if p <= 0:
        raise DegenerateGroupPrior(f"estimated prior is zero for group {g}")
    return float(state.q_group[g] / p * state.cond_ratio[example.stable_id])
