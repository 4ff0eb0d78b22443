"""Training loops: ERM, group-uniform resampling, greedy and multiplicative
group reweighting, and the group-conditional method with lazy inner updates.

One loop serves all methods; they differ only in how each batch's per-example
weights are produced and (for the conditional method) in the end-of-epoch
inner update that re-ranks instances within groups.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, GroupLayout, validate_dataset
from .dro import RobustState, eg_group_weights, greedy_group_weights
from .errors import (
    ConfigError,
    DivergedError,
    InvalidArguments,
    IoError,
    NoCheckpoints,
)
from .eval import group_accuracies, robust_accuracy_merged
from .model import (
    clone_params,
    flatten_params,
    forward_logits,
    init_params,
    loss_and_grads,
    per_example_loss,
    predict,
    sgd_step,
)
from .partition import clean_partition

METHODS = ("erm", "resample", "gdro_greedy", "gdro_eg", "gcdro")
INNER_UPDATE_MODES = ("every_epoch", "on_robust_drop")


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter of a single run.

    Defaults: coverage alpha 0.2 and conditional beta 0.5 (the clean-partition
    operating point); gamma 0.5 for both loss trackers and 0.01 for the slow
    prior tracker.
    """

    method: str = "erm"
    alpha: float = 0.2
    beta: float = 0.5
    gamma_group_loss: float = 0.5
    gamma_cond_loss: float = 0.5
    gamma_prior: float = 0.01
    eta: float = 0.1
    eta_q: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    inner_update: str = "every_epoch"
    eval_merge_threshold: int = 100
    model: str = "linear"
    hidden_dim: int = 32
    lr_decay: str = "constant"
    track_params: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not (0 < self.alpha <= 1):
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not (0 < self.beta <= 1):
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        for name in ("gamma_group_loss", "gamma_cond_loss", "gamma_prior"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.eta_q <= 0:
            raise ConfigError(f"eta_q must be positive, got {self.eta_q}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.inner_update not in INNER_UPDATE_MODES:
            raise ConfigError(
                f"inner_update must be one of {INNER_UPDATE_MODES}, got {self.inner_update!r}")
        if self.eval_merge_threshold < 1:
            raise ConfigError(
                f"eval_merge_threshold must be >= 1, got {self.eval_merge_threshold}")
        if self.model not in ("linear", "mlp1"):
            raise ConfigError(f"model must be 'linear' or 'mlp1', got {self.model!r}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.lr_decay not in ("constant", "linear"):
            raise ConfigError(f"lr_decay must be 'constant' or 'linear', got {self.lr_decay!r}")

    def config_hash(self) -> str:
        """Stable id over everything that shapes the run except seed and
        instrumentation, so sweep seeds share a directory."""
        d = asdict(self)
        d.pop("seed")
        d.pop("track_params")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class EpochRecord:
    epoch: int
    mean_train_loss: float
    group_acc: tuple
    group_counts: tuple
    robust: float
    average: float
    merged_groups: tuple
    inner_update_triggered: bool = False

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_train_loss": self.mean_train_loss,
            "group_acc": list(self.group_acc),
            "group_counts": list(self.group_counts),
            "robust": self.robust,
            "average": self.average,
            "merged_groups": list(self.merged_groups),
            "inner_update_triggered": self.inner_update_triggered,
        }


@dataclass
class RunRecord:
    """Everything a run produced: per-epoch metrics, per-step group weights,
    per-example applied-weight sums, checkpoints."""

    method: str
    seed: int
    config: TrainConfig
    config_hash: str
    n_train: int
    epochs: list = field(default_factory=list)
    q_history: list = field(default_factory=list)
    group_weight_history: list = field(default_factory=list)
    weight_sums: list = field(default_factory=list)
    weight_counts: list = field(default_factory=list)
    cond_snapshots: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    param_trace: list = field(default_factory=list)

    @property
    def robust_by_epoch(self) -> np.ndarray:
        return np.array([e.robust for e in self.epochs])

    @property
    def best_epoch(self) -> int:
        """1-based epoch of the best validation robust accuracy; ties earliest."""
        if not self.epochs:
            raise NoCheckpoints("run record has no completed epochs")
        return int(np.argmax(self.robust_by_epoch)) + 1


def select_model(record: RunRecord) -> dict:
    """Checkpoint parameters of the epoch with the best validation robust
    accuracy (earliest on ties)."""
    if not record.checkpoints:
        raise NoCheckpoints("run record has no checkpoints")
    return record.checkpoints[record.best_epoch - 1]


def inner_update_check(record: RunRecord, config: TrainConfig) -> bool:
    """Whether the conditional tiers should be recomputed at this epoch
    boundary: always under every_epoch, and on a robust-accuracy drop
    otherwise."""
    if not record.epochs:
        raise InvalidArguments("inner_update_check needs at least one completed epoch")
    if config.inner_update == "every_epoch":
        return True
    if len(record.epochs) < 2:
        return False
    return record.epochs[-1].robust < record.epochs[-2].robust


def _resample_batch(rng, group_indices, sizes, batch_size) -> np.ndarray:
    """Group drawn uniformly, then an instance uniformly within it."""
    gs = rng.integers(0, len(sizes), batch_size)
    within = (rng.random(batch_size) * sizes[gs]).astype(int)
    return np.array([group_indices[g][w] for g, w in zip(gs, within)], dtype=int)


def train(ds_train: Dataset, ds_valid: Dataset, layout: GroupLayout,
          config: TrainConfig, eval_assignment=None, eval_layout=None) -> RunRecord:
    """Run one method end to end and return its full record.

    ``layout`` describes the training-time grouping (must match
    ``ds_train.groups``). Validation robust accuracy is always computed on
    ``eval_assignment`` (clean (attribute, label) cells by default), never on
    the training grouping.
    """
    report = validate_dataset(ds_train, layout)
    if report:
        raise InvalidArguments("inconsistent training data: " + "; ".join(report))
    if not np.array_equal(ds_train.stable_ids, np.arange(len(ds_train))):
        raise InvalidArguments("training examples must be ordered by stable_id")

    if eval_assignment is None:
        if np.all(ds_valid.attributes >= 0):
            eval_assignment, eval_layout = clean_partition(ds_valid)
        else:
            eval_assignment, eval_layout = ds_valid.groups, ds_valid.layout()
    eval_assignment = np.asarray(eval_assignment, dtype=int)
    if eval_layout is None:
        eval_layout = GroupLayout.from_assignment(eval_assignment)
    ds_valid_eval = ds_valid.with_groups(eval_assignment)

    n = len(ds_train)
    x_train = ds_train.features
    y_train = ds_train.labels
    g_train = ds_train.groups
    rng = np.random.default_rng(config.seed)
    params = init_params(config.model, ds_train.feature_dim, ds_train.num_classes,
                         config.hidden_dim, config.seed)

    needs_state = config.method in ("gdro_greedy", "gdro_eg", "gcdro")
    state = None
    if needs_state:
        state = RobustState.initial(
            layout, config.gamma_group_loss, config.gamma_prior,
            gamma_cond_loss=config.gamma_cond_loss if config.method == "gcdro" else None)

    record = RunRecord(method=config.method, seed=config.seed, config=config,
                       config_hash=config.config_hash(), n_train=n)
    steps_per_epoch = math.ceil(n / config.batch_size)
    group_indices = [np.flatnonzero(g_train == g) for g in range(layout.m)]
    step = 0

    for epoch in range(1, config.epochs + 1):
        if config.lr_decay == "linear":
            lr = config.eta * (1.0 - (epoch - 1) / config.epochs)
        else:
            lr = config.eta
        w_sum = np.zeros(n)
        w_cnt = np.zeros(n)
        batch_losses = []

        if config.method == "resample":
            batches = [_resample_batch(rng, group_indices, layout.sizes, config.batch_size)
                       for _ in range(steps_per_epoch)]
        else:
            order = rng.permutation(n)
            batches = [order[i * config.batch_size:(i + 1) * config.batch_size]
                       for i in range(steps_per_epoch)]

        for idx in batches:
            xb, yb, gb = x_train[idx], y_train[idx], g_train[idx]
            if needs_state:
                # fresh losses drive the trackers and this step's weights
                logits, _ = forward_logits(params, xb)
                pre_losses = per_example_loss(logits, yb)
                if not np.all(np.isfinite(pre_losses)):
                    raise DivergedError(
                        f"non-finite example loss at epoch {epoch}, step {step}")
                state.observe_prior(gb)
                state.observe_group_losses(gb, pre_losses)
                if config.method == "gcdro":
                    state.observe_instance_losses(idx, pre_losses)
                loss_hat = state.group_loss_ema.filled(0.0)
                if config.method == "gdro_eg":
                    state.q_group = eg_group_weights(
                        state.q_group, loss_hat, config.eta_q).values
                else:
                    state.q_group = greedy_group_weights(
                        state.group_prior_ema.values, loss_hat, config.alpha).values
                weights = state.batch_weights(gb, idx)
                record.q_history.append(state.q_group.copy())
                prior = state.group_prior_ema.filled(0.0)
                record.group_weight_history.append(
                    np.where(prior > 0, state.q_group / np.where(prior > 0, prior, 1.0),
                             np.nan))
            else:
                weights = np.ones(len(idx))

            loss, grads, _ = loss_and_grads(params, xb, yb, weights)
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            params = sgd_step(params, grads, lr)
            np.add.at(w_sum, idx, weights)
            np.add.at(w_cnt, idx, 1.0)
            batch_losses.append(loss)
            if config.track_params:
                record.param_trace.append(flatten_params(params))
            step += 1

        preds = predict(params, ds_valid.features)
        metrics = group_accuracies(preds, ds_valid_eval, eval_layout)
        robust, merged = robust_accuracy_merged(metrics, config.eval_merge_threshold)
        record.epochs.append(EpochRecord(
            epoch=epoch,
            mean_train_loss=float(np.mean(batch_losses)),
            group_acc=tuple(metrics.per_group_acc.tolist()),
            group_counts=tuple(metrics.counts.tolist()),
            robust=robust,
            average=metrics.average,
            merged_groups=merged,
        ))
        record.weight_sums.append(w_sum)
        record.weight_counts.append(w_cnt)
        record.checkpoints.append(clone_params(params))

        if config.method == "gcdro" and inner_update_check(record, config):
            state.recompute_conditional(g_train, config.beta)
            state.clear_group_loss_history()
            record.cond_snapshots.append((epoch, state.cond_ratio.copy()))
            record.epochs[-1].inner_update_triggered = True

    return record


# ---------------------------------------------------------------------------
# Persistence: {config_hash}/{seed}/ holding the resolved config, one epoch
# summary per JSONL line, per-epoch checkpoint JSONs, and the step-level
# arrays needed by the report pipeline.

def run_dir(out_root, record: RunRecord) -> Path:
    return Path(out_root) / record.config_hash / str(record.seed)


def save_run(record: RunRecord, out_root) -> Path:
    d = run_dir(out_root, record)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(
        {"config": asdict(record.config), "method": record.method,
         "seed": record.seed, "config_hash": record.config_hash,
         "n_train": record.n_train}, indent=2, sort_keys=True) + "\n")
    with (d / "record.jsonl").open("w") as fh:
        for e in record.epochs:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
    for i, params in enumerate(record.checkpoints, start=1):
        (d / f"epoch{i}.json").write_text(json.dumps(
            {"arch": record.config.model, "epoch": i,
             "params": {k: v.tolist() for k, v in params.items()}},
            sort_keys=True) + "\n")
    analysis = {
        "q_history": [q.tolist() for q in record.q_history],
        "group_weight_history": [w.tolist() for w in record.group_weight_history],
        "weight_sums": [w.tolist() for w in record.weight_sums],
        "weight_counts": [w.tolist() for w in record.weight_counts],
        "cond_snapshots": [{"epoch": ep, "cond_ratio": c.tolist()}
                           for ep, c in record.cond_snapshots],
    }
    (d / "analysis.json").write_text(json.dumps(analysis) + "\n")
    (d / "summary.json").write_text(json.dumps({
        "best_epoch": record.best_epoch,
        "valid_robust_best": record.epochs[record.best_epoch - 1].robust,
        "valid_average_best": record.epochs[record.best_epoch - 1].average,
    }, indent=2, sort_keys=True) + "\n")
    return d


def load_run(path) -> RunRecord:
    d = Path(path)
    cfg_file = d / "config.json"
    if not cfg_file.exists():
        raise IoError(f"no run found at {d} (missing config.json)")
    meta = json.loads(cfg_file.read_text())
    config = TrainConfig(**meta["config"])
    record = RunRecord(method=meta["method"], seed=meta["seed"], config=config,
                       config_hash=meta["config_hash"], n_train=meta["n_train"])
    with (d / "record.jsonl").open() as fh:
        for line in fh:
            e = json.loads(line)
            record.epochs.append(EpochRecord(
                epoch=e["epoch"], mean_train_loss=e["mean_train_loss"],
                group_acc=tuple(e["group_acc"]), group_counts=tuple(e["group_counts"]),
                robust=e["robust"], average=e["average"],
                merged_groups=tuple(e["merged_groups"]),
                inner_update_triggered=e["inner_update_triggered"]))
    analysis_file = d / "analysis.json"
    if analysis_file.exists():
        analysis = json.loads(analysis_file.read_text())
        record.q_history = [np.array(q) for q in analysis["q_history"]]
        record.group_weight_history = [np.array(w) for w in analysis["group_weight_history"]]
        record.weight_sums = [np.array(w) for w in analysis["weight_sums"]]
        record.weight_counts = [np.array(w) for w in analysis["weight_counts"]]
        record.cond_snapshots = [(c["epoch"], np.array(c["cond_ratio"]))
                                 for c in analysis["cond_snapshots"]]
    for i in range(1, len(record.epochs) + 1):
        ck = d / f"epoch{i}.json"
        if ck.exists():
            payload = json.loads(ck.read_text())
            record.checkpoints.append(
                {k: np.array(v) for k, v in payload["params"].items()})
    return record
