"""Command-line front end: `generate`, `train`, `sweep`, `report`.

A JSON config file is the single source of truth; flags only pick the
subcommand and the config path. Exit codes: 0 success, 2 config error,
3 runtime error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import write_dataset_csv
from .datagen import (
    Blobs2DSpec,
    SeqTaskSpec,
    Table1Spec,
    gen_blobs2d,
    gen_seq_task,
    gen_table1,
    write_seq_file,
)
from .errors import ConfigError, GcdroError, InvalidSpec, IoError
from .eval import group_accuracies, robust_accuracy_merged, weight_heatmap, write_heatmap_csv
from .model import predict
from .partition import PartitionSpec, apply_partition
from .trainer import (
    METHODS,
    TrainConfig,
    load_run,
    save_run,
    select_model,
    train,
)

OUTPUT_ROOT_ENV = "GCDRO_OUTPUT_ROOT"

_SPEC_TYPES = {"table1": Table1Spec, "blobs2d": Blobs2DSpec, "seq": SeqTaskSpec}
_SPLIT_SEED_OFFSETS = {"train": 0, "valid": 1, "test": 2}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment: data recipe, partitions, training
    hyperparameters, and the sweep grid."""

    generator: str
    base_seed: int
    shared: dict
    split_overrides: dict
    train_partition: PartitionSpec
    eval_partition: PartitionSpec
    train_config: TrainConfig
    sweep_seeds: tuple
    sweep_methods: tuple
    output_dir: str

    def split_spec(self, split: str):
        """Spec for one split: shared fields, split overrides, offset seed."""
        spec_type = _SPEC_TYPES[self.generator]
        merged = dict(self.shared)
        merged.update(self.split_overrides.get(split, {}))
        merged.setdefault("seed", self.base_seed + _SPLIT_SEED_OFFSETS[split])
        return spec_type(**_listed(merged))

    def to_raw(self) -> dict:
        return {
            "data": {
                "generator": self.generator,
                "base_seed": self.base_seed,
                "shared": dict(self.shared),
                "splits": {k: dict(v) for k, v in self.split_overrides.items()},
            },
            "partition": {
                "train": _partition_to_raw(self.train_partition),
                "eval": _partition_to_raw(self.eval_partition),
            },
            "train": dataclasses.asdict(self.train_config),
            "sweep": {"seeds": list(self.sweep_seeds), "methods": list(self.sweep_methods)},
            "output_dir": self.output_dir,
        }


def _listed(d: dict) -> dict:
    """JSON lists to tuples so frozen specs hash and compare cleanly."""
    return {k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
            if isinstance(v, list) else v for k, v in d.items()}


def _reject_unknown(section: dict, allowed, context: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {context}")


def _partition_from_raw(raw: dict, context: str) -> PartitionSpec:
    _reject_unknown(raw, {"kind", "merge_map", "k", "iters", "seed"}, context)
    merge_map = None
    if raw.get("merge_map") is not None:
        merge_map = {}
        for key, gid in raw["merge_map"].items():
            try:
                a, y = (int(part) for part in key.split(","))
            except ValueError as exc:
                raise ConfigError(
                    f"merge_map key {key!r} in {context} is not 'attribute,label'") from exc
            merge_map[(a, y)] = int(gid)
    try:
        return PartitionSpec(kind=raw.get("kind", "clean"), merge_map=merge_map,
                             k=int(raw.get("k", 8)), iters=int(raw.get("iters", 100)),
                             seed=int(raw.get("seed", 0)))
    except InvalidSpec as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _partition_to_raw(spec: PartitionSpec) -> dict:
    raw = {"kind": spec.kind, "k": spec.k, "iters": spec.iters, "seed": spec.seed}
    if spec.merge_map is not None:
        raw["merge_map"] = {f"{a},{y}": g for (a, y), g in spec.merge_map.items()}
    else:
        raw["merge_map"] = None
    return raw


def _spec_field_names(spec_type) -> set:
    return {f.name for f in dataclasses.fields(spec_type)}


def parse_config_dict(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, {"data", "partition", "train", "sweep", "output_dir"}, "config")
    if "data" not in raw:
        raise ConfigError("missing required section 'data'")
    data = raw["data"]
    _reject_unknown(data, {"generator", "base_seed", "shared", "splits"}, "data")
    generator = data.get("generator")
    if generator not in _SPEC_TYPES:
        raise ConfigError(
            f"data.generator must be one of {sorted(_SPEC_TYPES)}, got {generator!r}")
    spec_fields = _spec_field_names(_SPEC_TYPES[generator]) | {"seed"}
    shared = dict(data.get("shared", {}))
    _reject_unknown(shared, spec_fields, "data.shared")
    split_overrides = {k: dict(v) for k, v in data.get("splits", {}).items()}
    _reject_unknown(split_overrides, set(_SPLIT_SEED_OFFSETS), "data.splits")
    for split, overrides in split_overrides.items():
        _reject_unknown(overrides, spec_fields, f"data.splits.{split}")
    base_seed = int(data.get("base_seed", 0))

    partition = raw.get("partition", {})
    _reject_unknown(partition, {"train", "eval"}, "partition")
    train_partition = _partition_from_raw(partition.get("train", {"kind": "generator"}),
                                          "partition.train")
    eval_partition = _partition_from_raw(partition.get("eval", {"kind": "clean"}),
                                         "partition.eval")

    train_section = dict(raw.get("train", {}))
    allowed = {f.name for f in dataclasses.fields(TrainConfig)}
    _reject_unknown(train_section, allowed, "train")
    train_config = TrainConfig(**train_section)

    sweep = raw.get("sweep", {})
    _reject_unknown(sweep, {"seeds", "methods"}, "sweep")
    seeds = tuple(int(s) for s in sweep.get("seeds", [train_config.seed]))
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"sweep.seeds must be distinct, got {list(seeds)}")
    methods = tuple(sweep.get("methods", [train_config.method]))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"sweep.methods entry {m!r} not one of {METHODS}")

    cfg = ExperimentConfig(
        generator=generator, base_seed=base_seed, shared=shared,
        split_overrides=split_overrides, train_partition=train_partition,
        eval_partition=eval_partition, train_config=train_config,
        sweep_seeds=seeds, sweep_methods=methods,
        output_dir=str(raw.get("output_dir", "runs")),
    )
    if generator != "seq":
        for split in _SPLIT_SEED_OFFSETS:
            try:
                cfg.split_spec(split)
            except (InvalidSpec, TypeError) as exc:
                raise ConfigError(f"data spec for split {split!r}: {exc}") from exc
    else:
        try:
            cfg.split_spec("train")
        except (InvalidSpec, TypeError) as exc:
            raise ConfigError(f"data spec: {exc}") from exc
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise IoError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config_dict(raw)


def _output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, cfg.output_dir))


def build_split(cfg: ExperimentConfig, split: str):
    """Materialize one split: (dataset, clean layout, generator-group layout)."""
    spec = cfg.split_spec(split)
    if cfg.generator == "table1":
        return gen_table1(spec, split_tag=split)
    return gen_blobs2d(spec, split_tag=split)


def cmd_generate(cfg: ExperimentConfig) -> int:
    out = _output_root(cfg) / "data"
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"generator": cfg.generator, "splits": {}}
    if cfg.generator == "seq":
        data = gen_seq_task(cfg.split_spec("train"))
        for name, samples in (("train", data.train), ("d_in", data.d_in),
                              ("d_out", data.d_out)):
            fname = f"{name}.seq.txt"
            write_seq_file(samples, out / fname)
            manifest["splits"][name] = {"file": fname, "n": len(samples)}
        manifest["spec"] = dataclasses.asdict(data.spec)
    else:
        for split in _SPLIT_SEED_OFFSETS:
            ds, clean_layout, group_layout = build_split(cfg, split)
            fname = f"{split}.csv"
            write_dataset_csv(ds, out / fname)
            manifest["splits"][split] = {
                "file": fname,
                "n": len(ds),
                "spec": dataclasses.asdict(cfg.split_spec(split)),
                "clean_layout": clean_layout.to_json(),
                "group_layout": group_layout.to_json(),
            }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.generator} data to {out}")
    return 0


def _run_single(cfg: ExperimentConfig, tc: TrainConfig):
    """One method x seed: train, select, test-evaluate, persist."""
    ds_train, _, _ = build_split(cfg, "train")
    ds_valid, _, _ = build_split(cfg, "valid")
    ds_test, _, _ = build_split(cfg, "test")

    train_assignment, train_layout = apply_partition(ds_train, cfg.train_partition)
    ds_train = ds_train.with_groups(train_assignment)
    eval_assignment, eval_layout = apply_partition(ds_valid, cfg.eval_partition)

    record = train(ds_train, ds_valid, train_layout, tc,
                   eval_assignment=eval_assignment, eval_layout=eval_layout)

    best = select_model(record)
    test_assignment, test_layout = apply_partition(ds_test, cfg.eval_partition)
    preds = predict(best, ds_test.features)
    metrics = group_accuracies(preds, ds_test.with_groups(test_assignment), test_layout)
    robust, merged = robust_accuracy_merged(metrics, tc.eval_merge_threshold)
    test_metrics = {
        "robust": robust,
        "average": metrics.average,
        "per_group": metrics.per_group_acc.tolist(),
        "counts": metrics.counts.tolist(),
        "merged_groups": list(merged),
        "best_epoch": record.best_epoch,
    }

    d = save_run(record, _output_root(cfg))
    (d / "test_metrics.json").write_text(
        json.dumps(test_metrics, indent=2, sort_keys=True) + "\n")
    (d / "experiment.json").write_text(
        json.dumps(cfg.to_raw(), indent=2, sort_keys=True) + "\n")
    return record, test_metrics, d


def cmd_train(cfg: ExperimentConfig) -> int:
    if cfg.generator == "seq":
        raise ConfigError("the seq generator emits token files, not trainable features; "
                          "only `generate` supports it")
    record, test_metrics, d = _run_single(cfg, cfg.train_config)
    print(f"run written to {d}")
    print(f"valid robust (best epoch {record.best_epoch}): "
          f"{record.epochs[record.best_epoch - 1].robust:.4f}")
    print(f"test robust {test_metrics['robust']:.4f}, "
          f"test average {test_metrics['average']:.4f}")
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    if cfg.generator == "seq":
        raise ConfigError("the seq generator emits token files, not trainable features; "
                          "only `generate` supports it")
    results: dict[str, list] = {m: [] for m in cfg.sweep_methods}
    for method in cfg.sweep_methods:
        for seed in cfg.sweep_seeds:
            tc = dataclasses.replace(cfg.train_config, method=method, seed=seed)
            record, test_metrics, d = _run_single(cfg, tc)
            results[method].append({
                "seed": seed,
                "valid_robust": record.epochs[record.best_epoch - 1].robust,
                "test_robust": test_metrics["robust"],
                "test_average": test_metrics["average"],
                "dir": str(d),
            })
            print(f"{method} seed {seed}: test robust {test_metrics['robust']:.4f}, "
                  f"average {test_metrics['average']:.4f}")

    def mean_std(values):
        arr = np.asarray(values, dtype=float)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    summary = {}
    for method, rows in results.items():
        summary[method] = {"n_seeds": len(rows), "runs": rows}
        for metric in ("valid_robust", "test_robust", "test_average"):
            mean, std = mean_std([r[metric] for r in rows])
            summary[method][f"{metric}_mean"] = mean
            summary[method][f"{metric}_std"] = std

    root = _output_root(cfg)
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with (root / "sweep_summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n_seeds", "test_robust_mean", "test_robust_std",
                         "test_average_mean", "test_average_std",
                         "valid_robust_mean", "valid_robust_std"])
        for method in cfg.sweep_methods:
            s = summary[method]
            writer.writerow([method, s["n_seeds"],
                             s["test_robust_mean"], s["test_robust_std"],
                             s["test_average_mean"], s["test_average_std"],
                             s["valid_robust_mean"], s["valid_robust_std"]])
    print(f"sweep summary written to {root / 'sweep_summary.json'}")
    return 0


def cmd_report(directory) -> int:
    root = Path(directory)
    run_dirs = sorted(p.parent for p in root.glob("*/*/config.json"))
    if not run_dirs:
        raise GcdroError(f"no runs found under {root}")
    report_dir = root / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in run_dirs:
        record = load_run(d)
        row = {
            "method": record.method,
            "seed": record.seed,
            "config_hash": record.config_hash,
            "best_epoch": record.best_epoch,
            "valid_robust": record.epochs[record.best_epoch - 1].robust,
            "valid_average": record.epochs[record.best_epoch - 1].average,
        }
        test_file = d / "test_metrics.json"
        if test_file.exists():
            tm = json.loads(test_file.read_text())
            row["test_robust"] = tm["robust"]
            row["test_average"] = tm["average"]
        rows.append(row)

        exp_file = d / "experiment.json"
        if exp_file.exists() and record.weight_sums:
            cfg = parse_config_dict(json.loads(exp_file.read_text()))
            if cfg.generator != "seq":
                ds_train, _, _ = build_split(cfg, "train")
                hm = weight_heatmap(record, ds_train.attributes, ds_train.labels)
                write_heatmap_csv(
                    hm, report_dir / f"heatmap_{record.method}_seed{record.seed}.csv")

    fieldnames = ["method", "seed", "config_hash", "best_epoch", "valid_robust",
                  "valid_average", "test_robust", "test_average"]
    with (report_dir / "metrics_table.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"report written to {report_dir}")
    return 0


def run_command(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gcdro",
        description="Robust group-reweighted training on synthetic group-structured data")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("generate", "write the configured datasets and a manifest"),
            ("train", "run one method x seed and persist the run record"),
            ("sweep", "run the full method x seed grid and summarize")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a JSON experiment config")
    p = sub.add_parser("report", help="assemble metrics tables and heatmap CSVs")
    p.add_argument("directory", help="output root containing run directories")

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.directory)
        cfg = parse_config(args.config)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IoError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    except GcdroError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command())
