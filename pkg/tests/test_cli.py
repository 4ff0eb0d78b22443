"""Config parsing, the four subcommands, artifact layout, and exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from gcdro.cli import (
    cmd_generate,
    cmd_report,
    cmd_sweep,
    cmd_train,
    parse_config,
    parse_config_dict,
    run_command,
)
from gcdro.errors import ConfigError, IoError


def table1_raw(out_dir, **train_overrides):
    train = {"method": "erm", "epochs": 2, "batch_size": 16, "eta": 0.3,
             "eval_merge_threshold": 1}
    train.update(train_overrides)
    return {
        "data": {"generator": "table1", "base_seed": 7,
                 "shared": {"n_per_group": 60}},
        "partition": {"train": {"kind": "generator"}, "eval": {"kind": "clean"}},
        "train": train,
        "sweep": {"seeds": [0, 1], "methods": ["erm", "gdro_greedy"]},
        "output_dir": str(out_dir),
    }


class TestParseConfigDict:
    def test_split_seeds_offset_from_base(self):
        cfg = parse_config_dict(table1_raw("runs"))
        assert cfg.split_spec("train").seed == 7
        assert cfg.split_spec("valid").seed == 8
        assert cfg.split_spec("test").seed == 9

    def test_explicit_shared_seed_wins(self):
        raw = table1_raw("runs")
        raw["data"]["shared"]["seed"] = 123
        cfg = parse_config_dict(raw)
        assert cfg.split_spec("train").seed == 123
        assert cfg.split_spec("test").seed == 123

    def test_split_overrides_apply(self):
        raw = table1_raw("runs")
        raw["data"]["splits"] = {"test": {"n_per_group": 30}}
        cfg = parse_config_dict(raw)
        assert cfg.split_spec("train").n_per_group == 60
        assert cfg.split_spec("test").n_per_group == 30

    def test_defaults_without_optional_sections(self):
        cfg = parse_config_dict({"data": {"generator": "table1"}})
        assert cfg.train_partition.kind == "generator"
        assert cfg.eval_partition.kind == "clean"
        assert cfg.sweep_seeds == (cfg.train_config.seed,)
        assert cfg.sweep_methods == (cfg.train_config.method,)
        assert cfg.output_dir == "runs"

    @pytest.mark.parametrize("mutate,expect_key", [
        (lambda r: r.update(extra=1), "extra"),
        (lambda r: r["data"].update(bar=1), "bar"),
        (lambda r: r["data"]["shared"].update(oops=1), "oops"),
        (lambda r: r["train"].update(learning_rate=0.1), "learning_rate"),
        (lambda r: r["sweep"].update(grid=[1]), "grid"),
        (lambda r: r["partition"].update(test={"kind": "clean"}), "test"),
        (lambda r: r["data"].update(splits={"dev": {}}), "dev"),
    ])
    def test_unknown_keys_rejected_by_name(self, mutate, expect_key):
        raw = table1_raw("runs")
        mutate(raw)
        with pytest.raises(ConfigError) as err:
            parse_config_dict(raw)
        assert expect_key in str(err.value)

    def test_unknown_generator(self):
        with pytest.raises(ConfigError):
            parse_config_dict({"data": {"generator": "imagenet"}})

    def test_duplicate_sweep_seeds(self):
        raw = table1_raw("runs")
        raw["sweep"]["seeds"] = [0, 0]
        with pytest.raises(ConfigError):
            parse_config_dict(raw)

    def test_unknown_sweep_method(self):
        raw = table1_raw("runs")
        raw["sweep"]["methods"] = ["erm", "boosting"]
        with pytest.raises(ConfigError):
            parse_config_dict(raw)

    def test_merge_map_parsing(self):
        raw = table1_raw("runs")
        raw["partition"]["eval"] = {
            "kind": "merged",
            "merge_map": {"0,0": 0, "0,1": 1, "1,0": 1, "1,1": 0}}
        cfg = parse_config_dict(raw)
        assert cfg.eval_partition.merge_map == {(0, 0): 0, (0, 1): 1,
                                                (1, 0): 1, (1, 1): 0}

    def test_malformed_merge_map_key(self):
        raw = table1_raw("runs")
        raw["partition"]["eval"] = {"kind": "merged", "merge_map": {"a-b": 0}}
        with pytest.raises(ConfigError):
            parse_config_dict(raw)

    def test_partition_spec_errors_become_config_errors(self):
        raw = table1_raw("runs")
        raw["partition"]["train"] = {"kind": "merged"}  # merged needs a map
        with pytest.raises(ConfigError) as err:
            parse_config_dict(raw)
        assert "partition.train" in str(err.value)

    def test_data_spec_errors_become_config_errors(self):
        raw = table1_raw("runs")
        raw["data"]["shared"]["n_per_group"] = 0
        with pytest.raises(ConfigError):
            parse_config_dict(raw)

    def test_to_raw_round_trip(self):
        cfg = parse_config_dict(table1_raw("runs"))
        again = parse_config_dict(cfg.to_raw())
        assert again.to_raw() == cfg.to_raw()


class TestExampleConfigs:
    CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")),
                             ids=lambda p: p.stem)
    def test_shipped_config_parses(self, path):
        cfg = parse_config(path)
        assert cfg.generator in ("table1", "blobs2d", "seq")
        if cfg.generator != "seq":
            for split in ("train", "valid", "test"):
                cfg.split_spec(split)


class TestParseConfigFile:
    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            parse_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            parse_config(p)


class TestCmdGenerate:
    def test_table1_files_and_manifest(self, tmp_path):
        cfg = parse_config_dict(table1_raw(tmp_path / "runs"))
        assert cmd_generate(cfg) == 0
        data = tmp_path / "runs" / "data"
        for split in ("train", "valid", "test"):
            assert (data / f"{split}.csv").exists()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["generator"] == "table1"
        assert manifest["splits"]["train"]["n"] == 120
        assert manifest["splits"]["train"]["spec"]["seed"] == 7
        assert manifest["splits"]["test"]["spec"]["seed"] == 9
        assert manifest["splits"]["train"]["group_layout"]["sizes"] == [60, 60]

    def test_seq_files_and_manifest(self, tmp_path):
        raw = {
            "data": {"generator": "seq", "base_seed": 1,
                     "shared": {"setting": "setting2", "n_samples": 40}},
            "output_dir": str(tmp_path / "runs"),
        }
        cfg = parse_config_dict(raw)
        assert cmd_generate(cfg) == 0
        data = tmp_path / "runs" / "data"
        manifest = json.loads((data / "manifest.json").read_text())
        for name, n in (("train", 40), ("d_in", 8), ("d_out", 8)):
            assert manifest["splits"][name]["n"] == n
            assert (data / manifest["splits"][name]["file"]).exists()
        assert manifest["spec"]["setting"] == "setting2"

    def test_output_root_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GCDRO_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
        cfg = parse_config_dict(table1_raw(tmp_path / "runs"))
        assert cmd_generate(cfg) == 0
        assert (tmp_path / "elsewhere" / "data" / "train.csv").exists()
        assert not (tmp_path / "runs").exists()


class TestCmdTrain:
    def test_artifacts(self, tmp_path):
        cfg = parse_config_dict(table1_raw(tmp_path / "runs"))
        assert cmd_train(cfg) == 0
        run = tmp_path / "runs" / cfg.train_config.config_hash() / "0"
        for fname in ("config.json", "record.jsonl", "epoch1.json", "epoch2.json",
                      "analysis.json", "summary.json", "test_metrics.json",
                      "experiment.json"):
            assert (run / fname).exists(), fname
        tm = json.loads((run / "test_metrics.json").read_text())
        assert set(tm) == {"robust", "average", "per_group", "counts",
                           "merged_groups", "best_epoch"}
        assert 0.0 <= tm["robust"] <= tm["average"] <= 1.0
        exp = parse_config_dict(json.loads((run / "experiment.json").read_text()))
        assert exp.to_raw() == cfg.to_raw()

    def test_seq_generator_rejected(self, tmp_path):
        cfg = parse_config_dict({
            "data": {"generator": "seq", "shared": {"n_samples": 10}},
            "output_dir": str(tmp_path)})
        with pytest.raises(ConfigError):
            cmd_train(cfg)


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep") / "runs"
    cfg = parse_config_dict(table1_raw(root))
    assert cmd_sweep(cfg) == 0
    return root, cfg


class TestCmdSweepAndReport:
    def test_summary_files(self, swept):
        root, cfg = swept
        summary = json.loads((root / "sweep_summary.json").read_text())
        assert set(summary) == {"erm", "gdro_greedy"}
        for method in summary:
            assert summary[method]["n_seeds"] == 2
            vals = [r["test_robust"] for r in summary[method]["runs"]]
            assert summary[method]["test_robust_mean"] == pytest.approx(np.mean(vals))
            assert summary[method]["test_robust_std"] == \
                pytest.approx(np.std(vals, ddof=1))
        csv_lines = (root / "sweep_summary.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 3  # header + one row per method
        assert csv_lines[0].startswith("method,n_seeds,test_robust_mean")

    def test_run_directories_per_method_and_seed(self, swept):
        root, cfg = swept
        assert len(list(root.glob("*/*/config.json"))) == 4

    def test_report_builds_tables_and_heatmaps(self, swept):
        root, cfg = swept
        assert cmd_report(root) == 0
        report = root / "report"
        lines = (report / "metrics_table.csv").read_text().strip().splitlines()
        assert lines[0] == ("method,seed,config_hash,best_epoch,valid_robust,"
                            "valid_average,test_robust,test_average")
        assert len(lines) == 5  # header + 4 runs
        for method in ("erm", "gdro_greedy"):
            for seed in (0, 1):
                assert (report / f"heatmap_{method}_seed{seed}.csv").exists()


class TestRunCommand:
    def test_success_exit_zero(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(table1_raw(tmp_path / "runs")))
        assert run_command(["generate", str(cfg_path)]) == 0

    def test_config_error_exit_two(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"data": {"generator": "imagenet"}}))
        assert run_command(["train", str(cfg_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_io_error_exit_four(self, tmp_path, capsys):
        assert run_command(["train", str(tmp_path / "absent.json")]) == 4
        assert "io error" in capsys.readouterr().err

    def test_runtime_error_exit_three(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run_command(["report", str(empty)]) == 3
        assert "error" in capsys.readouterr().err
