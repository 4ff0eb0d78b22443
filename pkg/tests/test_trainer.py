"""Training loop behavior shared by all methods, plus method-specific
weighting invariants, checkpoint selection, and run persistence."""

import dataclasses
import math

import numpy as np
import pytest

from gcdro.core import Dataset
from gcdro.datagen import Table1Spec, gen_table1
from gcdro.errors import (
    ConfigError,
    DivergedError,
    InvalidArguments,
    IoError,
    NoCheckpoints,
)
from gcdro.model import flatten_params
from gcdro.trainer import (
    EpochRecord,
    RunRecord,
    TrainConfig,
    inner_update_check,
    load_run,
    run_dir,
    save_run,
    select_model,
    train,
)


def small_data(n=100, seed=0):
    train_ds, clean, imperfect = gen_table1(Table1Spec(n_per_group=n, seed=seed))
    valid_ds, _, _ = gen_table1(Table1Spec(n_per_group=n, seed=seed + 50),
                                split_tag="valid")
    return train_ds, valid_ds, clean, imperfect


def quick_config(**kwargs):
    base = dict(method="erm", epochs=3, batch_size=32, eta=0.3,
                eval_merge_threshold=1, seed=0)
    base.update(kwargs)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize("field,value", [
        ("method", "adaboost"),
        ("alpha", 0.0),
        ("alpha", 1.5),
        ("beta", 0.0),
        ("gamma_group_loss", 0.0),
        ("gamma_cond_loss", 1.5),
        ("gamma_prior", -0.1),
        ("eta", 0.0),
        ("eta_q", -1.0),
        ("epochs", 0),
        ("batch_size", 0),
        ("inner_update", "sometimes"),
        ("eval_merge_threshold", 0),
        ("model", "cnn"),
        ("hidden_dim", 0),
        ("lr_decay", "cosine"),
    ])
    def test_invalid_field_names_itself(self, field, value):
        with pytest.raises(ConfigError) as err:
            TrainConfig(**{field: value})
        assert field in str(err.value)

    def test_hash_is_short_hex(self):
        h = TrainConfig().config_hash()
        assert len(h) == 12
        int(h, 16)

    def test_hash_ignores_seed_and_instrumentation(self):
        a = TrainConfig(seed=0).config_hash()
        b = TrainConfig(seed=99).config_hash()
        c = TrainConfig(seed=0, track_params=True).config_hash()
        assert a == b == c

    def test_hash_sees_hyperparameters(self):
        assert TrainConfig(alpha=0.2).config_hash() != TrainConfig(alpha=0.3).config_hash()
        assert TrainConfig(method="erm").config_hash() != \
            TrainConfig(method="gcdro").config_hash()


class TestTrainBasics:
    def test_bitwise_deterministic(self):
        ds_tr, ds_va, _, imperfect = small_data()
        cfg = quick_config(method="gdro_greedy", gamma_group_loss=0.5)
        a = train(ds_tr, ds_va, imperfect, cfg)
        b = train(ds_tr, ds_va, imperfect, cfg)
        assert np.array_equal(flatten_params(a.checkpoints[-1]),
                              flatten_params(b.checkpoints[-1]))
        assert a.robust_by_epoch.tolist() == b.robust_by_epoch.tolist()

    def test_record_lengths(self):
        ds_tr, ds_va, _, imperfect = small_data()
        cfg = quick_config(epochs=4)
        rec = train(ds_tr, ds_va, imperfect, cfg)
        assert [e.epoch for e in rec.epochs] == [1, 2, 3, 4]
        assert len(rec.checkpoints) == 4
        assert len(rec.weight_sums) == len(rec.weight_counts) == 4
        assert rec.n_train == len(ds_tr)
        assert rec.config_hash == cfg.config_hash()

    def test_sequential_methods_visit_every_example_once_per_epoch(self):
        ds_tr, ds_va, _, imperfect = small_data()
        rec = train(ds_tr, ds_va, imperfect, quick_config())
        for cnt in rec.weight_counts:
            assert np.array_equal(cnt, np.ones(len(ds_tr)))

    def test_erm_weights_are_unit(self):
        ds_tr, ds_va, _, imperfect = small_data()
        rec = train(ds_tr, ds_va, imperfect, quick_config())
        for s, c in zip(rec.weight_sums, rec.weight_counts):
            assert np.array_equal(s, c)
        assert rec.q_history == [] and rec.cond_snapshots == []

    def test_training_reduces_loss(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        rec = train(ds_tr, ds_va, imperfect, quick_config(epochs=6))
        assert rec.epochs[-1].mean_train_loss < rec.epochs[0].mean_train_loss

    def test_shuffled_stable_ids_rejected(self):
        ds_tr, ds_va, _, imperfect = small_data()
        scrambled = Dataset(examples=tuple(reversed(ds_tr.examples)),
                            num_classes=ds_tr.num_classes,
                            feature_dim=ds_tr.feature_dim)
        with pytest.raises(InvalidArguments):
            train(scrambled, ds_va, scrambled.layout(), quick_config())

    def test_layout_mismatch_rejected(self):
        ds_tr, ds_va, clean, imperfect = small_data()
        with pytest.raises(InvalidArguments):
            train(ds_tr, ds_va, clean, quick_config())  # ds carries 2 groups, not 4

    def test_track_params_trace_length(self):
        ds_tr, ds_va, _, imperfect = small_data()
        cfg = quick_config(epochs=2, track_params=True)
        rec = train(ds_tr, ds_va, imperfect, cfg)
        steps = math.ceil(len(ds_tr) / cfg.batch_size)
        assert len(rec.param_trace) == 2 * steps
        rec_off = train(ds_tr, ds_va, imperfect, quick_config(epochs=2))
        assert rec_off.param_trace == []


class TestValidationPartition:
    def test_validation_uses_clean_cells_not_training_groups(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        rec = train(ds_tr, ds_va, imperfect, quick_config())
        # trained on 2 merged groups, evaluated on the 4 (attribute, label) cells
        assert imperfect.m == 2
        assert len(rec.epochs[0].group_acc) == 4
        assert sum(rec.epochs[0].group_counts) == len(ds_va)

    def test_explicit_eval_assignment_respected(self):
        ds_tr, ds_va, _, imperfect = small_data()
        halves = (np.arange(len(ds_va)) >= len(ds_va) // 2).astype(int)
        rec = train(ds_tr, ds_va, imperfect, quick_config(),
                    eval_assignment=halves)
        assert len(rec.epochs[0].group_acc) == 2
        assert list(rec.epochs[0].group_counts) == [len(ds_va) // 2,
                                                    len(ds_va) - len(ds_va) // 2]

    def test_small_eval_groups_get_merged(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        rec = train(ds_tr, ds_va, imperfect, quick_config(eval_merge_threshold=120))
        e = rec.epochs[0]
        assert e.merged_groups  # the minority cells fall below 120 examples
        for g in e.merged_groups:
            assert e.group_counts[g] < 120


class TestMethodWeighting:
    def test_greedy_group_weight_cap(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        cfg = quick_config(method="gdro_greedy", alpha=0.3, epochs=2)
        rec = train(ds_tr, ds_va, imperfect, cfg)
        assert rec.q_history and rec.group_weight_history
        for q in rec.q_history:
            assert abs(q.sum() - 1.0) < 1e-9
        for w in rec.group_weight_history:
            assert np.nanmax(w) <= 1 / cfg.alpha + 1e-9

    def test_eg_weights_positive_simplex(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        rec = train(ds_tr, ds_va, imperfect,
                    quick_config(method="gdro_eg", eta_q=0.5, epochs=2))
        for q in rec.q_history:
            assert np.all(q > 0) and abs(q.sum() - 1.0) < 1e-9

    def test_resample_draws_groups_uniformly(self):
        ds_tr, ds_va, _, _ = small_data(n=500)
        # train on the 4 unbalanced clean cells
        from gcdro.partition import clean_partition
        assignment, layout = clean_partition(ds_tr)
        ds_cells = ds_tr.with_groups(assignment)
        cfg = quick_config(method="resample", epochs=5)
        rec = train(ds_cells, ds_va, layout, cfg)
        draws = np.zeros(layout.m)
        total = np.zeros(len(ds_cells))
        for cnt in rec.weight_counts:
            total += cnt
        for g in range(layout.m):
            draws[g] = total[assignment == g].sum()
        shares = draws / draws.sum()
        # group sizes differ by ~3x but each group is drawn ~1/m of the time
        assert layout.sizes.max() > 2 * layout.sizes.min()
        assert np.all(np.abs(shares - 1 / layout.m) < 0.05)

    def test_gcdro_every_epoch_snapshots(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        cfg = quick_config(method="gcdro", alpha=0.5, beta=0.5, epochs=3)
        rec = train(ds_tr, ds_va, imperfect, cfg)
        assert [ep for ep, _ in rec.cond_snapshots] == [1, 2, 3]
        assert all(e.inner_update_triggered for e in rec.epochs)
        for _, ratio in rec.cond_snapshots:
            assert ratio.shape == (len(ds_tr),)
            assert np.all(ratio > 0)

    def test_gcdro_on_robust_drop_snapshots(self):
        ds_tr, ds_va, _, imperfect = small_data(n=200)
        cfg = quick_config(method="gcdro", alpha=0.5, beta=0.5, epochs=8,
                           inner_update="on_robust_drop")
        rec = train(ds_tr, ds_va, imperfect, cfg)
        robust = rec.robust_by_epoch
        expect = [False] + [bool(robust[i] < robust[i - 1])
                            for i in range(1, len(robust))]
        assert [e.inner_update_triggered for e in rec.epochs] == expect
        assert [ep for ep, _ in rec.cond_snapshots] == \
            [e.epoch for e in rec.epochs if e.inner_update_triggered]


class TestDivergence:
    def test_erm_diverges_at_astronomical_step_size(self):
        ds_tr, ds_va, _, imperfect = small_data()
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergedError):
                train(ds_tr, ds_va, imperfect, quick_config(eta=1e308, epochs=3))

    def test_weighted_method_diverges_at_astronomical_step_size(self):
        ds_tr, ds_va, _, imperfect = small_data()
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergedError):
                train(ds_tr, ds_va, imperfect,
                      quick_config(method="gcdro", eta=1e308, epochs=3))


class TestSelection:
    def fabricate(self, robusts):
        rec = RunRecord(method="erm", seed=0, config=TrainConfig(),
                        config_hash="x" * 12, n_train=10)
        for i, r in enumerate(robusts, start=1):
            rec.epochs.append(EpochRecord(
                epoch=i, mean_train_loss=1.0, group_acc=(r,), group_counts=(10,),
                robust=r, average=r, merged_groups=()))
            rec.checkpoints.append({"w": np.full((2, 2), float(i))})
        return rec

    def test_best_epoch_ties_resolve_earliest(self):
        rec = self.fabricate([0.5, 0.7, 0.7, 0.6])
        assert rec.best_epoch == 2
        assert select_model(rec)["w"][0, 0] == 2.0

    def test_no_checkpoints(self):
        rec = RunRecord(method="erm", seed=0, config=TrainConfig(),
                        config_hash="x" * 12, n_train=10)
        with pytest.raises(NoCheckpoints):
            select_model(rec)
        with pytest.raises(NoCheckpoints):
            rec.best_epoch

    def test_inner_update_check_modes(self):
        every = TrainConfig(method="gcdro", inner_update="every_epoch")
        drop = TrainConfig(method="gcdro", inner_update="on_robust_drop")
        rec = self.fabricate([0.5])
        assert inner_update_check(rec, every) is True
        assert inner_update_check(rec, drop) is False  # nothing to compare yet
        assert inner_update_check(self.fabricate([0.5, 0.4]), drop) is True
        assert inner_update_check(self.fabricate([0.4, 0.5]), drop) is False
        assert inner_update_check(self.fabricate([0.4, 0.4]), drop) is False
        empty = RunRecord(method="erm", seed=0, config=TrainConfig(),
                          config_hash="x" * 12, n_train=10)
        with pytest.raises(InvalidArguments):
            inner_update_check(empty, every)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds_tr, ds_va, _, imperfect = small_data()
        cfg = quick_config(method="gcdro", alpha=0.5, beta=0.5, epochs=3)
        rec = train(ds_tr, ds_va, imperfect, cfg)
        d = save_run(rec, tmp_path)
        assert d == run_dir(tmp_path, rec)
        assert d == tmp_path / rec.config_hash / "0"
        loaded = load_run(d)
        assert loaded.config == cfg
        assert loaded.epochs == rec.epochs
        assert loaded.best_epoch == rec.best_epoch
        assert len(loaded.checkpoints) == len(rec.checkpoints)
        for a, b in zip(loaded.checkpoints, rec.checkpoints):
            for k in b:
                assert np.array_equal(a[k], b[k])
        for a, b in zip(loaded.q_history, rec.q_history):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.weight_sums, rec.weight_sums):
            assert np.array_equal(a, b)
        assert [ep for ep, _ in loaded.cond_snapshots] == \
            [ep for ep, _ in rec.cond_snapshots]

    def test_missing_run_raises(self, tmp_path):
        with pytest.raises(IoError):
            load_run(tmp_path / "no-such-run")
