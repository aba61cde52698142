"""Training loop, evaluation voting, ablation sweeps, and bench behavior."""

import numpy as np
import pytest

from marnet import autodiff as ad
from marnet import data as D
from marnet import harness as H
from marnet.checkpoint import Checkpoint
from marnet.model import (
    Model,
    classifier_config,
    lite_config,
    scaled_classifier_config,
    segmenter_config,
)


def small_cfg(**kw):
    """Cheap 3-level classifier recipe for fast training tests."""
    defaults = dict(
        model=scaled_classifier_config(3, 4),
        epochs=1,
        seed=0,
        batch_size=8,
        augmentation=False,
    )
    defaults.update(kw)
    return H.TrainConfig(**defaults)


@pytest.fixture(scope="module")
def shapes64():
    clouds = D.synth_shapes(4, 64, seed=11)
    return D.split_synth(clouds, 2)  # 8 train / 8 test


@pytest.fixture(scope="module")
def trained(shapes64):
    train_set, _ = shapes64
    return H.train(small_cfg(epochs=1), train_set)


@pytest.fixture(scope="module")
def eval_model():
    return Model(scaled_classifier_config(3, 4), seed=0)


@pytest.fixture(scope="module")
def bench_clouds():
    return D.synth_shapes(1, 256, seed=21)


# ---------------------------------------------------------------------------
# schedule and config


class TestSchedule:
    def test_stepped_decay_values(self):
        cfg = small_cfg(epochs=60)
        assert H.lr_for_epoch(cfg, 0) == 0.001
        assert H.lr_for_epoch(cfg, 19) == 0.001
        assert H.lr_for_epoch(cfg, 20) == 0.001 * 0.7
        assert H.lr_for_epoch(cfg, 39) == 0.001 * 0.7
        assert H.lr_for_epoch(cfg, 40) == 0.001 * 0.7**2

    def test_custom_schedule(self):
        cfg = small_cfg(epochs=10, lr=0.01, lr_decay=0.5, lr_decay_every=3)
        assert H.lr_for_epoch(cfg, 2) == 0.01
        assert H.lr_for_epoch(cfg, 3) == 0.005
        assert H.lr_for_epoch(cfg, 9) == pytest.approx(0.01 * 0.5**3)


class TestTrainConfig:
    def test_round_trip(self):
        cfg = small_cfg(epochs=7, n_points=48, seed=3)
        assert H.TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "kw",
        [
            dict(lr=0.0),
            dict(lr=-1e-3),
            dict(batch_size=0),
            dict(lr_decay=0.0),
            dict(lr_decay=1.5),
            dict(lr_decay_every=0),
            dict(epochs=-1),
            dict(n_points=0),
        ],
    )
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ad.ConfigError):
            small_cfg(**kw)

    def test_rejects_unknown_fields(self):
        d = small_cfg().to_dict()
        d["momentum"] = 0.9
        with pytest.raises(ad.ConfigError, match="momentum"):
            H.TrainConfig.from_dict(d)

    def test_requires_model_and_epochs(self):
        with pytest.raises(ad.ConfigError):
            H.TrainConfig.from_dict({"epochs": 1})


# ---------------------------------------------------------------------------
# training


class TestTraining:
    def test_zero_epochs_returns_initialization(self, shapes64):
        train_set, _ = shapes64
        cfg = small_cfg(epochs=0)
        result = H.train(cfg, train_set)
        assert result.log == [] and result.best is None
        init = Model(cfg.model, seed=cfg.seed)
        for name, t in init.parameters().items():
            np.testing.assert_array_equal(result.final.params[name], t.data)

    def test_training_is_reproducible(self, shapes64):
        train_set, _ = shapes64
        cfg = small_cfg(epochs=2, augmentation=True)
        a = H.train(cfg, train_set).final
        b = H.train(cfg, train_set).final
        assert set(a.params) == set(b.params)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        for name in a.state.buffers:
            np.testing.assert_array_equal(a.state.buffers[name], b.state.buffers[name])

    def test_loss_halves_on_tiny_set(self, shapes64):
        train_set, _ = shapes64
        cfg = small_cfg(epochs=15)
        result = H.train(cfg, train_set)
        first, last = result.log[0].train_loss, result.log[-1].train_loss
        assert last < 0.5 * first, (first, last)

    def test_best_checkpoint_tracking(self, shapes64):
        train_set, test_set = shapes64
        cfg = small_cfg(epochs=2)
        result = H.train(cfg, train_set, val_set=test_set)
        metrics = [s.val_metric for s in result.log]
        assert all(m is not None for m in metrics)
        assert result.best is not None
        assert metrics[result.best_epoch] == max(metrics)
        assert result.best.state.epoch == result.best_epoch + 1

    def test_epoch_log_carries_schedule(self, shapes64):
        train_set, _ = shapes64
        cfg = small_cfg(epochs=2)
        result = H.train(cfg, train_set)
        assert [s.epoch for s in result.log] == [0, 1]
        assert all(s.lr == 0.001 for s in result.log)

    def test_nan_input_aborts_with_location(self, shapes64):
        train_set, _ = shapes64
        poisoned = [c.copy() for c in train_set]
        poisoned[0].positions[0, 0] = np.nan
        cfg = small_cfg(epochs=1)
        with pytest.raises(ad.NonFiniteError, match=r"epoch 0 batch \d+"):
            H.train(cfg, poisoned)

    def test_empty_training_set(self):
        with pytest.raises(ad.ConfigError, match="empty"):
            H.train(small_cfg(), [])

    def test_label_outside_model_outputs(self, shapes64):
        train_set, _ = shapes64
        bad = [c.copy() for c in train_set]
        bad[3] = D.PointCloud(bad[3].positions, bad[3].normals, label=7)
        with pytest.raises(ad.ConfigError, match="train set"):
            H.train(small_cfg(), bad)

    def test_per_step_resampling(self, shapes64):
        train_set, _ = shapes64
        cfg = small_cfg(epochs=1, n_points=48, augmentation=True)
        result = H.train(cfg, train_set)
        assert np.isfinite(result.log[0].train_loss)

    def test_segmentation_training_and_eval(self):
        clouds = D.synth_shapes(2, 64, seed=5, variant="segmentation")
        train_set, test_set = D.split_synth(clouds, 1)
        cfg = H.TrainConfig(
            model=segmenter_config(2), epochs=1, batch_size=4, augmentation=False
        )
        result = H.train(cfg, train_set, val_set=test_set)
        assert np.isfinite(result.log[0].train_loss)
        report = H.evaluate(result.final, test_set)
        assert report.part_category_miou is not None
        assert 0.0 <= report.part_category_miou <= 1.0


# ---------------------------------------------------------------------------
# checkpoint round trips


class TestCheckpointRoundTrip:
    def test_logits_bitwise_stable(self, trained, shapes64):
        _, test_set = shapes64
        c = test_set[0]
        a = H.model_from_checkpoint(trained.final)
        b = H.model_from_checkpoint(trained.final)
        with ad.no_grad():
            la = a.forward_classify(c.positions, c.normals, "eval").data
            lb = b.forward_classify(c.positions, c.normals, "eval").data
        np.testing.assert_array_equal(la, lb)

    def test_buffers_restored(self, trained):
        model = H.model_from_checkpoint(trained.final)
        fresh = Model(model.config, seed=0)
        bufs = model.buffers()
        assert any(
            not np.array_equal(bufs[k], fresh.buffers()[k]) for k in bufs
        ), "training should have moved the normalization buffers"
        for k, v in trained.final.state.buffers.items():
            np.testing.assert_array_equal(bufs[k], v)

    def test_optimizer_moments_round_trip(self, trained):
        opt = H.optimizer_from_checkpoint(trained.final)
        assert opt.t == trained.final.state.step > 0
        assert set(opt.m) == set(trained.final.params)
        name = next(iter(opt.m))
        np.testing.assert_array_equal(
            opt.m[name], trained.final.state.first_moments[name]
        )

    def test_parameter_set_mismatch(self, trained):
        params = dict(trained.final.params)
        params.pop(next(iter(params)))
        broken = Checkpoint(
            config=trained.final.config, params=params, state=trained.final.state
        )
        with pytest.raises(ad.ConfigError, match="mismatch"):
            H.model_from_checkpoint(broken)

    def test_missing_model_section(self):
        with pytest.raises(ad.ConfigError, match="model"):
            H.model_from_checkpoint(Checkpoint(config={}, params={}, state=None))


# ---------------------------------------------------------------------------
# evaluation


class TestEvaluate:
    @pytest.fixture()
    def model(self, eval_model):
        return eval_model

    @pytest.fixture()
    def clouds(self, shapes64):
        _, test_set = shapes64
        return test_set

    def test_single_vote_is_plain_eval(self, model, clouds):
        report = H.evaluate(model, clouds)
        manual = []
        with ad.no_grad():
            for c in clouds:
                logits = model.forward_classify(c.positions, c.normals, "eval")
                manual.append(int(logits.data.argmax()))
        truth = np.array([c.label for c in clouds])
        assert report.overall_accuracy == np.mean(np.array(manual) == truth)
        assert report.extra["voting"] == 1
        assert report.extra["n_clouds"] == len(clouds)

    def test_identity_voting_matches_single_pass(self, model, clouds):
        plain = H.evaluate(model, clouds, voting=1)
        voted = H.evaluate(model, clouds, voting=3, augment_fn=lambda c, rng: c)
        assert voted.overall_accuracy == plain.overall_accuracy
        assert voted.mean_class_accuracy == plain.mean_class_accuracy

    def test_thread_sharding_is_invisible(self, model, clouds):
        serial = H.evaluate(model, clouds, voting=2, seed=9)
        threaded = H.evaluate(model, clouds, voting=2, seed=9, n_threads=3)
        assert serial.overall_accuracy == threaded.overall_accuracy
        assert serial.mean_class_accuracy == threaded.mean_class_accuracy

    def test_checkpoint_accepted(self, model, clouds):
        ckpt = H.model_to_checkpoint(model)
        assert (
            H.evaluate(ckpt, clouds).overall_accuracy
            == H.evaluate(model, clouds).overall_accuracy
        )

    def test_rejects_empty_set(self, model):
        with pytest.raises(ad.ConfigError, match="empty"):
            H.evaluate(model, [])

    def test_rejects_zero_votes(self, model, clouds):
        with pytest.raises(ad.ConfigError, match="voting"):
            H.evaluate(model, clouds, voting=0)

    def test_rejects_label_outside_outputs(self, model, clouds):
        bad = [D.PointCloud(clouds[0].positions, clouds[0].normals, label=9)]
        with pytest.raises(ad.ConfigError, match="evaluation set"):
            H.evaluate(model, bad)


# ---------------------------------------------------------------------------
# ablation sweeps


class TestAblate:
    def test_noise_zero_row_equals_plain_eval(self, shapes64):
        train_set, test_set = shapes64
        cfg = small_cfg(epochs=1)
        rows = H.ablate("noise", [0, 5], cfg, train_set, test_set)
        model = H.model_from_checkpoint(H.train(cfg, train_set).final)
        plain = H.evaluate(model, test_set, voting=1, seed=cfg.seed)
        assert rows[0]["setting"] == "0"
        assert rows[0]["overall_accuracy"] == plain.overall_accuracy
        assert rows[0]["mean_class_accuracy"] == plain.mean_class_accuracy
        assert rows[1]["n_params"] == rows[0]["n_params"]

    def test_points_sweep_reuses_one_model(self, shapes64):
        train_set, test_set = shapes64
        rows = H.ablate("points", [32, 64], small_cfg(epochs=1), train_set, test_set)
        assert [r["setting"] for r in rows] == ["32", "64"]
        assert rows[0]["n_params"] == rows[1]["n_params"]
        assert all(0.0 <= r["overall_accuracy"] <= 1.0 for r in rows)

    def test_toggle_settings_name_the_switches(self, shapes64):
        train_set, test_set = shapes64
        values = [{"augmentation": False}, {"residual": False, "voting": 2}]
        rows = H.ablate("toggles", values, small_cfg(epochs=1), train_set, test_set)
        assert rows[0]["setting"] == "da=off,r=on,vote=1"
        assert rows[1]["setting"] == "da=on,r=off,vote=2"
        # the residual path is parameter-free, so the count must not move
        assert rows[0]["n_params"] == rows[1]["n_params"]

    def test_groups_shrink_parameters(self, shapes64):
        train_set, test_set = shapes64
        rows = H.ablate("groups", [1, 2], small_cfg(epochs=1), train_set, test_set)
        assert rows[0]["n_params"] > rows[1]["n_params"]

    def test_levels_sweep_runs(self, shapes64):
        train_set, test_set = shapes64
        rows = H.ablate("levels", [3], small_cfg(epochs=1), train_set, test_set)
        assert rows[0]["setting"] == "3"
        assert rows[0]["overall_accuracy"] is not None

    def test_unknown_toggle_key(self, shapes64):
        train_set, test_set = shapes64
        with pytest.raises(H.SweepError, match="dropout"):
            H.ablate("toggles", [{"dropout": False}], small_cfg(), train_set, test_set)

    def test_unknown_sweep_name(self, shapes64):
        train_set, test_set = shapes64
        with pytest.raises(H.SweepError, match="widths"):
            H.ablate("widths", [1], small_cfg(), train_set, test_set)

    def test_csv_layout(self):
        rows = [
            {
                "sweep": "noise",
                "setting": "0",
                "n_params": 123,
                "overall_accuracy": 0.5,
                "mean_class_accuracy": 0.25,
                "part_category_miou": None,
            }
        ]
        text = H.ablation_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(H.ABLATION_COLUMNS)
        assert lines[1] == "noise,0,123,0.5,0.25,"

    def test_csv_empty_rows_keep_header(self, tmp_path):
        path = tmp_path / "ablation.csv"
        text = H.ablation_csv([], str(path))
        assert text == ",".join(H.ABLATION_COLUMNS) + "\n"
        assert path.read_text(encoding="utf-8") == text


# ---------------------------------------------------------------------------
# benchmarking


class TestBench:
    @pytest.fixture()
    def clouds(self, bench_clouds):
        return bench_clouds

    def test_report_fields(self, clouds):
        model = Model(lite_config(4), seed=0)
        rep = H.bench(model, clouds, batch_size=1, n_batches=4, warmup=1)
        assert rep.per_sample_ms > 0
        assert rep.peak_live_bytes > 0
        assert len(rep.per_batch_ms) == 4
        assert rep.to_dict()["batch_size"] == 1

    def test_batching_stays_in_sane_range(self, clouds):
        model = Model(lite_config(4), seed=0)
        r1 = H.bench(model, clouds, batch_size=1, n_batches=4, warmup=1)
        r4 = H.bench(model, clouds, batch_size=4, n_batches=3, warmup=1)
        ratio = r4.per_sample_ms / r1.per_sample_ms
        assert 0.3 < ratio < 3.0, ratio

    def test_lite_model_is_faster(self, clouds):
        lite = H.bench(Model(lite_config(4), seed=0), clouds, n_batches=3, warmup=1)
        full = H.bench(
            Model(classifier_config(4), seed=0), clouds, n_batches=3, warmup=1
        )
        assert lite.per_sample_ms < full.per_sample_ms

    def test_checkpoint_accepted(self, clouds):
        ckpt = H.model_to_checkpoint(Model(lite_config(4), seed=0))
        rep = H.bench(ckpt, clouds, n_batches=2, warmup=0)
        assert rep.per_sample_ms > 0

    def test_validation(self, clouds):
        model = Model(lite_config(4), seed=0)
        with pytest.raises(ad.ConfigError):
            H.bench(model, clouds, batch_size=0)
        with pytest.raises(ad.ConfigError):
            H.bench(model, clouds, n_batches=0)
        with pytest.raises(ad.ConfigError):
            H.bench(model, [])
