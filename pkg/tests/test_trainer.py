"""Training loop: schedule, clipping, optimizer, determinism and resume."""

import csv

import numpy as np
import pytest

from polyfeat.autodiff import ops, parameter
from polyfeat.cache import CacheError, load_table
from polyfeat.checkpoint import load_checkpoint
from polyfeat.dataset import by_split
from polyfeat.encoder import EncoderConfig, EncoderModel
from polyfeat.trainer import (
    Adam,
    TrainConfig,
    TrainingError,
    fit,
    gradient_clip,
    lr_at,
    predict,
    train_view,
)

SMALL = dict(n_layers=2, head_hidden=32, dropout=0.1)


def _toy(n=8, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 12, 40)).astype(np.float32)
    y = np.eye(n_classes, dtype=np.float32)[rng.integers(0, n_classes, n)]
    return x, y


def _model(n_classes=3, seed=0):
    return EncoderModel(EncoderConfig(view="timbre", n_classes=n_classes, **SMALL), seed=seed)


class TestSchedule:
    cfg = TrainConfig()

    def test_endpoints(self):
        assert lr_at(0, self.cfg) == 2e-4
        assert lr_at(299, self.cfg) == 1e-6

    def test_midpoint_symmetry(self):
        assert abs(lr_at(149, self.cfg) + lr_at(150, self.cfg) - (2e-4 + 1e-6)) < 1e-8

    def test_monotone(self):
        lrs = [lr_at(e, self.cfg) for e in range(300)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_formula(self):
        e = 77
        ref = 1e-6 + 0.5 * (2e-4 - 1e-6) * (1 + np.cos(np.pi * e / 299))
        assert lr_at(e, self.cfg) == pytest.approx(ref, rel=1e-15)

    @pytest.mark.parametrize("epoch", [-1, 300])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError, match="outside"):
            lr_at(epoch, self.cfg)

    def test_single_epoch(self):
        assert lr_at(0, TrainConfig(epochs=1)) == 2e-4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_start=1e-6, lr_end=2e-4)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestClip:
    def test_identity_below_max(self):
        g = [np.array([1.2, 1.6])]  # norm 2
        assert gradient_clip(g, 5.0) is g

    def test_scales_to_max(self):
        np.testing.assert_allclose(gradient_clip([np.array([3.0, 4.0])], 1.0)[0], [0.6, 0.8], rtol=1e-15)

    def test_global_norm_across_tensors(self):
        out = gradient_clip([np.array([3.0]), np.array([[4.0]])], 1.0)
        np.testing.assert_allclose(out[0], [0.6])
        np.testing.assert_allclose(out[1], [[0.8]])

    def test_zero(self):
        z = [np.zeros(3)]
        np.testing.assert_array_equal(gradient_clip(z)[0], 0.0)

    def test_non_finite(self):
        with pytest.raises(TrainingError, match="non-finite"):
            gradient_clip([np.array([np.inf])])


class TestAdam:
    def test_zero_lr_is_identity(self):
        p = {"w": parameter(np.random.default_rng(0).standard_normal((4, 4)))}
        before = p["w"].data.copy()
        Adam(p, TrainConfig()).step({"w": np.ones((4, 4), np.float32)}, 0.0)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_size(self):
        # bias-corrected first step moves each weight by lr * sign(g)
        p = {"w": parameter(np.zeros(3), dtype=np.float64)}
        Adam(p, TrainConfig()).step({"w": np.array([2.0, -0.5, 1e-3])}, 0.1)
        np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


class TestFit:
    def test_overfit_single_clip(self, tmp_path, tiny_features, tiny_corpus):
        """One clip, one class, 50 epochs: loss falls at least tenfold."""
        table = load_table(tiny_features["pitch"], "pitch")
        rec = [r for r in tiny_corpus.records if len(r.labels) == 1][0]
        res = train_view("pitch", table, [rec], [], 4, TrainConfig(epochs=50, lr_start=1e-3, lr_end=1e-5),
                         tmp_path, encoder_overrides=SMALL)
        losses = [h["train_loss"] for h in res.history]
        assert len(losses) == 50
        assert losses[-1] * 10 <= losses[0]

    def test_fixed_batch_eval_loss_decreases(self, tmp_path):
        x, y = _toy(4)
        model = _model()

        def eval_loss():
            return float(ops.huber(model.forward(x), y).data)

        start = eval_loss()
        traj = []
        fit(model, x, y, TrainConfig(epochs=20, batch_size=4, lr_start=1e-3, lr_end=1e-4),
            tmp_path, "m", until=lambda row: traj.append(eval_loss()) or False)
        assert traj[-1] < start
        assert len(traj) == 20

    def test_deterministic_bytes(self, tmp_path):
        x, y = _toy()
        cfg = TrainConfig(epochs=3, batch_size=3, seed=5)
        fit(_model(), x, y, cfg, tmp_path / "a", "m", x_val=x, y_val=y)
        fit(_model(), x, y, cfg, tmp_path / "b", "m", x_val=x, y_val=y)
        for f in ("m.pfck", "m.best.pfck", "m.log.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        x, y = _toy()
        cfg = TrainConfig(epochs=100, batch_size=4, seed=2, checkpoint_every=0)  # 2 steps per epoch
        full = _model()
        fit(full, x, y, cfg, tmp_path / "full", "m")
        half = _model()
        r1 = fit(half, x, y, cfg, tmp_path / "split", "m", max_steps=100)
        assert r1.state.step == 100
        resumed = _model(seed=99)  # weights come from the checkpoint
        r2 = fit(resumed, x, y, cfg, tmp_path / "split", "m", resume=r1.final_path)
        assert r2.state.step == 200
        for k in full.params:
            np.testing.assert_array_equal(resumed.params[k].data, full.params[k].data)
        assert ((tmp_path / "full" / "m.log.csv").read_bytes()
                == (tmp_path / "split" / "m.log.csv").read_bytes())

    def test_checkpoint_round_trip_forward(self, tmp_path):
        x, y = _toy()
        model = _model()
        res = fit(model, x, y, TrainConfig(epochs=2, batch_size=4), tmp_path, "m")
        config, tensors = load_checkpoint(res.final_path)
        assert config["kind"] == "encoder" and config["state"]["step"] == 4
        params = {k[len("param/"):]: parameter(v, name=k) for k, v in tensors.items() if k.startswith("param/")}
        cfg = EncoderConfig(**{k: v for k, v in config["model"].items() if k != "type"})
        reloaded = EncoderModel(cfg, params=params)
        np.testing.assert_array_equal(predict(reloaded, x), predict(model, x))

    def test_log_columns(self, tmp_path):
        x, y = _toy()
        fit(_model(), x, y, TrainConfig(epochs=2, batch_size=8), tmp_path, "m", x_val=x, y_val=y)
        rows = list(csv.reader((tmp_path / "m.log.csv").open()))
        assert rows[0] == ["epoch", "step", "lr", "train_loss", "val_top5"]
        assert [r[:3] for r in rows[1:]] == [["0", "1", "0.0002"], ["1", "2", "1e-06"]]

    def test_best_checkpoint_tracks_val(self, tmp_path):
        x, y = _toy()
        res = fit(_model(), x, y, TrainConfig(epochs=3, batch_size=8), tmp_path, "m", x_val=x, y_val=y)
        assert res.best_path is not None and res.best_path.exists()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_loss_reports_batch(self, tmp_path):
        x, y = _toy(4)
        model = _model()
        model.params["head.b2"].data[:] = 3e38
        with pytest.raises(TrainingError, match=r"non-finite loss at step 0 \(lr 0.0002\), batch \['[abcd]'"):
            fit(model, x, y, TrainConfig(epochs=1, batch_size=4), tmp_path, "m", sample_ids=list("abcd"))

    def test_missing_features_before_training(self, tmp_path, tiny_features, tiny_corpus):
        table = load_table(tiny_features["timbre"], "timbre")
        first = tiny_corpus.records[0]
        table.pop((first.clip_id, 0))
        splits = by_split(tiny_corpus.records)
        with pytest.raises(CacheError, match=first.clip_id):
            train_view("timbre", table, splits["train"] + [first], splits["val"], 4, TrainConfig(epochs=1),
                       tmp_path)
        assert not list(tmp_path.iterdir())
