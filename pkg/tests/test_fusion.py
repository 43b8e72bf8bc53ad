"""Embedding extraction, concatenation layout and fusion-head training."""

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyfeat.cache import Record, load_table, split_keys, write_records
from polyfeat.dataset import SynthRecipe, by_split, chunk_clip, decode_and_resample, generate_synthetic_corpus
from polyfeat.features import compute_view
from polyfeat.fusion import (
    FusionError,
    FusionSpec,
    HeadModel,
    concat_embeddings,
    extract_embeddings,
    gather_fused,
    head_scores,
    load_head,
    split_embeddings,
    train_fusion_head,
)
from polyfeat.metrics import top_k_accuracy
from polyfeat.trainer import TrainConfig, train_view


def _features(records, n_classes, path, view="pitch"):
    write_records(path, (
        Record(r.clip_id, ch.chunk_index, view, compute_view(view, ch.samples))
        for r in records for ch in chunk_clip(decode_and_resample(r), r, n_classes)))
    return path


def _rows(records, table, n_classes):
    keys = split_keys(table, records)
    labels = {r.clip_id: r.multi_hot(n_classes) for r in records}
    return keys, np.stack([labels[c] for c, _ in keys])


@pytest.fixture(scope="module")
def pitch_setup(tmp_path_factory):
    """A trained pitch encoder and embedding caches for a training corpus and a held-out pool."""
    root = tmp_path_factory.mktemp("fusion")
    recipe = SynthRecipe(clip_seconds=1.0)
    corpus = generate_synthetic_corpus(root / "data", seed=11, n_classes=8, clips_per_class=16, recipe=recipe)
    pool = generate_synthetic_corpus(root / "pool", seed=12, n_classes=8, clips_per_class=30, recipe=recipe)
    feats = _features(corpus.records, 8, root / "pitch.pfv1")
    pool_feats = _features(pool.records, 8, root / "pool_pitch.pfv1")
    splits = by_split(corpus.records)
    res = train_view("pitch", feats, splits["train"], [], 8,
                     TrainConfig(epochs=15, lr_start=1e-3, lr_end=1e-5, seed=0), root / "ckpt")
    emb = root / "emb_pitch.pfv1"
    pool_emb = root / "pool_emb_pitch.pfv1"
    extract_embeddings("pitch", res.final_path, feats, emb)
    extract_embeddings("pitch", res.final_path, pool_feats, pool_emb)
    return {"root": root, "corpus": corpus, "pool": pool, "splits": splits, "ckpt": res.final_path,
            "feats": feats, "emb": emb, "pool_emb": pool_emb}


class TestSpec:
    def test_canonical_order_and_dim(self):
        spec = FusionSpec(("neuralogram", "pitch", "waveform", "timbre"))
        assert spec.views == ("pitch", "timbre", "waveform", "neuralogram")
        assert spec.input_dim == 256 and spec.name == "pitch+timbre+waveform+neuralogram"
        assert FusionSpec.parse("timbre, pitch").views == ("pitch", "timbre")

    @pytest.mark.parametrize("views", [(), ("pitch", "pitch"), ("colour",)])
    def test_rejects(self, views):
        with pytest.raises(FusionError):
            FusionSpec(views)

    def test_single_view_identity(self):
        a = np.arange(64.0)
        np.testing.assert_array_equal(concat_embeddings(FusionSpec(("pitch",)), {"pitch": a}), a)

    def test_pair_layout(self):
        a, b = np.zeros(64), np.ones(64)
        fused = concat_embeddings(FusionSpec(("timbre", "pitch")), {"timbre": b, "pitch": a})
        assert fused.shape == (128,)
        np.testing.assert_array_equal(fused[:64], a)
        np.testing.assert_array_equal(fused[64:], b)

    def test_missing_view(self):
        with pytest.raises(FusionError, match="timbre"):
            concat_embeddings(FusionSpec(("pitch", "timbre")), {"pitch": np.zeros(64)})

    @settings(max_examples=30, deadline=None)
    @given(mask=st.integers(1, 15), seed=st.integers(0, 1000))
    def test_split_concat_round_trip(self, mask, seed):
        views = [v for k, v in enumerate(("pitch", "timbre", "waveform", "neuralogram")) if mask >> k & 1]
        spec = FusionSpec(tuple(views))
        fused = np.random.default_rng(seed).standard_normal((3, spec.input_dim))
        parts = split_embeddings(spec, fused)
        for k, v in enumerate(spec.views):
            np.testing.assert_array_equal(parts[v], fused[:, 64 * k:64 * (k + 1)])
        np.testing.assert_array_equal(concat_embeddings(spec, parts), fused)

    def test_gather_lists_missing_triples(self):
        spec = FusionSpec(("pitch", "timbre"))
        tables = {"pitch": {("a", 0): np.zeros((1, 64)), ("a", 1): np.zeros((1, 64))},
                  "timbre": {("a", 0): np.zeros((1, 64))}}
        with pytest.raises(FusionError, match=r"missing \(a, 1, timbre\)"):
            gather_fused(spec, tables, [("a", 0), ("a", 1)])

    def test_head_shape_check(self):
        head = HeadModel(FusionSpec(("pitch", "timbre")), n_classes=8, hidden=16)
        assert head.forward(np.zeros((2, 128))).shape == (2, 8)
        with pytest.raises(FusionError, match="128"):
            head.forward(np.zeros((2, 64)))


class TestExtraction:
    def test_complete_and_deterministic(self, pitch_setup, tmp_path):
        again = tmp_path / "again.pfv1"
        n = extract_embeddings("pitch", pitch_setup["ckpt"], pitch_setup["feats"], again)
        assert n == len(load_table(pitch_setup["feats"]))
        assert again.read_bytes() == pitch_setup["emb"].read_bytes()
        table = load_table(again, "pitch")
        assert all(v.shape == (1, 64) and np.all(np.isfinite(v)) for v in table.values())

    def test_view_mismatch(self, pitch_setup, tmp_path):
        with pytest.raises(FusionError, match="trained on view 'pitch'"):
            extract_embeddings("timbre", pitch_setup["ckpt"], pitch_setup["feats"], tmp_path / "x.pfv1")
        assert not (tmp_path / "x.pfv1").exists()

    def test_corrupt_checkpoint_writes_nothing(self, pitch_setup, tmp_path):
        bad = tmp_path / "bad.pfck"
        buf = bytearray(pitch_setup["ckpt"].read_bytes())
        buf[len(buf) // 2] ^= 0xFF
        bad.write_bytes(bytes(buf))
        with pytest.raises(ValueError, match="CRC"):
            extract_embeddings("pitch", bad, pitch_setup["feats"], tmp_path / "e.pfv1")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.pfck"]


class TestHeadTraining:
    def test_pitch_head_beats_chance_and_leaves_encoder_alone(self, pitch_setup, tmp_path):
        digest = hashlib.sha256(pitch_setup["ckpt"].read_bytes()).hexdigest()
        spec = FusionSpec(("pitch",))
        tables = {"pitch": load_table(pitch_setup["emb"], "pitch")}
        train = _rows(pitch_setup["splits"]["train"], tables["pitch"], 8)
        val_records = pitch_setup["splits"]["val"] + pitch_setup["splits"]["test"]
        keys, y = _rows(val_records, tables["pitch"], 8)
        res = train_fusion_head(spec, tables, train, TrainConfig(epochs=50, seed=1), tmp_path)
        head = load_head(res.final_path)
        acc = top_k_accuracy(head_scores(head, tables, keys), y, 1)
        assert acc > 1 / 8, acc
        assert hashlib.sha256(pitch_setup["ckpt"].read_bytes()).hexdigest() == digest

    def test_shuffled_labels_stay_at_chance(self, pitch_setup, tmp_path):
        spec = FusionSpec(("pitch",))
        tables = {"pitch": load_table(pitch_setup["emb"], "pitch")}
        keys, y = _rows(pitch_setup["splits"]["train"], tables["pitch"], 8)
        y_shuffled = y[np.random.default_rng(0).permutation(len(y))]
        res = train_fusion_head(spec, tables, (keys, y_shuffled), TrainConfig(epochs=50, seed=1), tmp_path)
        pool = {"pitch": load_table(pitch_setup["pool_emb"], "pitch")}
        pkeys, py = _rows(pitch_setup["pool"].records, pool["pitch"], 8)
        acc = top_k_accuracy(head_scores(load_head(res.final_path), pool, pkeys), py, 1)
        chance = py.sum(axis=1).mean() / 8  # any-hit top-1 of a label-blind guess
        assert abs(acc - chance) <= 0.05, (acc, chance)

    def test_fused_input_dim(self, tmp_path):
        spec = FusionSpec(("pitch", "timbre", "waveform", "neuralogram"))
        rng = np.random.default_rng(0)
        keys = [("c", i) for i in range(6)]
        tables = {v: {k: rng.standard_normal((1, 64)).astype(np.float32) for k in keys} for v in spec.views}
        y = np.eye(8, dtype=np.float32)[rng.integers(0, 8, 6)]
        res = train_fusion_head(spec, tables, (keys, y), TrainConfig(epochs=2, batch_size=4), tmp_path, hidden=32)
        head = load_head(res.final_path)
        assert head.params["head.w1"].shape == (256, 32)
        assert head.describe()["views"] == list(spec.views)
