"""Frozen per-view embeddings and the late-fusion head trained on their concatenation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, parameter
from .cache import CacheError, Record, load_table, write_records
from .checkpoint import load_checkpoint
from .encoder import EncoderConfig, EncoderModel, classify, init_head
from .features import VIEWS, view_feature_shape
from .trainer import FitResult, TrainConfig, fit, predict

EMBED_DIM = 64
HEAD_EPOCHS = 100


class FusionError(ValueError):
    pass


def canonical_views(views: Sequence[str]) -> tuple[str, ...]:
    """Validate a view subset and put it in pitch < timbre < waveform < neuralogram order."""
    views = list(views)
    if not views:
        raise FusionError("a fusion spec needs at least one view")
    for v in views:
        if v not in VIEWS:
            raise FusionError(f"unknown view {v!r}; expected one of {', '.join(VIEWS)}")
    if len(set(views)) != len(views):
        raise FusionError(f"duplicate view in {views}")
    return tuple(sorted(views, key=VIEWS.index))


@dataclass(frozen=True)
class FusionSpec:
    views: tuple[str, ...]
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        object.__setattr__(self, "views", canonical_views(self.views))

    @property
    def input_dim(self) -> int:
        return self.embed_dim * len(self.views)

    @property
    def name(self) -> str:
        return "+".join(self.views)

    @classmethod
    def parse(cls, text: str) -> "FusionSpec":
        return cls(tuple(v.strip() for v in text.split(",") if v.strip()))


def concat_embeddings(spec: FusionSpec, vectors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Concatenate per-view vectors (or row batches) along the last axis in canonical order."""
    missing = [v for v in spec.views if v not in vectors]
    if missing:
        raise FusionError(f"missing embedding for view(s) {', '.join(missing)}")
    parts = []
    for v in spec.views:
        a = np.asarray(vectors[v])
        if a.shape[-1] != spec.embed_dim:
            raise FusionError(f"{v} embedding has width {a.shape[-1]}, expected {spec.embed_dim}")
        parts.append(a)
    return np.concatenate(parts, axis=-1)


def split_embeddings(spec: FusionSpec, fused: np.ndarray) -> dict[str, np.ndarray]:
    fused = np.asarray(fused)
    if fused.shape[-1] != spec.input_dim:
        raise FusionError(f"fused width {fused.shape[-1]} does not match {spec.input_dim}")
    d = spec.embed_dim
    return {v: fused[..., k * d:(k + 1) * d] for k, v in enumerate(spec.views)}


class HeadModel:
    """(64 * |views|) -> hidden -> GELU -> classes, trained on frozen embeddings."""

    def __init__(self, spec: FusionSpec, n_classes: int, hidden: int = 2048, seed: int = 0,
                 params: dict[str, Tensor] | None = None, dtype=np.float32):
        self.spec = spec
        self.n_classes = n_classes
        self.hidden = hidden
        if params is None:
            rng = np.random.default_rng(seed)
            init = init_head(spec.input_dim, hidden, n_classes, rng, dtype)
            params = {k: parameter(a, dtype=dtype, name=k) for k, a in init.items()}
        self.params = params

    def forward(self, x, train: bool = False, rng=None) -> Tensor:
        x = np.asarray(x, dtype=self.params["head.w1"].dtype)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise FusionError(f"head expects (batch, {self.spec.input_dim}), got {x.shape}")
        return classify(self.params, x)

    def describe(self) -> dict:
        return {"type": "head", "views": list(self.spec.views), "input_dim": self.spec.input_dim,
                "hidden": self.hidden, "n_classes": self.n_classes}


def _params_from(tensors: dict[str, np.ndarray], prefix: str = "param/") -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: parameter(a.copy(), name=k[n:]) for k, a in tensors.items() if k.startswith(prefix)}


def load_encoder(path) -> EncoderModel:
    config, tensors = load_checkpoint(path)
    desc = dict(config.get("model", {}))
    if desc.pop("type", None) != "encoder":
        raise FusionError(f"{path} is not an encoder checkpoint")
    return EncoderModel(EncoderConfig(**desc), params=_params_from(tensors))


def load_head(path) -> HeadModel:
    config, tensors = load_checkpoint(path)
    desc = config.get("model", {})
    if desc.get("type") != "head":
        raise FusionError(f"{path} is not a fusion head checkpoint")
    spec = FusionSpec(tuple(desc["views"]))
    return HeadModel(spec, desc["n_classes"], desc["hidden"], params=_params_from(tensors))


def extract_embeddings(view: str, checkpoint, features, out_path, keys=None, batch_size: int = 64) -> int:
    """Embed every cached chunk of ``view`` (or just ``keys``) with a frozen encoder.

    The checkpoint is loaded and validated before anything is written, so a
    corrupt or mismatched checkpoint leaves no partial cache behind.
    """
    model = load_encoder(checkpoint)
    if model.cfg.view != view:
        raise FusionError(f"{checkpoint} was trained on view {model.cfg.view!r}, not {view!r}")
    table = features if isinstance(features, Mapping) else load_table(features, view)
    keys = sorted(table) if keys is None else list(keys)
    missing = [k for k in keys if k not in table]
    if missing:
        raise FusionError(f"no {view} features for chunks {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    x = np.stack([table[k] for k in keys]) if keys else np.zeros((0,) + view_feature_shape(view))
    emb = []
    for s in range(0, len(keys), batch_size):
        emb.append(_embed_batch(model, x[s:s + batch_size]))
    vecs = np.concatenate(emb) if emb else np.zeros((0, EMBED_DIM), np.float32)
    if not np.all(np.isfinite(vecs)):
        raise FusionError(f"non-finite {view} embeddings from {checkpoint}")
    return write_records(out_path, (Record(c, i, view, v) for (c, i), v in zip(keys, vecs)))


def _embed_batch(model: EncoderModel, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.embed(x, train=False).data


def gather_fused(spec: FusionSpec, tables: Mapping[str, Mapping], keys) -> np.ndarray:
    """Fused rows for ``keys``; every (clip, chunk, view) triple must be present."""
    missing = [(c, i, v) for (c, i) in keys for v in spec.views if (c, i) not in tables.get(v, {})]
    if missing:
        shown = ", ".join(f"({c}, {i}, {v})" for c, i, v in missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise FusionError(f"incomplete embedding cache, missing {shown}{more}")
    if not keys:
        return np.zeros((0, spec.input_dim), np.float32)
    per_view = {v: np.stack([np.asarray(tables[v][k]).reshape(-1) for k in keys]) for v in spec.views}
    return concat_embeddings(spec, per_view).astype(np.float32)


def load_embedding_tables(spec: FusionSpec, paths: Mapping[str, Path]) -> dict[str, dict]:
    tables = {}
    for v in spec.views:
        if v not in paths:
            raise FusionError(f"no embedding cache given for view {v!r}")
        try:
            tables[v] = load_table(paths[v], v)
        except CacheError as exc:
            raise FusionError(str(exc)) from None
    return tables


def train_fusion_head(
    spec: FusionSpec,
    tables: Mapping[str, Mapping],
    train: tuple[list, np.ndarray],
    cfg: TrainConfig,
    out_dir,
    val: tuple[list, np.ndarray] | None = None,
    hidden: int = 2048,
    name: str | None = None,
) -> FitResult:
    """Fit a fresh head on fused train-split embeddings.

    ``train`` and ``val`` are ``(keys, targets)`` pairs with keys
    ``(clip_id, chunk_index)``. Encoders are not touched; only the
    embedding caches are read.
    """
    keys, y = train
    x = gather_fused(spec, tables, keys)
    xv = yv = None
    if val is not None and len(val[0]):
        xv, yv = gather_fused(spec, tables, val[0]), val[1]
    model = HeadModel(spec, y.shape[1], hidden, seed=cfg.seed)
    return fit(model, x, y, cfg, out_dir, name or f"head_{spec.name}", kind="head",
               x_val=xv, y_val=yv, sample_ids=[f"{c}#{i}" for c, i in keys])


def head_scores(head: HeadModel, tables: Mapping[str, Mapping], keys) -> np.ndarray:
    return predict(head, gather_fused(head.spec, tables, keys))
