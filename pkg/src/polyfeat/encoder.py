"""View front-ends, the pooled transformer stack, and the classification head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, ops, parameter
from .features import VIEWS, view_feature_shape


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    view: str = "pitch"
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 12
    head_dim: int = 16
    mlp_dim: int = 256
    dropout: float = 0.3
    head_hidden: int = 2048
    n_classes: int = 200
    conv_filters: int = 128
    conv_length: int = 200

    def __post_init__(self):
        if self.view not in VIEWS:
            raise EncoderError(f"unknown view {self.view!r}")
        if self.n_layers % 2:
            raise EncoderError("n_layers must be even")
        for k in ("d_model", "n_heads", "head_dim", "mlp_dim", "head_hidden", "n_classes",
                  "conv_filters", "conv_length"):
            if getattr(self, k) < 1:
                raise EncoderError(f"{k} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must be in [0, 1)")

    @property
    def pool_after(self) -> tuple[int, ...]:
        # token pooling follows every second layer except the last pair, where GAP takes over
        return tuple(range(2, self.n_layers, 2))

    @property
    def n_tokens(self) -> int:
        rows, cols = view_feature_shape(self.view)
        return rows if self.view == "waveform" else cols

    def to_dict(self) -> dict:
        return asdict(self)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)).astype(dtype)


def positional_encoding(n_tokens: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_tokens)[:, None]
    i = np.arange(0, d_model, 2)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n_tokens, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d, inner = cfg.d_model, cfg.n_heads * cfg.head_dim

    rows, _ = view_feature_shape(cfg.view)
    if cfg.view == "waveform":
        k = cfg.conv_length
        p["front.conv_w"] = glorot(rng, k, cfg.conv_filters, (cfg.conv_filters, k), dtype)
        p["front.conv_b"] = np.zeros(cfg.conv_filters, dtype)
        p["front.w"] = glorot(rng, cfg.conv_filters, d, dtype=dtype)
    else:
        p["front.w"] = glorot(rng, rows, d, dtype=dtype)
    p["front.b"] = np.zeros(d, dtype)

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = np.ones(d, dtype)
        p[pre + "ln1.b"] = np.zeros(d, dtype)
        for name in ("q", "k", "v"):
            p[pre + f"attn.w{name}"] = glorot(rng, d, inner, dtype=dtype)
            # a key bias only shifts each query's scores by a constant, which softmax cancels
            if name != "k":
                p[pre + f"attn.b{name}"] = np.zeros(inner, dtype)
        p[pre + "attn.wo"] = glorot(rng, inner, d, dtype=dtype)
        p[pre + "attn.bo"] = np.zeros(d, dtype)
        p[pre + "ln2.g"] = np.ones(d, dtype)
        p[pre + "ln2.b"] = np.zeros(d, dtype)
        p[pre + "mlp.w1"] = glorot(rng, d, cfg.mlp_dim, dtype=dtype)
        p[pre + "mlp.b1"] = np.zeros(cfg.mlp_dim, dtype)
        p[pre + "mlp.w2"] = glorot(rng, cfg.mlp_dim, d, dtype=dtype)
        p[pre + "mlp.b2"] = np.zeros(d, dtype)

    p.update(init_head(cfg.d_model, cfg.head_hidden, cfg.n_classes, rng, dtype))
    return {k: parameter(v, dtype=dtype, name=k) for k, v in p.items()}


def init_head(d_in: int, hidden: int, n_classes: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    return {
        "head.w1": glorot(rng, d_in, hidden, dtype=dtype),
        "head.b1": np.zeros(hidden, dtype),
        "head.w2": glorot(rng, hidden, n_classes, dtype=dtype),
        "head.b2": np.zeros(n_classes, dtype),
    }


def stack_param_names(params) -> list[str]:
    return [k for k in params if k.startswith("layers.")]


def front_end(params, cfg: EncoderConfig, x) -> Tensor:
    """Batch of view features (B, rows, cols) -> tokens (B, T, d_model) with positions added."""
    x = np.asarray(x)
    expect = view_feature_shape(cfg.view)
    if x.ndim != 3 or x.shape[1:] != expect:
        raise EncoderError(f"{cfg.view} front-end expects (batch, {expect[0]}, {expect[1]}), got {x.shape}")
    dtype = params["front.w"].dtype
    x = x.astype(dtype, copy=False)
    b = x.shape[0]
    if cfg.view == "waveform":
        t = x.shape[1]
        peaks = ops.conv1d_max(x.reshape(b * t, -1), params["front.conv_w"], params["front.conv_b"])
        tokens = ops.reshape(peaks, (b, t, cfg.conv_filters)) @ params["front.w"] + params["front.b"]
    else:
        # features are (dim, time); tokens run along time
        tokens = np.ascontiguousarray(x.transpose(0, 2, 1)) @ params["front.w"] + params["front.b"]
    pe = positional_encoding(tokens.shape[1], cfg.d_model).astype(dtype)
    return tokens + pe


def _attention(params, pre: str, cfg: EncoderConfig, x: Tensor, train: bool, rng) -> Tensor:
    b, t, _ = x.shape
    h, hd = cfg.n_heads, cfg.head_dim

    def heads(name):
        y = x @ params[pre + f"attn.w{name}"]
        if pre + f"attn.b{name}" in params:
            y = y + params[pre + f"attn.b{name}"]
        return ops.transpose(ops.reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    weights = ops.dropout(ops.softmax(scores), cfg.dropout, rng, train)
    ctx = ops.reshape(ops.transpose(weights @ v, (0, 2, 1, 3)), (b, t, h * hd))
    return ctx @ params[pre + "attn.wo"] + params[pre + "attn.bo"]


def transformer_layer(params, i: int, cfg: EncoderConfig, x: Tensor, train: bool, rng) -> Tensor:
    pre = f"layers.{i}."
    a = ops.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    x = x + _attention(params, pre, cfg, a, train, rng)
    m = ops.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    m = ops.gelu(m @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
    m = ops.dropout(m, cfg.dropout, rng, train)
    return x + (m @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"])


def transformer_stack(params, cfg: EncoderConfig, tokens: Tensor, train: bool = False, rng=None) -> Tensor:
    """(B, T, d) tokens -> (B, d) embedding by global average pooling."""
    if tokens.shape[1] == 0:
        raise EncoderError("transformer_stack needs at least one token")
    x = tokens
    for i in range(cfg.n_layers):
        x = transformer_layer(params, i, cfg, x, train, rng)
        if i + 1 in cfg.pool_after:
            x = ops.token_maxpool(x)
    return ops.mean(x, axis=1)


def token_counts(cfg: EncoderConfig, n_tokens: int | None = None) -> list[int]:
    """Token count entering each layer, plus the count averaged by GAP."""
    t = cfg.n_tokens if n_tokens is None else n_tokens
    counts = []
    for i in range(cfg.n_layers):
        counts.append(t)
        if i + 1 in cfg.pool_after:
            t = (t + 1) // 2
    return counts + [t]


def classify(params, embedding: Tensor) -> Tensor:
    h = ops.gelu(embedding @ params["head.w1"] + params["head.b1"])
    return h @ params["head.w2"] + params["head.b2"]


def embed(params, cfg: EncoderConfig, x, train: bool = False, rng=None) -> Tensor:
    return transformer_stack(params, cfg, front_end(params, cfg, x), train, rng)


def forward(params, cfg: EncoderConfig, x, train: bool = False, rng=None) -> Tensor:
    return classify(params, embed(params, cfg, x, train, rng))


def param_count(params, names=None) -> int:
    names = params.keys() if names is None else names
    return int(sum(params[k].size for k in names))


class EncoderModel:
    """Encoder parameters bound to their config, in the shape the trainer expects."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.params = init_params(cfg, seed, dtype) if params is None else params

    def forward(self, x, train: bool = False, rng=None) -> Tensor:
        return forward(self.params, self.cfg, x, train, rng)

    def embed(self, x, train: bool = False, rng=None) -> Tensor:
        return embed(self.params, self.cfg, x, train, rng)

    def describe(self) -> dict:
        return {"type": "encoder", **self.cfg.to_dict()}
