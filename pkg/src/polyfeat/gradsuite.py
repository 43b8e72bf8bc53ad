"""Gradient checks for every registered primitive and for the full encoder.

Each probe reduces the output to a scalar with a random linear functional
(mean of ``r * (out - out0)``), offset so the loss is zero at the check
point. A near-zero loss keeps the rounding of the loss value itself out of
the finite difference, and a linear read-out adds no curvature of its own to
the truncation error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import GradcheckReport, Tensor, force_eval, gradcheck, no_grad, op_set, ops, parameter
from .encoder import EncoderConfig, forward, init_params
from .features import VIEWS, view_feature_shape

# At eps = 1e-5 float64 rounding leaves ~2e-12 * (loss sensitivity) of absolute noise in a
# central difference. At this scale entries whose true gradient is ~1000x below the median
# drop under the harness's 1e-8 floor and are compared absolutely (a few percent of probes,
# counted in every report); all others are compared relatively.
PROBE_SCALE = 0.01


def probe_loss(fn: Callable[[], Tensor], rng: np.random.Generator, scale: float = PROBE_SCALE):
    """Random linear functional of ``fn``'s output, offset to vanish at the check point."""
    with no_grad(), force_eval():
        out0 = np.array(fn().data, copy=True)
    r = rng.uniform(-scale, scale, size=out0.shape)
    return lambda: ops.mean(ops.mul(fn() - out0, r))


def _p(rng, *shape, name="x", low=None):
    a = rng.standard_normal(shape)
    if low is not None:
        # keep entries away from kinks so +-eps never crosses them
        a = np.sign(a) * (np.abs(a) + low)
    return parameter(a, dtype=np.float64, name=name)


def _distinct(rng, *shape, name="x", gap=1e-3):
    """Entries pairwise at least ``gap`` apart, so max/argmax ties cannot flip under +-eps."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap * 7 + rng.uniform(0, gap, n)
    return parameter(rng.permutation(vals).reshape(shape), dtype=np.float64, name=name)


def _rand_shape(rng, ndim, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=ndim))


def primitive_builders() -> dict[str, Callable]:
    """One builder per registered op; shapes are drawn from the check's rng."""

    def add(rng):
        s = _rand_shape(rng, 3)
        a, b = _p(rng, *s, name="a"), _p(rng, *s[1:], name="b")
        return {"a": a, "b": b}, probe_loss(lambda: ops.add(a, b), rng)

    def sub(rng):
        s = _rand_shape(rng, 2)
        a, b = _p(rng, *s, name="a"), _p(rng, 1, s[1], name="b")
        return {"a": a, "b": b}, probe_loss(lambda: a - b, rng)

    def mul(rng):
        s = _rand_shape(rng, 3)
        a, b = _p(rng, *s, name="a"), _p(rng, s[0], 1, s[2], name="b")
        return {"a": a, "b": b}, probe_loss(lambda: ops.mul(a, b), rng)

    def matmul(rng):
        bsz, n, k, m = _rand_shape(rng, 4)
        a, b = _p(rng, bsz, n, k, name="a"), _p(rng, k, m, name="b")
        return {"a": a, "b": b}, probe_loss(lambda: ops.matmul(a, b), rng)

    def unary(op, low=None):
        def build(rng):
            x = _p(rng, *_rand_shape(rng, 2), low=low)
            return {"x": x}, probe_loss(lambda: op(x), rng)
        return build

    def softmax(rng):
        x = _p(rng, *_rand_shape(rng, 3, 2, 6))
        return {"x": x}, probe_loss(lambda: ops.softmax(x), rng)

    def layer_norm(rng):
        # with d = 2 the normalised pair is +-1 up to eps, leaving x-gradients near the rounding floor
        n, d = int(rng.integers(1, 8)), int(rng.integers(3, 9))
        x, g, b = _p(rng, n, d), _p(rng, d, name="gamma"), _p(rng, d, name="beta")
        return {"x": x, "gamma": g, "beta": b}, probe_loss(lambda: ops.layer_norm(x, g, b), rng)

    def dropout(rng):
        x = _p(rng, *_rand_shape(rng, 2))
        return {"x": x}, probe_loss(lambda: ops.dropout(x, 0.3, rng=0, train=True), rng)

    def conv1d(rng):
        n, length, f = _rand_shape(rng, 3, 1, 6)
        k = int(rng.integers(1, 6))
        x, w, b = _p(rng, n, length), _p(rng, f, k, name="w"), _p(rng, f, name="b")
        return {"x": x, "w": w, "b": b}, probe_loss(lambda: ops.conv1d(x, w, b), rng)

    def conv1d_max(rng):
        n, f = _rand_shape(rng, 2, 1, 4)
        length, k = int(rng.integers(4, 12)), int(rng.integers(1, 6))
        x, w, b = _p(rng, n, length), _p(rng, f, k, name="w"), _p(rng, f, name="b")
        return {"x": x, "w": w, "b": b}, probe_loss(lambda: ops.conv1d_max(x, w, b), rng)

    def max_(rng):
        s = _rand_shape(rng, 2, 2, 6)
        x = _distinct(rng, *s)
        axis = int(rng.integers(0, 2))
        return {"x": x}, probe_loss(lambda: ops.max(x, axis=axis), rng)

    def reduce(op):
        def build(rng):
            x = _p(rng, *_rand_shape(rng, 3))
            axis = int(rng.integers(0, 3))
            return {"x": x}, probe_loss(lambda: op(x, axis=axis, keepdims=bool(axis % 2)), rng)
        return build

    def token_maxpool(rng):
        b, t, d = int(rng.integers(1, 3)), int(rng.integers(1, 8)), int(rng.integers(1, 5))
        x = _distinct(rng, b, t, d)
        return {"x": x}, probe_loss(lambda: ops.token_maxpool(x), rng)

    def concat(rng):
        n = int(rng.integers(1, 4))
        a, b = _p(rng, n, int(rng.integers(1, 4)), name="a"), _p(rng, n, int(rng.integers(1, 4)), name="b")
        return {"a": a, "b": b}, probe_loss(lambda: ops.concat([a, b], axis=1), rng)

    def huber(rng):
        s = _rand_shape(rng, 2)
        p, y = _p(rng, *s, name="pred"), rng.standard_normal(s)
        # mix both branches, keep every residual off the |r| = 1 seam
        r = p.data - y
        y = np.where(np.abs(np.abs(r) - 1.0) < 1e-2, y + 0.1, y) * 1.5
        return {"pred": p}, lambda: ops.huber(p, y)

    def reshape(rng):
        a, b = _rand_shape(rng, 2)
        x = _p(rng, a, b)
        return {"x": x}, probe_loss(lambda: ops.reshape(x, (b, a)), rng)

    def transpose(rng):
        x = _p(rng, *_rand_shape(rng, 3))
        return {"x": x}, probe_loss(lambda: ops.transpose(x, (2, 0, 1)), rng)

    def gather(rng):
        n, d = _rand_shape(rng, 2, 2, 6)
        x = _p(rng, n, d)
        idx = rng.integers(0, n, size=int(rng.integers(1, 8)))  # repeats exercise accumulation
        return {"x": x}, probe_loss(lambda: ops.gather(x, idx), rng)

    return {
        "add": add, "sub": sub, "mul": mul, "matmul": matmul,
        "tanh": unary(ops.tanh), "relu": unary(ops.relu, low=1e-3), "gelu": unary(ops.gelu),
        "softmax": softmax, "layer_norm": layer_norm, "dropout": dropout,
        "conv1d": conv1d, "conv1d_max": conv1d_max, "max": max_,
        "sum": reduce(ops.sum), "mean": reduce(ops.mean), "token_maxpool": token_maxpool,
        "concat": concat, "huber": huber, "reshape": reshape, "transpose": transpose, "gather": gather,
    }


def encoder_builder(view: str, batch: int = 2, n_classes: int = 200, **overrides) -> Callable:
    """Full encoder plus head in float64 on random inputs; dropout is forced off by the harness."""

    def build(rng):
        cfg = EncoderConfig(view=view, n_classes=n_classes, **overrides)
        params = init_params(cfg, int(rng.integers(2**31)), np.float64)
        x = rng.standard_normal((batch,) + view_feature_shape(view))
        return params, probe_loss(lambda: forward(params, cfg, x), rng)

    return build


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: GradcheckReport
    seconds: float


def run_suite(seed: int = 0, n_coords: int = 20, primitive_seeds: int = 3, views=VIEWS,
              log: Callable[[str], None] | None = None) -> list[SuiteResult]:
    missing = set(op_set()) - set(primitive_builders())
    if missing:
        raise RuntimeError(f"no gradcheck builder for primitive(s) {sorted(missing)}")
    results = []

    def run(name, builder, s):
        t = time.perf_counter()
        rep = gradcheck(builder, s, n_coords=n_coords)
        results.append(SuiteResult(name, s, rep, time.perf_counter() - t))
        if log:
            log(f"{name} seed {s}: {rep.summary()}")

    for name, builder in primitive_builders().items():
        for s in range(seed, seed + primitive_seeds):
            run(name, builder, s)
    for view in views:
        run(f"encoder[{view}]", encoder_builder(view), seed)
    return results
