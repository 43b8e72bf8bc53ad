"""Forward and backward rules for every primitive the encoder uses.

The public functions at the bottom are thin wrappers around ``apply``; the
classes hold the math. Backward rules return one gradient per input (or
``None`` for inputs that never carry gradients); broadcasting is undone by
the tape, not here.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Primitive, ShapeError, Tensor, apply, eval_forced, register

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _shape_check(op, ok, *arrays):
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {[a.shape for a in arrays]}")


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {[a.shape, b.shape]}") from None


@register
class Add(Primitive):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


@register
class Sub(Primitive):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return g, -g


@register
class Mul(Primitive):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("mul", a, b)
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        return g * ctx.b, g * ctx.a


@register
class MatMul(Primitive):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        _shape_check("matmul", a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2], a, b)
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        return g @ np.swapaxes(ctx.b, -1, -2), np.swapaxes(ctx.a, -1, -2) @ g


@register
class Tanh(Primitive):
    name = "tanh"

    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * (1.0 - ctx.y * ctx.y),)


@register
class Relu(Primitive):
    name = "relu"

    @staticmethod
    def forward(ctx, x):
        ctx.save(mask=x > 0)
        return np.where(ctx.mask, x, 0).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


@register
class Gelu(Primitive):
    """Exact GELU, x * Phi(x)."""

    name = "gelu"

    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
        ctx.save(x=x, cdf=cdf)
        return (x * cdf).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        x = ctx.x
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (ctx.cdf + x * pdf),)


@register
class Softmax(Primitive):
    name = "softmax"

    @staticmethod
    def forward(ctx, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@register
class LayerNorm(Primitive):
    name = "layer_norm"

    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        d = x.shape[-1]
        _shape_check("layer_norm", gamma.shape == (d,) and beta.shape == (d,), x, gamma, beta)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat=xhat, inv=inv, gamma=gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv = ctx.xhat, ctx.inv
        gy = g * ctx.gamma
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


@register
class Dropout(Primitive):
    """Inverted dropout: kept activations are divided by the keep probability."""

    name = "dropout"

    @staticmethod
    def forward(ctx, x, p=0.0, rng=None, train=False):
        if not train or p <= 0.0 or eval_forced():
            ctx.save(mask=None)
            return x
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability {p} outside [0, 1)")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        keep = 1.0 - p
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        ctx.save(mask=mask)
        return x * mask

    @staticmethod
    def backward(ctx, g):
        return (g if ctx.mask is None else g * ctx.mask,)


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _unfold(xp: np.ndarray, length: int, k: int) -> np.ndarray:
    # (N, L + K - 1) -> (N, L, K) view
    return sliding_window_view(xp, k, axis=-1)[:, :length, :]


_CONV_BLOCK = 128


@register
class Conv1d(Primitive):
    """Single-channel cross-correlation with 'same' output length.

    x: (N, L) signals, w: (F, K) filters, b: (F,) biases -> (N, F, L).
    y[n, f, l] = b[f] + sum_k w[f, k] * x[n, l + k - left].
    """

    name = "conv1d"

    @staticmethod
    def forward(ctx, x, w, b):
        _shape_check("conv1d", x.ndim == 2 and w.ndim == 2 and b.shape == (w.shape[0],), x, w, b)
        n, length = x.shape
        k = w.shape[1]
        xp = np.pad(x, [(0, 0), _same_pad(k)])
        out = np.empty((n, w.shape[0], length), dtype=np.result_type(x, w))
        for s in range(0, n, _CONV_BLOCK):
            cols = _unfold(xp[s:s + _CONV_BLOCK], length, k)
            out[s:s + _CONV_BLOCK] = np.einsum("nlk,fk->nfl", cols, w, optimize=True)
        out += b[None, :, None]
        ctx.save(xp=xp, w=w, length=length)
        return out

    @staticmethod
    def backward(ctx, g):
        xp, w, length = ctx.xp, ctx.w, ctx.length
        k = w.shape[1]
        gw = np.zeros_like(w)
        for s in range(0, xp.shape[0], _CONV_BLOCK):
            cols = _unfold(xp[s:s + _CONV_BLOCK], length, k)
            gw += np.einsum("nfl,nlk->fk", g[s:s + _CONV_BLOCK], cols, optimize=True)
        gx = None
        if ctx.needs[0]:
            gcols = np.einsum("nfl,fk->nlk", g, w, optimize=True)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + length] += gcols[:, :, j]
            left, right = _same_pad(k)
            gx = gxp[:, left:xp.shape[1] - right]
        return gx, gw, g.sum(axis=(0, 2))


@register
class Conv1dMax(Primitive):
    """conv1d followed by a max over output positions, fused.

    Returns (N, F). Avoids materialising the (N, F, L) gradient; the
    backward pass only touches the window that won the max.
    """

    name = "conv1d_max"

    @staticmethod
    def forward(ctx, x, w, b):
        _shape_check("conv1d_max", x.ndim == 2 and w.ndim == 2 and b.shape == (w.shape[0],), x, w, b)
        n, length = x.shape
        f, k = w.shape
        xp = np.pad(x, [(0, 0), _same_pad(k)])
        best = np.empty((n, f), dtype=np.result_type(x, w))
        arg = np.empty((n, f), dtype=np.int64)
        for s in range(0, n, _CONV_BLOCK):
            cols = _unfold(xp[s:s + _CONV_BLOCK], length, k)
            m = cols.shape[0]
            y = (cols.reshape(m * length, k) @ w.T).reshape(m, length, f)
            a = y.argmax(axis=1)
            arg[s:s + _CONV_BLOCK] = a
            best[s:s + _CONV_BLOCK] = np.take_along_axis(y, a[:, None, :], axis=1)[:, 0, :]
        best += b[None, :]
        ctx.save(xp=xp, w=w, arg=arg)
        return best

    @staticmethod
    def backward(ctx, g):
        xp, w, arg = ctx.xp, ctx.w, ctx.arg
        k = w.shape[1]
        gw = np.empty_like(w)
        for j in range(k):
            gw[:, j] = (g * np.take_along_axis(xp, arg + j, axis=1)).sum(axis=0)
        gx = None
        if ctx.needs[0]:
            gxp = np.zeros_like(xp)
            rows = np.broadcast_to(np.arange(xp.shape[0])[:, None], arg.shape)
            for j in range(k):
                np.add.at(gxp, (rows, arg + j), g * w[:, j])
            left, right = _same_pad(k)
            gx = gxp[:, left:xp.shape[1] - right]
        return gx, gw, g.sum(axis=0)


@register
class Max(Primitive):
    """Max over one axis; the gradient goes to the first maximal entry."""

    name = "max"

    @staticmethod
    def forward(ctx, x, axis=-1):
        a = x.argmax(axis=axis)
        ctx.save(shape=x.shape, arg=np.expand_dims(a, axis), axis=axis, dtype=x.dtype)
        return np.take_along_axis(x, ctx.arg, axis=axis).squeeze(axis)

    @staticmethod
    def backward(ctx, g):
        gx = np.zeros(ctx.shape, dtype=ctx.dtype)
        np.put_along_axis(gx, ctx.arg, np.expand_dims(g, ctx.axis), axis=ctx.axis)
        return (gx,)


@register
class Sum(Primitive):
    name = "sum"

    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.save(shape=x.shape, axis=axis, keepdims=keepdims)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape),)


@register
class Mean(Primitive):
    name = "mean"

    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        ctx.save(shape=x.shape, axis=axis, keepdims=keepdims, count=count)
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g / ctx.count, ctx.shape),)


@register
class TokenMaxPool(Primitive):
    """Window-2, stride-2 max over the token axis of (B, T, D).

    An odd trailing token is passed through as its own output token.
    """

    name = "token_maxpool"

    @staticmethod
    def forward(ctx, x):
        _shape_check("token_maxpool", x.ndim == 3 and x.shape[1] >= 1, x)
        b, t, d = x.shape
        half = t // 2
        pairs = x[:, : 2 * half].reshape(b, half, 2, d)
        second = pairs[:, :, 1] > pairs[:, :, 0]
        out = np.where(second, pairs[:, :, 1], pairs[:, :, 0])
        if t % 2:
            out = np.concatenate([out, x[:, -1:]], axis=1)
        ctx.save(shape=x.shape, second=second)
        return out

    @staticmethod
    def backward(ctx, g):
        b, t, d = ctx.shape
        half = t // 2
        gx = np.zeros(ctx.shape, dtype=g.dtype)
        gp = g[:, :half]
        pairs = gx[:, : 2 * half].reshape(b, half, 2, d)
        pairs[:, :, 0] = np.where(ctx.second, 0, gp)
        pairs[:, :, 1] = np.where(ctx.second, gp, 0)
        gx[:, : 2 * half] = pairs.reshape(b, 2 * half, d)
        if t % 2:
            gx[:, -1] = g[:, -1]
        return (gx,)


@register
class Concat(Primitive):
    name = "concat"

    @staticmethod
    def forward(ctx, *xs, axis=-1):
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
        ctx.save(splits=np.cumsum([x.shape[axis] for x in xs])[:-1], axis=axis)
        return out

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx.splits, axis=ctx.axis))


@register
class Huber(Primitive):
    """Mean Huber loss over all elements."""

    name = "huber"

    @staticmethod
    def forward(ctx, pred, target, delta=1.0):
        _shape_check("huber", pred.shape == target.shape, pred, target)
        r = pred - target
        a = np.abs(r)
        quad = a <= delta
        loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
        ctx.save(r=r, delta=delta, n=r.size)
        return np.asarray(loss.mean(), dtype=pred.dtype)

    @staticmethod
    def backward(ctx, g):
        d = np.clip(ctx.r, -ctx.delta, ctx.delta) * (g / ctx.n)
        return d, -d


@register
class Reshape(Primitive):
    name = "reshape"

    @staticmethod
    def forward(ctx, x, shape=()):
        try:
            out = x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
        ctx.save(shape=x.shape)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


@register
class Transpose(Primitive):
    name = "transpose"

    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        _shape_check("transpose", sorted(a % x.ndim for a in axes) == list(range(x.ndim)), x)
        ctx.save(inv=tuple(np.argsort([a % x.ndim for a in axes])))
        return np.transpose(x, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, ctx.inv),)


@register
class Gather(Primitive):
    """Select entries along an axis by integer index (repeats allowed)."""

    name = "gather"

    @staticmethod
    def forward(ctx, x, indices=(), axis=0):
        idx = np.asarray(indices, dtype=np.int64)
        n = x.shape[axis]
        if idx.size and (idx.min() < -n or idx.max() >= n):
            raise ShapeError(f"gather: index out of range for axis of length {n}")
        ctx.save(shape=x.shape, idx=idx, axis=axis, dtype=x.dtype)
        return np.take(x, idx, axis=axis)

    @staticmethod
    def backward(ctx, g):
        gx = np.zeros(ctx.shape, dtype=ctx.dtype)
        moved = np.moveaxis(gx, ctx.axis, 0)
        np.add.at(moved, ctx.idx, np.moveaxis(g, ctx.axis, 0))
        return (gx,)


# functional surface ---------------------------------------------------------

def add(a, b) -> Tensor:
    return apply("add", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def tanh(x) -> Tensor:
    return apply("tanh", x)


def relu(x) -> Tensor:
    return apply("relu", x)


def gelu(x) -> Tensor:
    return apply("gelu", x)


def softmax(x) -> Tensor:
    return apply("softmax", x)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, gamma, beta, eps=eps)


def dropout(x, p: float, rng=None, train: bool = False) -> Tensor:
    return apply("dropout", x, p=p, rng=rng, train=train)


def conv1d(x, w, b) -> Tensor:
    return apply("conv1d", x, w, b)


def conv1d_max(x, w, b) -> Tensor:
    return apply("conv1d_max", x, w, b)


def max(x, axis: int = -1) -> Tensor:  # noqa: A001
    return apply("max", x, axis=axis)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply("sum", x, axis=axis, keepdims=keepdims)


def token_maxpool(x) -> Tensor:
    return apply("token_maxpool", x)


def concat(xs, axis: int = -1) -> Tensor:
    return apply("concat", *xs, axis=axis)


def huber(pred, target, delta: float = 1.0) -> Tensor:
    return apply("huber", pred, target, delta=delta)


def reshape(x, shape) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return apply("transpose", x, axes=axes)


def gather(x, indices, axis: int = 0) -> Tensor:
    return apply("gather", x, indices=indices, axis=axis)
