"""Reverse-mode automatic differentiation on float64 numpy arrays.

Each op returns a new Tensor that remembers its parents and a backward rule.
``backward(loss)`` replays the recorded graph in reverse insertion order and
accumulates gradients additively on every requires_grad leaf.  Gradients are
never cleared implicitly; call :func:`zero_grads` between optimization steps.

All math runs in float64 and single-threaded numpy, so identical inputs give
bitwise-identical outputs.
"""
from __future__ import annotations

import itertools
import logging
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ShapeError

log = logging.getLogger(__name__)

_EXP_MAX = 700.0  # exp() overflow guard for float64
_EXP_MIN = -745.0
_NORM_FLOOR = 1e-12  # division guard in norm/cosine backward rules

_seq = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """A tensor that never tracks gradients."""
    return Tensor(data, requires_grad=False)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    """Record one node with a hand-written backward rule.

    ``bwd(upstream)`` must return one gradient array (or None) per parent,
    and must not mutate ``upstream`` in place.
    """
    out = Tensor(data)
    if any(p.requires_grad or p._bwd is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")

    nodes = [loss]
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in seen and (p._bwd is not None or p.requires_grad):
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)

    # creation order is a valid topological order, so reverse of it is safe
    nodes.sort(key=lambda n: n._seq, reverse=True)
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = acc.pop(id(t), None)
        if g is None:
            continue
        if t._bwd is None:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        parent_grads = t._bwd(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._bwd is not None):
                continue
            cur = acc.get(id(p))
            acc[id(p)] = pg if cur is None else cur + pg


def zero_grads(tensors) -> None:
    """Explicit gradient reset; there is no implicit zeroing anywhere."""
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g.copy()
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g).reshape(shape).copy()


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return custom_op(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return custom_op(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return custom_op(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    data = a.data / b.data
    return custom_op(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return custom_op(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    return custom_op(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    inv = np.argsort(axes)
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return custom_op(data, parts, bwd)


def take(a: Tensor, idx) -> Tensor:
    """Gather from the flattened tensor at integer indices."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data.reshape(-1)[idx]

    def bwd(g):
        out = np.zeros(a.data.size)
        np.add.at(out, idx, g)
        return (out.reshape(a.data.shape),)

    return custom_op(data, (a,), bwd)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    mask = a.data > lo
    return custom_op(np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)
    return custom_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    inside = (a.data <= _EXP_MAX) & (a.data >= _EXP_MIN)
    out = np.exp(np.clip(a.data, _EXP_MIN, _EXP_MAX))
    return custom_op(out, (a,), lambda g: (g * out * inside,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    out = np.log(a.data)
    return custom_op(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (0.5 * g / np.maximum(out, _NORM_FLOOR),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return custom_op(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return custom_op(out, (a,), bwd)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm.  Backward guards the zero-norm singularity."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        denom = np.maximum(n, _NORM_FLOOR)
        if axis is None:
            return (g * a.data / denom,)
        gg = g if keepdims else np.expand_dims(g, axis)
        dd = denom if keepdims else np.expand_dims(denom, axis)
        return (gg * a.data / dd,)

    return custom_op(n, (a,), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


def mean_pool_spatial(a: Tensor) -> Tensor:
    """Average over the trailing two (spatial) axes: (..., C, H, W) -> (..., C)."""
    if a.data.ndim < 3:
        raise ShapeError(f"mean_pool_spatial expects at least 3 dims, got {a.data.shape}")
    h, w = a.data.shape[-2:]
    data = a.data.mean(axis=(-1, -2))

    def bwd(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), a.data.shape).copy(),)

    return custom_op(data, (a,), bwd)


def grad_reverse(a: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by -lam on the way back."""
    lam = float(lam)
    return custom_op(a.data.copy(), (a,), lambda g: (-lam * g,))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax.

    ``logits`` is (B, C) or (C,); labels is an int array of length B (or a
    scalar).  Uses the stable log-sum-exp form.
    """
    squeeze = logits.data.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects (B, C) logits, got {logits.data.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {n}")
    if np.any((y < 0) | (y >= c)):
        raise DomainError("label outside [0, num_classes)")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    nll = (lse - z[np.arange(n), y]).mean()

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        dl = float(g) * p / n
        return (dl[0] if squeeze else dl,)

    return custom_op(np.float64(nll), (logits,), bwd)


# ---------------------------------------------------------------------------
# spatial ops


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"conv output size is not integral: input {size}, kernel {k}, stride {stride}, pad {pad}"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (C, H, W) or (B, C, H, W); ``w`` is (O, C, kh, kw).  The kernel
    loop accumulates one shifted matmul per tap, which keeps the reduction
    order identical to the deformable variant at zero offsets.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W) and (O,C,kh,kw), got {x.data.shape} and {w.data.shape}")
    b, c, h, wid = xd.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs kernel {cw}")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wid, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((b, o, ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride]
            out += np.moveaxis(np.tensordot(w.data[:, :, ky, kx], xs, axes=(1, 1)), 0, 1)

    def bwd(g):
        gb = g[None] if squeeze else g
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                xs = xp[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride]
                dw[:, :, ky, kx] = np.tensordot(gb, xs, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.moveaxis(np.tensordot(w.data[:, :, ky, kx].T, gb, axes=(1, 1)), 0, 1)
                dxp[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride] += contrib
        dx = dxp[:, :, pad : pad + h, pad : pad + wid] if pad else dxp
        return (dx[0] if squeeze else dx, dw)

    return custom_op(out[0] if squeeze else out, (x, w), bwd)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling on the trailing two axes."""
    h, w = x.data.shape[-2:]
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    lead = x.data.shape[:-2]
    data = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def bwd(g):
        gg = np.repeat(np.repeat(g, k, axis=-1), k, axis=-2)
        return (gg / (k * k),)

    return custom_op(data, (x,), bwd)


def upsample_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of the trailing two axes (half-pixel centers, edges clamped)."""
    h, w = x.data.shape[-2:]
    oh, ow = out_hw
    sy = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    sx = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    y0g, y1g = y0[:, None], y1[:, None]
    x0g, x1g = x0[None, :], x1[None, :]

    d = x.data
    data = (
        d[..., y0g, x0g] * (1 - wy) * (1 - wx)
        + d[..., y0g, x1g] * (1 - wy) * wx
        + d[..., y1g, x0g] * wy * (1 - wx)
        + d[..., y1g, x1g] * wy * wx
    )

    def bwd(g):
        lead = x.data.shape[:-2]
        dflat = np.zeros((h * w, int(np.prod(lead, dtype=np.int64)) or 1))
        gl = g.reshape(-1, oh, ow).transpose(1, 2, 0)  # (oh, ow, L)
        for yi, xi, wgt in (
            (y0g, x0g, (1 - wy) * (1 - wx)),
            (y0g, x1g, (1 - wy) * wx),
            (y1g, x0g, wy * (1 - wx)),
            (y1g, x1g, wy * wx),
        ):
            idx = (np.broadcast_to(yi, (oh, ow)) * w + np.broadcast_to(xi, (oh, ow))).reshape(-1)
            np.add.at(dflat, idx, (gl * wgt[..., None]).reshape(oh * ow, -1))
        dx = dflat.T.reshape(*lead, h, w) if lead else dflat[:, 0].reshape(h, w)
        return (dx,)

    return custom_op(data, (x,), bwd)


def _bilinear_gather(xd: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Sample (C, H, W) data at float positions; out-of-bounds reads as zero.

    Returns the sampled values (C, *pos_shape) and the cache needed for the
    backward rules.
    """
    c, h, w = xd.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    wy = py - y0
    wx = px - x0
    corners = []
    for yi, xi in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        m = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        v = xd[:, yc, xc] * m  # (C, *pos)
        corners.append((yc, xc, m, v))
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    val = v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx + v10 * wy * (1 - wx) + v11 * wy * wx
    cache = (corners, wy, wx, (c, h, w))
    return val, cache


def _bilinear_backward(gval: np.ndarray, cache):
    """Gradients of a bilinear gather w.r.t. the source image and positions."""
    corners, wy, wx, (c, h, w) = cache
    (y00, x00, m00, v00), (y01, x01, m01, v01), (y10, x10, m10, v10), (y11, x11, m11, v11) = corners
    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    dx_flat = np.zeros((h * w, c))
    for (yc, xc, m, _), wgt in zip(corners, weights):
        idx = (yc * w + xc).reshape(-1)
        contrib = (gval * (wgt * m)).reshape(c, -1).T
        np.add.at(dx_flat, idx, contrib)
    dx = dx_flat.T.reshape(c, h, w)
    dval_dy = (v10 - v00) * (1 - wx) + (v11 - v01) * wx
    dval_dx = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
    dpy = (gval * dval_dy).sum(axis=0)
    dpx = (gval * dval_dx).sum(axis=0)
    return dx, dpy, dpx


def bilinear_sample(x: Tensor, pos: Tensor) -> Tensor:
    """Sample a (C, H, W) tensor at one fractional (y, x) position.

    Out-of-bounds corners contribute zero.  Differentiable with respect to
    both the image values and the position.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects (C, H, W), got {x.data.shape}")
    if pos.data.shape != (2,):
        raise ShapeError(f"bilinear_sample expects a (2,) position, got {pos.data.shape}")
    py = pos.data[0].reshape(1)
    px = pos.data[1].reshape(1)
    val, cache = _bilinear_gather(x.data, py, px)

    def bwd(g):
        dx, dpy, dpx = _bilinear_backward(g.reshape(-1, 1), cache)
        return (dx, np.array([dpy[0], dpx[0]]))

    return custom_op(val[:, 0], (x, pos), bwd)


__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "custom_op",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "take",
    "clip_min",
    "clip",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "tmean",
    "softmax",
    "l2_norm",
    "dot",
    "mean_pool_spatial",
    "grad_reverse",
    "cross_entropy_logits",
    "conv2d",
    "avg_pool2d",
    "upsample_bilinear",
    "bilinear_sample",
]
