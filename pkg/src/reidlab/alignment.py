"""Cross-image feature alignment.

Given the feature blocks of an image and a reference (its pseudo-pair
partner), a three-scale non-local pyramid estimates a per-position offset
field, a deformable convolution resamples the reference along those offsets,
and the warped block is concatenated with the original for classification.
The whole path is differentiable, including the sampling positions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import _bilinear_backward, _bilinear_gather, custom_op
from .errors import ShapeError

log = logging.getLogger(__name__)

ATTENTION_CLAMP = 30.0
PYRAMID_SCALES = (2, 4, 8)


@dataclass
class NonLocalParams:
    sigma1: ad.Tensor  # (d_attn, C) query embedding
    sigma2: ad.Tensor  # (d_attn, C) key embedding
    wv: ad.Tensor  # (d_val, C) value projection
    wo: ad.Tensor  # (C, d_val) output projection, zero-initialized

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator):
        d = max(1, channels // 2)
        s = 1.0 / np.sqrt(channels)
        return cls(
            ad.tensor(rng.normal(size=(d, channels)) * s, requires_grad=True),
            ad.tensor(rng.normal(size=(d, channels)) * s, requires_grad=True),
            ad.tensor(rng.normal(size=(d, channels)) * s, requires_grad=True),
            ad.tensor(np.zeros((channels, d)), requires_grad=True),
        )

    def tensors(self):
        return (self.sigma1, self.sigma2, self.wv, self.wo)


def nonlocal_block(z: ad.Tensor, p: NonLocalParams, clamp: float = ATTENTION_CLAMP) -> ad.Tensor:
    """Residual non-local aggregation over all spatial positions of (C, H, W).

    Attention uses the exponentiated dot product of two linear embeddings,
    normalized over positions (a row softmax).  Logits are clamped to
    +-clamp before the softmax; clamping is logged, not fatal.  With a zero
    output projection the block is exactly the identity.
    """
    if z.data.ndim != 3:
        raise ShapeError(f"nonlocal_block expects (C, H, W), got {z.data.shape}")
    c, h, w = z.data.shape
    zf = ad.transpose(ad.reshape(z, (c, h * w)))  # (P, C)
    q = ad.matmul(zf, ad.transpose(p.sigma1))
    k = ad.matmul(zf, ad.transpose(p.sigma2))
    logits = ad.matmul(q, ad.transpose(k))
    n_clamped = int((np.abs(logits.data) >= clamp).sum())
    if n_clamped:
        log.debug("nonlocal_block clamped %d attention logits to +-%g", n_clamped, clamp)
    attn = ad.softmax(ad.clip(logits, -clamp, clamp), axis=1)
    vals = ad.matmul(zf, ad.transpose(p.wv))
    out = ad.add(zf, ad.matmul(ad.matmul(attn, vals), ad.transpose(p.wo)))
    return ad.reshape(ad.transpose(out), (c, h, w))


@dataclass
class OffsetParams:
    """Offset estimator: pyramid of non-local blocks plus a 1x1 projection."""

    blocks: list[NonLocalParams]
    proj_w: ad.Tensor  # (2K, 2C, 1, 1), zero-initialized
    proj_b: ad.Tensor  # (2K,)

    @classmethod
    def init(cls, channels_z: int, kernel: int, rng: np.random.Generator):
        k = kernel * kernel
        blocks = [NonLocalParams.init(channels_z, rng) for _ in PYRAMID_SCALES]
        proj_w = ad.tensor(np.zeros((2 * k, channels_z, 1, 1)), requires_grad=True)
        proj_b = ad.tensor(np.zeros(2 * k), requires_grad=True)
        return cls(blocks, proj_w, proj_b)

    def tensors(self):
        out = []
        for b in self.blocks:
            out.extend(b.tensors())
        out.extend([self.proj_w, self.proj_b])
        return out


def feasible_scales(h: int, w: int) -> list[int]:
    """Pyramid scales that divide the spatial dims; falls back to full res."""
    ok = [s for s in PYRAMID_SCALES if h % s == 0 and w % s == 0 and h >= s and w >= s]
    if not ok:
        log.warning("offset pyramid: no scale in %s fits %dx%d, using full resolution", PYRAMID_SCALES, h, w)
        return [1]
    if len(ok) < len(PYRAMID_SCALES):
        log.debug("offset pyramid reduced to scales %s for %dx%d maps", ok, h, w)
    return ok


def offset_field(x: ad.Tensor, x_ref: ad.Tensor, p: OffsetParams) -> ad.Tensor:
    """Estimate (2K, H, W) sampling offsets from a feature block and its reference.

    Offsets start at exactly zero because the final projection is
    zero-initialized, so training begins at plain convolution.
    """
    if x.data.shape != x_ref.data.shape:
        raise ShapeError(f"feature blocks differ: {x.data.shape} vs {x_ref.data.shape}")
    z = ad.concat([x, x_ref], axis=0)
    _, h, w = z.data.shape
    acc = None
    for s in feasible_scales(h, w):
        block = p.blocks[PYRAMID_SCALES.index(s)] if s in PYRAMID_SCALES else p.blocks[0]
        zs = ad.avg_pool2d(z, s) if s > 1 else z
        o = nonlocal_block(zs, block)
        if s > 1:
            o = ad.upsample_bilinear(o, (h, w))
        acc = o if acc is None else ad.add(acc, o)
    off = ad.conv2d(acc, p.proj_w, stride=1, pad=0)
    return ad.add(off, ad.reshape(p.proj_b, (-1, 1, 1)))


def deform_conv(x: ad.Tensor, w: ad.Tensor, offsets: ad.Tensor, pad: int | None = None) -> ad.Tensor:
    """Convolution whose taps are displaced by learned fractional offsets.

    ``x`` is (C, H, W), ``w`` is (O, C, kh, kw), ``offsets`` is (2K, H, W)
    with K = kh*kw; channels 2k and 2k+1 hold the (dy, dx) displacement of
    tap k (row-major taps) shared across input and output channels.  Stride
    is 1 and padding defaults to kh//2 so output size equals input size.
    Out-of-bounds samples read zero.  Differentiable w.r.t. all three inputs.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"deform_conv expects (C,H,W) and (O,C,kh,kw), got {x.data.shape}, {w.data.shape}")
    c, h, wid = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"deform_conv channel mismatch: {c} vs {cw}")
    kk = kh * kw
    if offsets.data.shape != (2 * kk, h, wid):
        raise ShapeError(f"offsets must be ({2 * kk}, {h}, {wid}), got {offsets.data.shape}")
    if pad is None:
        pad = kh // 2

    gy, gx = np.mgrid[0:h, 0:wid].astype(np.float64)
    out = np.zeros((o, h, wid))
    caches = []
    for k in range(kk):
        ky, kx = divmod(k, kw)
        py = gy + (ky - pad) + offsets.data[2 * k]
        px = gx + (kx - pad) + offsets.data[2 * k + 1]
        v, cache = _bilinear_gather(x.data, py, px)
        out += np.tensordot(w.data[:, :, ky, kx], v, axes=(1, 0))
        caches.append((v, cache, ky, kx))

    def bwd(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        doff = np.zeros_like(offsets.data)
        for k, (v, cache, ky, kx) in enumerate(caches):
            dw[:, :, ky, kx] = np.tensordot(g, v, axes=([1, 2], [1, 2]))
            dv = np.tensordot(w.data[:, :, ky, kx].T, g, axes=(1, 0))
            dxk, dpy, dpx = _bilinear_backward(dv, cache)
            dx += dxk
            doff[2 * k] = dpy
            doff[2 * k + 1] = dpx
        return dx, dw, doff

    return custom_op(out, (x, w, offsets), bwd)


def align_pair(x: ad.Tensor, x_ref: ad.Tensor, deform_w: ad.Tensor, p: OffsetParams):
    """Warp the reference block toward ``x`` and stack the two.

    Returns (warped, stacked) where stacked is the (2C', H, W) concatenation
    consumed by the pair classifier.
    """
    off = offset_field(x, x_ref, p)
    warped = deform_conv(x_ref, deform_w, off)
    return warped, ad.concat([x, warped], axis=0)


def classify_block(block: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Globally average-pool a feature block and apply a linear classifier."""
    single = block.data.ndim == 3
    bb = ad.reshape(block, (1, *block.data.shape)) if single else block
    pooled = ad.mean_pool_spatial(bb)
    logits = ad.add(ad.matmul(pooled, ad.transpose(w)), b)
    return ad.reshape(logits, (logits.data.shape[1],)) if single else logits


def classification_log_prob(logits: ad.Tensor, label) -> ad.Tensor:
    """Log-probability of the label (the negative of the softmax NLL)."""
    return ad.neg(ad.cross_entropy_logits(logits, label))
