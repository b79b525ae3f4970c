"""Intra-image attention heads and their adversarial diversity loss.

J parallel channel-attention heads gate the same feature block; a shared
two-layer embedding summarizes each gated block into a vector.  A small MLP
adversary tries to make those J vectors look alike (it minimizes the pairwise
discrepancy), while a gradient-reversal layer between the vectors and the
adversary pushes the upstream parameters to maximize it, so the heads learn
to attend to different structure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

CPAM_HIDDEN = 64  # bottleneck width of every channel-attention head


@dataclass
class ChannelAttentionParams:
    w1: ad.Tensor  # (hidden, C)
    w2: ad.Tensor  # (C, hidden)

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, hidden: int = CPAM_HIDDEN):
        s1 = np.sqrt(2.0 / channels)
        s2 = np.sqrt(2.0 / hidden)
        return cls(
            ad.tensor(rng.normal(size=(hidden, channels)) * s1, requires_grad=True),
            ad.tensor(rng.normal(size=(channels, hidden)) * s2, requires_grad=True),
        )

    def tensors(self):
        return (self.w1, self.w2)


def channel_attention(u: ad.Tensor, p: ChannelAttentionParams) -> ad.Tensor:
    """Gate channels of (C, H, W) or (B, C, H, W) features.

    gate = sigmoid(W2 relu(W1 mean_pool(U))); output is U * gate per channel.
    With both weight matrices zero the gate is exactly 0.5 everywhere.
    """
    single = u.data.ndim == 3
    ub = ad.reshape(u, (1, *u.data.shape)) if single else u
    b, c = ub.data.shape[:2]
    pooled = ad.mean_pool_spatial(ub)  # (B, C)
    h = ad.relu(ad.matmul(pooled, ad.transpose(p.w1)))
    gate = ad.sigmoid(ad.matmul(h, ad.transpose(p.w2)))
    out = ad.mul(ub, ad.reshape(gate, (b, c, 1, 1)))
    return ad.reshape(out, u.data.shape) if single else out


@dataclass
class SharedEmbedParams:
    """The shared summarizer g(.) applied to every gated block."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, hidden: int, out_dim: int):
        return cls(
            ad.tensor(rng.normal(size=(hidden, channels)) * np.sqrt(2.0 / channels), requires_grad=True),
            ad.tensor(np.zeros(hidden), requires_grad=True),
            ad.tensor(rng.normal(size=(out_dim, hidden)) * np.sqrt(2.0 / hidden), requires_grad=True),
            ad.tensor(np.zeros(out_dim), requires_grad=True),
        )

    @classmethod
    def identity(cls, channels: int):
        eye = np.eye(channels)
        zero = np.zeros(channels)
        return cls(ad.tensor(eye), ad.tensor(zero), ad.tensor(eye), ad.tensor(zero))

    def tensors(self):
        return (self.w1, self.b1, self.w2, self.b2)


def shared_embed(gated: ad.Tensor, p: SharedEmbedParams) -> ad.Tensor:
    """Pool a gated block and project it: W2 relu(W1 pool + b1) + b2."""
    single = gated.data.ndim == 3
    gb = ad.reshape(gated, (1, *gated.data.shape)) if single else gated
    pooled = ad.mean_pool_spatial(gb)
    h = ad.relu(ad.add(ad.matmul(pooled, ad.transpose(p.w1)), p.b1))
    out = ad.add(ad.matmul(h, ad.transpose(p.w2)), p.b2)
    return ad.reshape(out, (out.data.shape[1],)) if single else out


@dataclass
class AdversaryParams:
    """Two-layer MLP that maps an attention vector to a comparison space."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    @classmethod
    def init(cls, in_dim: int, rng: np.random.Generator, hidden: int = 32, out_dim: int = 16):
        return cls(
            ad.tensor(rng.normal(size=(hidden, in_dim)) * np.sqrt(2.0 / in_dim), requires_grad=True),
            ad.tensor(np.zeros(hidden), requires_grad=True),
            ad.tensor(rng.normal(size=(out_dim, hidden)) * np.sqrt(2.0 / hidden), requires_grad=True),
            ad.tensor(np.zeros(out_dim), requires_grad=True),
        )

    @classmethod
    def identity(cls, dim: int):
        eye = np.eye(dim)
        zero = np.zeros(dim)
        return cls(ad.tensor(eye), ad.tensor(zero), ad.tensor(eye), ad.tensor(zero))

    def tensors(self):
        return (self.w1, self.b1, self.w2, self.b2)


def adversary_forward(z: ad.Tensor, p: AdversaryParams) -> ad.Tensor:
    single = z.data.ndim == 1
    zb = ad.reshape(z, (1, -1)) if single else z
    h = ad.relu(ad.add(ad.matmul(zb, ad.transpose(p.w1)), p.b1))
    out = ad.add(ad.matmul(h, ad.transpose(p.w2)), p.b2)
    return ad.reshape(out, (out.data.shape[1],)) if single else out


def discrepancy_loss(
    sa_outputs: list[ad.Tensor],
    adv: AdversaryParams,
    grl_lambda: float = 1.0,
    reverse_features: bool = True,
) -> ad.Tensor:
    """Sum over head pairs of ||A(z_j) - A(z_j')||^2, batch-averaged.

    ``reverse_features`` inserts the gradient-reversal layer between the
    attention vectors and the adversary, which is how training uses it: the
    adversary descends on this value while everything upstream ascends.
    """
    j = len(sa_outputs)
    if j < 2:
        raise ConfigError(f"diversity needs at least 2 attention heads, got {j}")
    outs = []
    for z in sa_outputs:
        zin = ad.grad_reverse(z, grl_lambda) if reverse_features else z
        outs.append(adversary_forward(zin, adv))
    total = None
    for a in range(j):
        for b in range(a + 1, j):
            diff = ad.sub(outs[a], outs[b])
            sq = ad.tsum(ad.mul(diff, diff), axis=-1)  # per sample
            term = sq if sq.data.ndim == 0 else ad.tmean(sq)
            total = term if total is None else ad.add(total, term)
    return total


def proximal_penalty(phi, psi, beta: float) -> ad.Tensor:
    """(beta/2) * sum ||phi_i - psi_i||^2 against a frozen parameter snapshot."""
    total = None
    for cur, snap in zip(phi, psi):
        diff = ad.sub(cur, ad.constant(snap))
        term = ad.tsum(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ConfigError("proximal_penalty over an empty parameter list")
    return ad.scale(total, beta / 2.0)
