"""Pseudo-pair mining from gradient similarity.

Images are compared through the gradients they induce on a shared bilinear
similarity head rather than through raw embeddings.  For the head
F(x, v_c) = x^T W v_c + b under a softmax class loss, the gradient w.r.t. W
is the outer product x r^T with r = sum_c (p_c - 1[c=y]) v_c, and the shared
bias receives exactly zero.  That closed form makes the pair score

    d_st = cos(g_s, g_t) = cos(x_s, x_t) * cos(r_s, r_t)

an ordinary differentiable expression, which is what the training loss uses;
`head_gradient` computes the same vector by actually running backward on the
head parameters, and the two routes are tested against each other.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateGradientError, ValidationError

log = logging.getLogger(__name__)

_DEGENERATE_NORM = 1e-12


# Fresh heads start at HEAD_GAIN * identity.  Embeddings and centroids are
# (near) unit vectors, so with W = I the class scores live in [-1, 1] and the
# softmax stays almost uniform no matter how well separated the clusters are;
# the gain gives the class loss enough dynamic range to actually pull
# embeddings toward their centroids.  An isotropic W also matters for the
# label refresh, which ranks centroids through this same head: any learned
# anisotropy in W biases every image toward the same few classes and the
# pseudo labels collapse.
HEAD_GAIN = 6.0


@dataclass
class SimilarityHead:
    """Bilinear comparison head: F(x, v) = x^T W v + b with one shared bias."""

    w: ad.Tensor
    b: ad.Tensor

    @classmethod
    def init(cls, dim: int, gain: float = HEAD_GAIN) -> "SimilarityHead":
        return cls(
            ad.tensor(gain * np.eye(dim), requires_grad=True),
            ad.tensor(0.0, requires_grad=True),
        )

    def tensors(self) -> tuple[ad.Tensor, ad.Tensor]:
        return (self.w, self.b)


@dataclass
class SeparationConfig:
    alpha: float = 2.0
    delta: float = 0.25

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")


def class_scores(x: ad.Tensor, centroids: ad.Tensor, head: SimilarityHead) -> ad.Tensor:
    """Similarity of each embedding to each class centroid: X W V^T + b."""
    if centroids.data.ndim != 2 or centroids.data.shape[0] == 0:
        raise ContractError("class_scores needs a non-empty (C, d) centroid matrix")
    single = x.data.ndim == 1
    xb = ad.reshape(x, (1, -1)) if single else x
    s = ad.matmul(ad.matmul(xb, head.w), ad.transpose(centroids))
    s = ad.add(s, head.b)
    return ad.reshape(s, (centroids.data.shape[0],)) if single else s


def class_loss(x: ad.Tensor, centroids: ad.Tensor, head: SimilarityHead, label) -> ad.Tensor:
    """Negative log-probability of the pseudo label under the softmax over classes."""
    return ad.cross_entropy_logits(class_scores(x, centroids, head), label)


def head_gradient(x: np.ndarray, centroids: np.ndarray, head: SimilarityHead, label: int) -> np.ndarray:
    """Flattened gradient of the class loss w.r.t. the head parameters (W then b).

    Runs a fresh forward/backward on copies of the head, so the caller's
    gradient buffers are untouched.
    """
    w = ad.tensor(head.w.data.copy(), requires_grad=True)
    b = ad.tensor(head.b.data.copy(), requires_grad=True)
    probe = SimilarityHead(w, b)
    loss = class_loss(ad.constant(x), ad.constant(centroids), probe, int(label))
    ad.backward(loss)
    return np.concatenate([w.grad.reshape(-1), b.grad.reshape(-1)])


def residual_direction(X: ad.Tensor, centroids: ad.Tensor, head: SimilarityHead, labels) -> ad.Tensor:
    """r_i = sum_c (p_c - 1[c=y_i]) v_c for every row of X."""
    scores = class_scores(X, centroids, head)
    p = ad.softmax(scores, axis=1)
    onehot = np.zeros(p.data.shape)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return ad.matmul(ad.sub(p, ad.constant(onehot)), centroids)


def pair_score_matrix(X: ad.Tensor, centroids: ad.Tensor, head: SimilarityHead, labels) -> ad.Tensor:
    """All pairwise gradient cosines d_st, computed in closed form.

    Entry (s, t) equals cos(x_s, x_t) * cos(r_s, r_t), which is exactly the
    cosine between the flattened head gradients of images s and t.
    """
    if X.data.ndim != 2 or X.data.shape[0] == 0:
        raise ContractError("pair_score_matrix needs a non-empty (B, d) batch")
    R = residual_direction(X, centroids, head, labels)
    b = X.data.shape[0]

    def _cosines(M: ad.Tensor) -> ad.Tensor:
        n = ad.clip_min(ad.l2_norm(M, axis=1), _DEGENERATE_NORM)
        unit = ad.div(M, ad.reshape(n, (b, 1)))
        return ad.matmul(unit, ad.transpose(unit))

    return ad.mul(_cosines(X), _cosines(R))


def gradient_cosine(gs: np.ndarray, gt: np.ndarray) -> float:
    """Cosine between two gradient vectors, clamped to [-1, 1]."""
    gs = np.asarray(gs, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if gs.shape != gt.shape:
        raise ContractError(f"gradient shapes differ: {gs.shape} vs {gt.shape}")
    ns = np.linalg.norm(gs)
    nt = np.linalg.norm(gt)
    if ns < _DEGENERATE_NORM or nt < _DEGENERATE_NORM:
        raise DegenerateGradientError(f"gradient norm too small ({ns:.3e}, {nt:.3e})")
    return float(np.clip(gs @ gt / (ns * nt), -1.0, 1.0))


def separation_loss(scores: ad.Tensor, cfg: SeparationConfig) -> ad.Tensor:
    """Mean over pairs of 1 - (alpha/2) (d_st - delta)^2.

    Minimizing this pushes every pair score away from delta: pairs above the
    threshold migrate toward +1, pairs below it toward -1.
    """
    if scores.data.size == 0:
        raise ContractError("separation_loss over an empty pair batch")
    diff = ad.add(scores, ad.constant(-cfg.delta))
    per_pair = ad.add(ad.scale(ad.mul(diff, diff), -cfg.alpha / 2.0), ad.constant(1.0))
    return ad.tmean(per_pair)


@dataclass
class PseudoPair:
    s: int
    t: int
    score: float
    accepted: bool


def assign_pairs(
    embeddings: np.ndarray,
    labels: np.ndarray,
    centroids: np.ndarray,
    head: SimilarityHead,
    cameras: np.ndarray,
    cfg: SeparationConfig,
) -> list[PseudoPair]:
    """Score all cross-view pairs in a batch through their head gradients.

    A pair is accepted when d_st > delta.  Pairs touching a degenerate
    (near-zero) gradient are skipped and counted in the log.
    """
    n = len(embeddings)
    grads = np.stack([head_gradient(embeddings[i], centroids, head, labels[i]) for i in range(n)])
    norms = np.linalg.norm(grads, axis=1)
    ok = norms >= _DEGENERATE_NORM
    unit = np.zeros_like(grads)
    unit[ok] = grads[ok] / norms[ok, None]
    cos = unit @ unit.T
    pairs = []
    skipped = 0
    for i in range(n):
        for j in range(i + 1, n):
            if cameras[i] == cameras[j]:
                continue
            if not (ok[i] and ok[j]):
                skipped += 1
                continue
            d = float(np.clip(cos[i, j], -1.0, 1.0))
            pairs.append(PseudoPair(i, j, d, d > cfg.delta))
    if skipped:
        log.debug("assign_pairs skipped %d pairs with degenerate gradients", skipped)
    return pairs


def update_centroids(
    embeddings: np.ndarray, labels: np.ndarray, num_classes: int, prev: np.ndarray
) -> np.ndarray:
    """Per-class mean embedding; classes with no members keep their old centroid."""
    out = prev.copy()
    labels = np.asarray(labels)
    frozen = []
    for c in range(num_classes):
        members = embeddings[labels == c]
        if len(members) == 0:
            frozen.append(c)
            continue
        out[c] = members.mean(axis=0)
    if frozen:
        log.debug("update_centroids froze %d empty classes: %s", len(frozen), frozen[:8])
    return out
