"""The full re-identification network.

A small strided-conv backbone produces a feature block per image.  Three
consumers share that block:

* a linear projection of the pooled block — the embedding used for pseudo
  labels, pairing, and retrieval;
* J channel-attention heads + a shared summarizer — the intra-image branch
  trained adversarially to look at different structure;
* the alignment path (offset estimator, deformable conv, pair classifier) —
  the inter-image branch run on accepted pseudo-pairs.

Every parameter lives in a flat name -> Tensor registry so checkpoints,
optimizer state, and parameter-group selection all speak the same names.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment, attention, autodiff as ad, checkpoint, pairing
from .errors import ConfigError, ContractError, ValidationError
from .pairing import SimilarityHead

DOWNSAMPLE_FACTOR = 8  # three stride-2 convolutions


@dataclass
class ModelConfig:
    image_hw: tuple[int, int] = (32, 16)
    channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    attn_heads: int = 4
    attn_hidden: int = attention.CPAM_HIDDEN
    sa_hidden: int = 32
    sa_dim: int = 16
    adv_hidden: int = 32
    adv_dim: int = 16
    deform_kernel: int = 3

    def validate(self) -> None:
        h, w = self.image_hw
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ConfigError(
                f"image size {h}x{w} must be divisible by {DOWNSAMPLE_FACTOR} "
                "(each backbone stage halves both dims exactly)"
            )
        if len(self.channels) != 3:
            raise ConfigError(f"expected 3 backbone stages, got {len(self.channels)}")
        if self.attn_heads < 2:
            raise ConfigError("adversarial diversity needs at least 2 attention heads")
        if self.deform_kernel % 2 == 0:
            raise ConfigError("deformable kernel must be odd to keep same-size output")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.image_hw[0] // DOWNSAMPLE_FACTOR, self.image_hw[1] // DOWNSAMPLE_FACTOR


def _he_conv(rng, out_c, in_c, k):
    return ad.tensor(
        rng.normal(size=(out_c, in_c, k, k)) * np.sqrt(2.0 / (in_c * k * k)),
        requires_grad=True,
    )


class ReidModel:
    """Backbone + attention branch + alignment branch + similarity head."""

    def __init__(self, num_classes: int, cfg: ModelConfig | None = None, seed: int = 0):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 pseudo classes, got {num_classes}")
        self.cfg = cfg or ModelConfig()
        self.cfg.validate()
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        c = self.cfg.channels
        self.params: dict[str, ad.Tensor] = {}

        # backbone: kernel-4 / stride-2 / pad-1 convs halve even dims exactly,
        # which is the only downsampling the strict conv size rule permits
        self.conv_w = [
            _he_conv(rng, c[0], 3, 4),
            _he_conv(rng, c[1], c[0], 4),
            _he_conv(rng, c[2], c[1], 4),
        ]
        for i, w in enumerate(self.conv_w):
            self._register(f"backbone/conv{i}/w", w)

        in_dim = c[2] * self.cfg.feature_hw[0]
        self.embed_w = ad.tensor(
            rng.normal(size=(self.cfg.embed_dim, in_dim)) * np.sqrt(1.0 / in_dim),
            requires_grad=True,
        )
        self.embed_b = ad.tensor(np.zeros(self.cfg.embed_dim), requires_grad=True)
        self._register("embed/w", self.embed_w)
        self._register("embed/b", self.embed_b)

        self.attn_heads = [
            attention.ChannelAttentionParams.init(c[2], rng, hidden=self.cfg.attn_hidden)
            for _ in range(self.cfg.attn_heads)
        ]
        for j, head in enumerate(self.attn_heads):
            self._register(f"attn/head{j}/w1", head.w1)
            self._register(f"attn/head{j}/w2", head.w2)
        self.sa_embed = attention.SharedEmbedParams.init(
            c[2], rng, hidden=self.cfg.sa_hidden, out_dim=self.cfg.sa_dim
        )
        for name, t in zip(("w1", "b1", "w2", "b2"), self.sa_embed.tensors()):
            self._register(f"attn/shared/{name}", t)
        self.adversary = attention.AdversaryParams.init(
            self.cfg.sa_dim, rng, hidden=self.cfg.adv_hidden, out_dim=self.cfg.adv_dim
        )
        for name, t in zip(("w1", "b1", "w2", "b2"), self.adversary.tensors()):
            self._register(f"adv/{name}", t)

        self.offsets = alignment.OffsetParams.init(2 * c[2], self.cfg.deform_kernel, rng)
        for i, block in enumerate(self.offsets.blocks):
            for name, t in zip(("sigma1", "sigma2", "wv", "wo"), block.tensors()):
                self._register(f"align/block{i}/{name}", t)
        self._register("align/proj/w", self.offsets.proj_w)
        self._register("align/proj/b", self.offsets.proj_b)
        self.deform_w = _he_conv(rng, c[2], c[2], self.cfg.deform_kernel)
        self._register("align/deform/w", self.deform_w)
        self.cls_w = ad.tensor(
            rng.normal(size=(num_classes, 2 * c[2])) * np.sqrt(1.0 / (2 * c[2])),
            requires_grad=True,
        )
        self.cls_b = ad.tensor(np.zeros(num_classes), requires_grad=True)
        self._register("align/cls/w", self.cls_w)
        self._register("align/cls/b", self.cls_b)

        # pairing head starts isotropic (gain * identity, b=0): class scores
        # are plain scaled centroid cosines, nothing learned yet
        self.head = SimilarityHead.init(self.cfg.embed_dim)
        self._register("head/w", self.head.w)
        self._register("head/b", self.head.b)

    def _register(self, name: str, t: ad.Tensor) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self.params[name] = t

    # ---- forward paths ----

    def features(self, images: ad.Tensor) -> ad.Tensor:
        """(B, 3, H, W) or (3, H, W) image batch -> feature block(s).

        The final block is standardized per image and channel before a last
        rectification.  Without this, every random-init feature map shares
        one dominant activation pattern, all pooled embeddings point the
        same way, and pair scores start out saturated near +1.
        """
        single = images.data.ndim == 3
        x = ad.reshape(images, (1, *images.data.shape)) if single else images
        for w in self.conv_w:
            x = ad.relu(ad.conv2d(x, w, stride=2, pad=1))
        m = ad.reshape(ad.mean_pool_spatial(x), (*x.data.shape[:2], 1, 1))
        cent = ad.sub(x, m)
        var = ad.reshape(ad.mean_pool_spatial(ad.mul(cent, cent)), (*x.data.shape[:2], 1, 1))
        x = ad.relu(ad.div(cent, ad.sqrt(ad.add(var, ad.constant(1e-5)))))
        return ad.reshape(x, x.data.shape[1:]) if single else x

    def embed_from_features(self, u: ad.Tensor) -> ad.Tensor:
        """Row-strip pooled projection, L2-normalized onto the unit sphere.

        Each feature row is pooled on its own and the per-channel mean across
        rows is removed, so the descriptor codes *where* along the figure a
        channel fires, not how much it fires overall.  A single global average
        looks nearly identical for every image (rectified features share one
        dominant direction), which is exactly the degenerate start this
        sidesteps.  Everything downstream compares embeddings by angle (pair
        scores, retrieval, centroids), and the unit norm keeps classification
        logits bounded — without it the class loss can feed its own logit
        growth.

        The embedding is rectified before normalization, so every descriptor
        lives in the non-negative orthant and no two embeddings can be
        anti-parallel.  Pair scores multiply two cosines, and that product
        cannot tell an aligned pair from a pair where *both* factors flip
        sign; with few identities, different people drift toward antipodal
        embeddings and such double-negative pairs get accepted wholesale.
        Non-negative coordinates remove the second branch outright.
        """
        single = u.data.ndim == 3
        ub = ad.reshape(u, (1, *u.data.shape)) if single else u
        b, c, fh, fw = ub.data.shape
        v = ad.mean_pool_spatial(ad.reshape(ub, (b, c * fh, 1, fw)))  # per-(channel,row)
        v3 = ad.reshape(v, (b, c, fh))
        v3 = ad.sub(v3, ad.reshape(ad.tmean(v3, axis=2), (b, c, 1)))
        f = ad.relu(
            ad.add(ad.matmul(ad.reshape(v3, (b, c * fh)), ad.transpose(self.embed_w)), self.embed_b)
        )
        n = ad.clip_min(ad.l2_norm(f, axis=1, keepdims=True), 1e-12)
        f = ad.div(f, n)
        return ad.reshape(f, (f.data.shape[1],)) if single else f

    def embed(self, images: ad.Tensor) -> ad.Tensor:
        return self.embed_from_features(self.features(images))

    def sa_vectors(self, u: ad.Tensor) -> list[ad.Tensor]:
        """One summary vector per attention head, all through the shared embed."""
        return [
            attention.shared_embed(attention.channel_attention(u, head), self.sa_embed)
            for head in self.attn_heads
        ]

    def pair_log_prob(self, u_s: ad.Tensor, u_t: ad.Tensor, label: int) -> ad.Tensor:
        """Log-probability that the aligned pair (s ref'd by t) carries s's label."""
        _, stacked = alignment.align_pair(u_s, u_t, self.deform_w, self.offsets)
        logits = alignment.classify_block(stacked, self.cls_w, self.cls_b)
        return alignment.classification_log_prob(logits, label)

    # ---- parameter groups ----

    def base_group(self) -> dict[str, ad.Tensor]:
        return {
            k: v
            for k, v in self.params.items()
            if k.startswith(("backbone/", "embed/", "head/"))
        }

    def attention_group(self) -> dict[str, ad.Tensor]:
        """The phi parameters tied by the proximal penalty (heads + shared embed)."""
        return {
            k: v
            for k, v in self.params.items()
            if k.startswith(("attn/head", "attn/shared"))
        }

    def adversary_group(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("adv/")}

    def alignment_group(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("align/")}

    def reinit_pair_classifier(self, rng: np.random.Generator) -> None:
        """Reset the similarity head that scores pseudo-pairs to its fresh state.

        Pair scores are cosines between this head's classification
        gradients.  Once the head fits the current pseudo labels its softmax
        saturates, the gradients shrink to numerical zero, and every pair
        score degenerates; periodically restoring the untrained head (plain
        centroid comparison) keeps the signal alive without disturbing the
        label refresh, which reads the same head.
        """
        del rng  # the fresh state is deterministic
        self.head.w.data = pairing.HEAD_GAIN * np.eye(self.head.w.data.shape[1])
        self.head.b.data = np.zeros_like(self.head.b.data)
        self.head.w.grad = None
        self.head.b.grad = None

    # ---- persistence ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        blob = dict(self.state_arrays())
        for k, v in (extra or {}).items():
            blob[f"meta/{k}"] = np.asarray(v)
        checkpoint.save_tensors(path, blob)

    def load(self, path) -> dict[str, np.ndarray]:
        """Restore parameters in place; returns any meta/* entries."""
        blob = checkpoint.load_tensors(path)
        meta = {}
        seen = set()
        for name, arr in blob.items():
            if name.startswith("meta/"):
                meta[name[5:]] = arr
                continue
            if name not in self.params:
                raise ValidationError(f"checkpoint has unknown parameter {name!r}")
            t = self.params[name]
            if arr.shape != t.data.shape:
                raise ValidationError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}"
                )
            t.data = arr.astype(np.float64)
            seen.add(name)
        missing = set(self.params) - seen
        if missing:
            raise ValidationError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        return meta
