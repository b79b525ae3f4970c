"""Surrogate-class construction from image patches.

Each training image is tiled into a 2x2 grid of patches.  Every patch seeds a
patch set: K randomly transformed copies whose per-pixel RGB mean summarizes
the set.  k-means over the mean vectors yields surrogate classes that stand in
for identity labels before any training signal exists.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ConfigError, ShapeError, ValidationError

log = logging.getLogger(__name__)

SCALE_RANGE = (0.7, 1.4)
ROTATE_RANGE = 20.0
TRANSLATE_RANGE = 0.2  # fraction of patch size
GAIN_RANGE = (0.8, 1.2)
BIAS_RANGE = 16.0


@dataclass
class Patch:
    pixels: np.ndarray  # (h, w, 3) uint8
    source_image: int
    grid_position: int  # 0..3, row-major

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"patch pixels must be (h, w, 3), got {self.pixels.shape}")
        if not 0 <= self.grid_position <= 3:
            raise ValidationError(f"grid_position must be 0..3, got {self.grid_position}")


@dataclass
class TransformParams:
    """One sampled augmentation; applying it is fully deterministic."""

    flip: bool = False
    scale: float = 1.0
    rotate_deg: float = 0.0
    translate: tuple[float, float] = (0.0, 0.0)  # (fx, fy) fractions of (w, h)
    channel_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValidationError(f"scale {self.scale} outside {SCALE_RANGE}")
        if abs(self.rotate_deg) > ROTATE_RANGE:
            raise ValidationError(f"rotation {self.rotate_deg} outside +-{ROTATE_RANGE}")
        for t in self.translate:
            if abs(t) > TRANSLATE_RANGE:
                raise ValidationError(f"translation {t} outside +-{TRANSLATE_RANGE}")
        for g in self.channel_gain:
            if not GAIN_RANGE[0] <= g <= GAIN_RANGE[1]:
                raise ValidationError(f"channel gain {g} outside {GAIN_RANGE}")
        for b in self.channel_bias:
            if abs(b) > BIAS_RANGE:
                raise ValidationError(f"channel bias {b} outside +-{BIAS_RANGE}")


def random_transform(rng: np.random.Generator) -> TransformParams:
    return TransformParams(
        flip=bool(rng.integers(2)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        rotate_deg=float(rng.uniform(-ROTATE_RANGE, ROTATE_RANGE)),
        translate=(
            float(rng.uniform(-TRANSLATE_RANGE, TRANSLATE_RANGE)),
            float(rng.uniform(-TRANSLATE_RANGE, TRANSLATE_RANGE)),
        ),
        channel_gain=tuple(float(g) for g in rng.uniform(*GAIN_RANGE, size=3)),
        channel_bias=tuple(float(b) for b in rng.uniform(-BIAS_RANGE, BIAS_RANGE, size=3)),
    )


def sample_patches(image: np.ndarray, source_image: int = 0) -> list[Patch]:
    """Tile an (H, W, 3) image into a row-major 2x2 grid of patches."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h % 2 or w % 2:
        raise ConfigError(f"image dims {h}x{w} not divisible into a 2x2 grid")
    ph, pw = h // 2, w // 2
    out = []
    for gy in range(2):
        for gx in range(2):
            pix = image[gy * ph : (gy + 1) * ph, gx * pw : (gx + 1) * pw]
            out.append(Patch(np.ascontiguousarray(pix), source_image, gy * 2 + gx))
    return out


def apply_transform(patch: Patch, params: TransformParams) -> Patch:
    """Flip, scale, rotate, translate (in that order), then jitter channels.

    The four geometric steps compose into one affine map about the patch
    center, sampled once with bilinear interpolation and edge replication, so
    identity parameters reproduce the input exactly.
    """
    params.validate()
    src = patch.pixels.astype(np.float64)
    h, w = src.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    th = np.deg2rad(params.rotate_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    flip = np.diag([1.0, -1.0 if params.flip else 1.0])  # mirror along x
    fwd = rot @ (params.scale * np.eye(2)) @ flip
    inv = np.linalg.inv(fwd)
    ty = params.translate[1] * h
    tx = params.translate[0] * w

    yo, xo = np.mgrid[0:h, 0:w].astype(np.float64)
    rel = np.stack([yo - cy - ty, xo - cx - tx])  # (2, h, w)
    src_y = inv[0, 0] * rel[0] + inv[0, 1] * rel[1] + cy
    src_x = inv[1, 0] * rel[0] + inv[1, 1] * rel[1] + cx

    # bilinear with edge replication
    src_y = np.clip(src_y, 0.0, h - 1.0)
    src_x = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0)[..., None]
    wx = (src_x - x0)[..., None]
    out = (
        src[y0, x0] * (1 - wy) * (1 - wx)
        + src[y0, x1] * (1 - wy) * wx
        + src[y1, x0] * wy * (1 - wx)
        + src[y1, x1] * wy * wx
    )

    gain = np.asarray(params.channel_gain)
    bias = np.asarray(params.channel_bias)
    out = np.clip(np.rint(out * gain + bias), 0, 255).astype(np.uint8)
    return Patch(out, patch.source_image, patch.grid_position)


@dataclass
class PatchSet:
    seed_patch: Patch
    members: list[Patch]
    mean_vector: np.ndarray  # float64, flattened (h*w*3,)


def rgb_mean_vector(members: list[Patch]) -> np.ndarray:
    stack = np.stack([m.pixels.astype(np.float64) for m in members])
    return stack.mean(axis=0).reshape(-1)


def build_patch_sets(patches: list[Patch], transforms_per_patch: int, seed: int) -> list[PatchSet]:
    """Expand each seed patch into K transformed members plus its mean vector."""
    if transforms_per_patch < 1:
        raise ConfigError("transforms_per_patch must be >= 1")
    root = np.random.SeedSequence(seed)
    out = []
    for child, patch in zip(root.spawn(len(patches)), patches):
        rng = np.random.default_rng(child)
        members = [apply_transform(patch, random_transform(rng)) for _ in range(transforms_per_patch)]
        out.append(PatchSet(patch, members, rgb_mean_vector(members)))
    return out


# ---------------------------------------------------------------------------
# clustering


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(np.argmax(d2))  # all zero: duplicate points, take lowest index
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[c]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100):
    """Lloyd iterations with k-means++ seeding.

    Empty clusters are reseeded at the point farthest from its own centroid
    (lowest index on ties).  Returns (labels, centroids, wcss_history); the
    history is measured after each update step and never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k={k} invalid for {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    prev = None
    history = []
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        # reseed empty clusters at the farthest point from its own centroid
        # (lowest index on ties); never steal a cluster's only member
        for _ in range(k):
            empty = [c for c in range(k) if not np.any(labels == c)]
            if not empty:
                break
            c = empty[0]
            counts = np.bincount(labels, minlength=k)
            own = d2[np.arange(n), labels]
            own = np.where(counts[labels] > 1, own, -np.inf)
            far = int(np.argmax(own))
            centroids[c] = points[far]
            labels[far] = c
            d2[:, c] = ((points - centroids[c]) ** 2).sum(axis=1)
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
        history.append(float(((points - centroids[labels]) ** 2).sum()))
        if prev is not None and np.array_equal(labels, prev):
            break
        prev = labels.copy()
    return labels, centroids, np.array(history)


def nearest_class(x: np.ndarray, centroids: np.ndarray) -> int:
    """Index of the closest centroid (Euclidean); lowest index wins ties."""
    if centroids.ndim != 2 or x.shape[-1] != centroids.shape[1]:
        raise ShapeError(f"vector dim {x.shape} vs centroids {centroids.shape}")
    return int(((centroids - x) ** 2).sum(axis=1).argmin())


def cluster_purity(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of points whose cluster's majority truth value matches theirs."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    total = 0
    for c in np.unique(labels):
        vals, counts = np.unique(truth[labels == c], return_counts=True)
        total += counts.max()
    return total / len(labels)


# ---------------------------------------------------------------------------
# catalog persistence


@dataclass
class SurrogateClass:
    class_id: int
    members: list[int] = field(default_factory=list)  # patch-set indices
    centroid: np.ndarray | None = None


@dataclass
class SurrogateCatalog:
    classes: list[SurrogateClass]
    patch_meta: list[tuple[int, int]]  # (source_image, grid_position) per patch set
    patch_labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def centroid_matrix(self) -> np.ndarray:
        return np.stack([c.centroid for c in self.classes])


def build_catalog(patch_sets: list[PatchSet], num_classes: int, seed: int = 0) -> SurrogateCatalog:
    means = np.stack([ps.mean_vector for ps in patch_sets])
    labels, centroids, _ = kmeans(means, num_classes, seed=seed)
    classes = [
        SurrogateClass(c, [int(i) for i in np.flatnonzero(labels == c)], centroids[c])
        for c in range(num_classes)
    ]
    meta = [(ps.seed_patch.source_image, ps.seed_patch.grid_position) for ps in patch_sets]
    return SurrogateCatalog(classes, meta, labels)


def save_catalog(catalog: SurrogateCatalog, prefix) -> tuple[Path, Path]:
    """Write `<prefix>.txt` (membership manifest) and `<prefix>.pssl` (centroids)."""
    prefix = Path(prefix)
    manifest = prefix.with_suffix(".txt")
    blob = prefix.with_suffix(".pssl")
    lines = [
        "# surrogate catalog",
        f"classes {catalog.num_classes}",
        f"patchsets {len(catalog.patch_meta)}",
    ]
    for i, (img, pos) in enumerate(catalog.patch_meta):
        lines.append(f"patchset {i} image {img} grid {pos}")
    for cls in catalog.classes:
        lines.append(f"class {cls.class_id} members " + " ".join(str(m) for m in cls.members))
    manifest.write_text("\n".join(lines) + "\n")
    checkpoint.save_tensors(blob, {"centroids": catalog.centroid_matrix()})
    return manifest, blob


def load_catalog(prefix) -> SurrogateCatalog:
    prefix = Path(prefix)
    manifest = prefix.with_suffix(".txt")
    blob = prefix.with_suffix(".pssl")
    centroids = load_centroids(blob)
    meta: list[tuple[int, int]] = []
    classes: list[SurrogateClass] = []
    n_classes = n_sets = None
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "classes":
            n_classes = int(tok[1])
        elif tok[0] == "patchsets":
            n_sets = int(tok[1])
        elif tok[0] == "patchset":
            meta.append((int(tok[3]), int(tok[5])))
        elif tok[0] == "class":
            cid = int(tok[1])
            members = [int(m) for m in tok[3:]]
            classes.append(SurrogateClass(cid, members, centroids[cid]))
        else:
            raise ValidationError(f"bad catalog line: {line!r}")
    if n_classes != len(classes) or n_sets != len(meta):
        raise ValidationError("catalog manifest counts do not match its contents")
    labels = np.zeros(len(meta), dtype=np.int64)
    for cls in classes:
        labels[cls.members] = cls.class_id
    return SurrogateCatalog(classes, meta, labels)


def load_centroids(blob) -> np.ndarray:
    tensors = checkpoint.load_tensors(blob)
    if "centroids" not in tensors:
        raise ValidationError(f"{blob}: no 'centroids' tensor")
    return tensors["centroids"].astype(np.float64)
