"""Training orchestration.

The objective is assembled per stage:

* ``pretrain_GS``   — class loss plus the gradient-separation loss,
  updating only the backbone, embedding, and similarity head;
* ``finetune_full`` — adds the adversarial diversity term (with its proximal
  penalty) and subtracts the aligned-pair log-likelihood, updating everything.

Each epoch recomputes class centroids from current pseudo labels, then
refreshes the labels against the new centroids.  Metrics, pseudo-pair dumps,
and a checkpoint are written every epoch; a NaN total aborts the run and
leaves the last finished epoch's checkpoint in place.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad, checkpoint, evaluation, pairing, surrogate, synth
from .attention import AdversaryParams, discrepancy_loss, proximal_penalty
from .config import RunConfig, config_text
from .errors import ConfigError, ContractError, ValidationError
from .model import ModelConfig, ReidModel
from .pairing import SeparationConfig

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,loss_total,loss_C,loss_GS,loss_Adv,loss_S,pair_precision,rank1,mAP"
PAIRS_HEADER = "epoch,s_id,t_id,d_st,accepted,ground_truth_same"


@dataclass
class ObjectiveConfig:
    lambda1: float = 0.015
    lambda2: float = 2.5
    gs_weight: float = 1.0
    separation: SeparationConfig = field(default_factory=SeparationConfig)
    beta: float = 0.5
    grl_lambda: float = 1.0
    n_reinit: int = 500
    gs_l2: bool = False
    sa_weight_decay: float = 0.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.gs_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.beta < 0 or self.sa_weight_decay < 0:
            raise ConfigError("regularizer strengths must be non-negative")
        if self.n_reinit < 1:
            raise ConfigError("n_reinit must be positive")


@dataclass
class TrainSchedule:
    batch_size: int = 64
    lr_start: float = 0.05
    lr_after: float = 0.005
    lr_decay_epoch: int = 40
    epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 0.0005
    stage: str = "finetune_full"
    seed: int = 0
    snapshot_interval: int = 2

    def __post_init__(self):
        if not (self.lr_start > self.lr_after > 0):
            raise ConfigError("need lr_start > lr_after > 0")
        if self.stage not in ("pretrain_GS", "finetune_full"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.batch_size < 2:
            raise ConfigError("need at least 2 images per batch to form pairs")


def learning_rate(epoch: int, sched: TrainSchedule) -> float:
    return sched.lr_start if epoch < sched.lr_decay_epoch else sched.lr_after


def total_from_components(comps: dict, obj: ObjectiveConfig) -> float:
    """The objective as plain arithmetic on logged component values."""
    return (
        comps["loss_C"]
        + obj.gs_weight * comps["loss_GS"]
        + obj.lambda1 * comps["loss_Adv"]
        - obj.lambda2 * comps["loss_S"]
    )


class SGD:
    """Momentum SGD with coupled weight decay over the named registry."""

    def __init__(self, params: dict[str, ad.Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float, names=None) -> None:
        for name in names if names is not None else self.params:
            t = self.params[name]
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data = t.data - lr * v


def random_erase(image: np.ndarray, p: float, area_range: tuple[float, float],
                 rng: np.random.Generator) -> np.ndarray:
    """With probability p, fill a random rectangle with uniform noise.

    The rectangle's area fraction is drawn from ``area_range`` and its aspect
    ratio from [0.5, 2]; a draw that does not fit is retried a few times.
    """
    if not 0 <= p <= 1:
        raise ConfigError(f"erase probability {p} outside [0, 1]")
    if rng.random() >= p:
        return image
    c, h, w = image.shape
    for _ in range(10):
        frac = rng.uniform(*area_range)
        aspect = rng.uniform(0.5, 2.0)
        eh = int(round(np.sqrt(frac * h * w * aspect)))
        ew = int(round(np.sqrt(frac * h * w / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            out = image.copy()
            out[:, y : y + eh, x : x + ew] = rng.uniform(0.0, 1.0, size=(c, eh, ew))
            return out
    return image


def horizontal_flip(image: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    return image[:, :, ::-1].copy() if rng.random() < p else image


def initial_labels(catalog: surrogate.SurrogateCatalog, num_images: int) -> np.ndarray:
    """Per-image pseudo label: majority vote over its patches' clusters.

    Ties break toward the lowest class id; an image without patches in the
    catalog is a contract violation (the catalog was built from these images).
    """
    votes = np.zeros((num_images, catalog.num_classes), dtype=np.int64)
    for (image_idx, _grid), label in zip(catalog.patch_meta, catalog.patch_labels):
        if image_idx >= num_images:
            raise ContractError(
                f"catalog references image {image_idx} beyond training set ({num_images})"
            )
        votes[image_idx, label] += 1
    if (votes.sum(axis=1) == 0).any():
        raise ContractError("some training images have no patches in the catalog")
    return votes.argmax(axis=1)


def refresh_labels(embeds: np.ndarray, centroids: np.ndarray, head: pairing.SimilarityHead) -> np.ndarray:
    scores = embeds @ head.w.data @ centroids.T + head.b.data
    return scores.argmax(axis=1)


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoint_path: str
    metrics_path: str
    pairs_path: str
    diversity_init: float
    diversity_final: float
    mean_d_same: list[float]
    mean_d_diff: list[float]
    aborted: bool = False

    @property
    def final_precision(self) -> float:
        return self.metrics[-1]["pair_precision"] if self.metrics else 0.0


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        image_hw=(cfg.image_h, cfg.image_w),
        embed_dim=cfg.embed_dim,
        attn_heads=cfg.attn_heads,
        attn_hidden=cfg.attn_hidden,
        sa_hidden=cfg.sa_hidden,
        sa_dim=cfg.sa_dim,
        adv_hidden=cfg.adv_hidden,
        adv_dim=cfg.adv_dim,
        deform_kernel=cfg.deform_kernel,
    )


def _objective(cfg: RunConfig) -> ObjectiveConfig:
    return ObjectiveConfig(
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        gs_weight=cfg.gs_weight,
        separation=SeparationConfig(alpha=cfg.alpha, delta=cfg.delta),
        beta=cfg.beta,
        grl_lambda=cfg.grl_lambda,
        n_reinit=cfg.n_reinit,
        gs_l2=cfg.gs_l2,
        sa_weight_decay=cfg.sa_weight_decay,
    )


def _schedule(cfg: RunConfig) -> TrainSchedule:
    return TrainSchedule(
        batch_size=cfg.batch_size,
        lr_start=cfg.lr_start,
        lr_after=cfg.lr_after,
        lr_decay_epoch=cfg.lr_decay_epoch,
        epochs=cfg.epochs,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        stage=cfg.stage,
        seed=cfg.train_seed,
        snapshot_interval=cfg.snapshot_interval,
    )


def _take_image(batched: ad.Tensor, i: int) -> ad.Tensor:
    """Graph-connected slice of one (C, H, W) block out of (B, C, H, W)."""
    _, c, h, w = batched.data.shape
    size = c * h * w
    idx = np.arange(i * size, (i + 1) * size)
    return ad.reshape(ad.take(batched, idx), (c, h, w))


def _embed_all(model: ReidModel, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(images), batch):
        f = model.embed(ad.constant(images[lo : lo + batch]))
        out.append(f.data)
    return np.concatenate(out, axis=0)


def _frozen_adversary(model: ReidModel) -> AdversaryParams:
    return AdversaryParams(*(ad.constant(t.data.copy()) for t in model.adversary.tensors()))


def _diversity(model: ReidModel, frozen: AdversaryParams, images: np.ndarray) -> float:
    u = model.features(ad.constant(images))
    sa = model.sa_vectors(u)
    return float(discrepancy_loss(sa, frozen, reverse_features=False).data)


def _offset_field_maybe_identity(model: ReidModel, use_nonlocal: bool):
    """The alignment path with the non-local pyramid optionally bypassed."""
    from . import alignment

    if use_nonlocal:
        return None  # default path inside the model

    def pair_log_prob(u_s, u_t, label):
        z = ad.concat([u_s, u_t], axis=0)
        off = ad.conv2d(z, model.offsets.proj_w, stride=1, pad=0)
        off = ad.add(off, ad.reshape(model.offsets.proj_b, (-1, 1, 1)))
        warped = alignment.deform_conv(u_t, model.deform_w, off)
        stacked = ad.concat([u_s, warped], axis=0)
        logits = alignment.classify_block(stacked, model.cls_w, model.cls_b)
        return alignment.classification_log_prob(logits, label)

    return pair_log_prob


def train(cfg: RunConfig, data_dir: str, catalog_prefix: str, out_dir: str,
          init_checkpoint: str | None = None) -> TrainResult:
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    obj = _objective(cfg)
    sched = _schedule(cfg)

    records = synth.load_manifest(data_dir)
    train_recs = [r for r in records if r.split == "train"]
    if not train_recs:
        raise ValidationError("manifest has no training images")
    images = synth.load_images(data_dir, train_recs)
    gt_ids = np.array([r.identity for r in train_recs])
    cams = np.array([r.camera for r in train_recs])
    n = len(train_recs)

    catalog = surrogate.load_catalog(catalog_prefix)
    labels = initial_labels(catalog, n)
    num_classes = catalog.num_classes

    model = ReidModel(num_classes, _model_config(cfg), seed=cfg.model_seed)
    rng = np.random.default_rng(sched.seed)
    start_epoch = 0
    if init_checkpoint is not None:
        meta = model.load(init_checkpoint)
        start_epoch = int(meta["epoch"][()] if meta["epoch"].ndim == 0 else meta["epoch"][0])
        if "rng_state" in meta:
            rng = checkpoint.decode_rng_state(meta["rng_state"])
        stored = meta.get("config_digest")
        now = checkpoint.config_digest(config_text(cfg))
        if stored is not None and not np.array_equal(np.asarray(stored, dtype=np.float64), now):
            log.info("resuming with a different config than the checkpoint's")

    opt = SGD(model.params, sched.momentum, sched.weight_decay)
    phi = list(model.attention_group().values())
    psi = [t.data.copy() for t in phi]
    frozen_adv = _frozen_adversary(model)
    probe = images[: min(32, n)]
    diversity_init = _diversity(model, frozen_adv, probe)
    custom_pair_fn = _offset_field_maybe_identity(model, cfg.use_nonlocal)

    test_recs = [r for r in records if r.split in ("query", "gallery")]
    test_images = synth.load_images(data_dir, test_recs) if test_recs else None

    metrics_path = os.path.join(out_dir, "metrics.csv")
    pairs_path = os.path.join(out_dir, "pairs.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.pssl")
    metrics_rows: list[dict] = []
    mean_d_same: list[float] = []
    mean_d_diff: list[float] = []
    aborted = False
    stage2 = sched.stage == "finetune_full"
    step_count = 0

    centroids = np.zeros((num_classes, cfg.embed_dim))

    mf = open(metrics_path, "w")
    pf = open(pairs_path, "w")
    mf.write(METRICS_HEADER + "\n")
    pf.write(PAIRS_HEADER + "\n")
    try:
        for epoch in range(start_epoch, start_epoch + sched.epochs):
            lr = learning_rate(epoch, sched)
            all_embeds = _embed_all(model, images)
            centroids = pairing.update_centroids(all_embeds, labels, num_classes, centroids)
            labels = refresh_labels(all_embeds, centroids, model.head)
            v_const = ad.constant(centroids)

            sums = {"loss_total": 0.0, "loss_C": 0.0, "loss_GS": 0.0, "loss_Adv": 0.0, "loss_S": 0.0}
            steps = 0
            acc_total = acc_correct = 0
            d_same_vals: list[float] = []
            d_diff_vals: list[float] = []

            order = rng.permutation(n)
            for lo in range(0, n, sched.batch_size):
                sel = order[lo : lo + sched.batch_size]
                if len(sel) < 2:
                    continue
                batch = np.stack([
                    random_erase(
                        horizontal_flip(images[i], cfg.flip_p, rng),
                        cfg.erase_p, (cfg.erase_area_lo, cfg.erase_area_hi), rng,
                    )
                    for i in sel
                ])
                yb = labels[sel]
                cb = cams[sel]
                b = len(sel)

                x = ad.constant(batch)
                u = model.features(x)
                f = model.embed_from_features(u)
                comps: dict[str, float] = {}

                scores = pairing.class_scores(f, v_const, model.head)
                loss_c = ad.cross_entropy_logits(scores, yb)
                comps["loss_C"] = float(loss_c.data)
                total = loss_c

                d_mat = pairing.pair_score_matrix(f, v_const, model.head, yb)
                ii, jj = np.triu_indices(b, k=1)
                cross = cb[ii] != cb[jj]
                ii, jj = ii[cross], jj[cross]
                if len(ii):
                    flat = ii * b + jj
                    d_vals = d_mat.data[ii, jj]
                    accepted = d_vals > obj.separation.delta
                    gt_same = gt_ids[sel[ii]] == gt_ids[sel[jj]]
                    acc_total += int(accepted.sum())
                    acc_correct += int((accepted & gt_same).sum())
                    d_same_vals.extend(d_vals[gt_same])
                    d_diff_vals.extend(d_vals[~gt_same])
                    for k in range(len(ii)):
                        pf.write(
                            f"{epoch},{sel[ii[k]]},{sel[jj[k]]},{d_vals[k]:.6f},"
                            f"{int(accepted[k])},{int(gt_same[k])}\n"
                        )
                    if obj.gs_l2:
                        loss_gs = _gs_l2_loss(f, v_const, model.head, yb, flat[accepted], b)
                    else:
                        loss_gs = pairing.separation_loss(ad.take(d_mat, flat), obj.separation)
                    if loss_gs is not None:
                        comps["loss_GS"] = float(loss_gs.data)
                        total = ad.add(total, ad.scale(loss_gs, obj.gs_weight))
                comps.setdefault("loss_GS", 0.0)

                if stage2:
                    sa = model.sa_vectors(u)
                    adv = discrepancy_loss(sa, model.adversary, obj.grl_lambda)
                    adv = ad.add(adv, proximal_penalty(phi, psi, obj.beta))
                    if obj.sa_weight_decay > 0:
                        norms = [ad.tmean(ad.tsum(ad.mul(z, z), axis=-1)) for z in sa]
                        pen = norms[0]
                        for t in norms[1:]:
                            pen = ad.add(pen, t)
                        adv = ad.add(adv, ad.scale(pen, obj.sa_weight_decay / len(norms)))
                    comps["loss_Adv"] = float(adv.data)
                    total = ad.add(total, ad.scale(adv, obj.lambda1))

                    partners = _choose_partners(d_mat.data, cb, obj.separation.delta, f.data)
                    lps = []
                    for i, t in partners:
                        u_i = _take_image(u, i)
                        u_t = _take_image(u, t)
                        if custom_pair_fn is None:
                            lps.append(model.pair_log_prob(u_i, u_t, int(yb[i])))
                        else:
                            lps.append(custom_pair_fn(u_i, u_t, int(yb[i])))
                    if lps:
                        stackd = ad.concat([ad.reshape(t, (1,)) for t in lps], axis=0)
                        loss_s = ad.tmean(stackd)
                        comps["loss_S"] = float(loss_s.data)
                        total = ad.sub(total, ad.scale(loss_s, obj.lambda2))
                    else:
                        comps["loss_S"] = 0.0
                        log.warning("epoch %d: no cross-view partners in batch, skipping L_S", epoch)
                else:
                    comps["loss_Adv"] = 0.0
                    comps["loss_S"] = 0.0

                expect = total_from_components(comps, obj) if stage2 else (
                    comps["loss_C"] + obj.gs_weight * comps["loss_GS"]
                )
                if abs(float(total.data) - expect) > 1e-10:
                    raise ContractError(
                        f"loss bookkeeping drifted: total {float(total.data)!r} vs components {expect!r}"
                    )
                if not np.isfinite(total.data):
                    log.error("epoch %d: non-finite loss, aborting with last-good checkpoint", epoch)
                    aborted = True
                    break

                ad.zero_grads(model.params.values())
                ad.backward(total)
                if not stage2:
                    _assert_stage1_gating(model)
                    opt.step(lr, names=model.base_group().keys())
                else:
                    opt.step(lr)
                step_count += 1
                if step_count % obj.n_reinit == 0:
                    model.reinit_pair_classifier(rng)
                    log.info("reinitialized pair classifier at iteration %d", step_count)

                comps["loss_total"] = float(total.data)
                for k in sums:
                    sums[k] += comps[k]
                steps += 1

            if aborted:
                break

            row = {k: (sums[k] / max(steps, 1)) for k in sums}
            row["epoch"] = epoch
            row["pair_precision"] = acc_correct / acc_total if acc_total else 0.0
            if test_images is not None:
                rank1, mAP = _test_metrics(model, test_recs, test_images)
            else:
                rank1, mAP = 0.0, 0.0
            row["rank1"] = rank1
            row["mAP"] = mAP
            metrics_rows.append(row)
            mean_d_same.append(float(np.mean(d_same_vals)) if d_same_vals else 0.0)
            mean_d_diff.append(float(np.mean(d_diff_vals)) if d_diff_vals else 0.0)
            mf.write(
                f"{epoch},{row['loss_total']:.10g},{row['loss_C']:.10g},{row['loss_GS']:.10g},"
                f"{row['loss_Adv']:.10g},{row['loss_S']:.10g},{row['pair_precision']:.6f},"
                f"{rank1:.6f},{mAP:.6f}\n"
            )
            mf.flush()
            pf.flush()

            if (epoch + 1 - start_epoch) % sched.snapshot_interval == 0:
                psi = [t.data.copy() for t in phi]
            if cfg.dump_gates:
                _dump_gates(model, probe, out_dir, epoch)
            if cfg.dump_offsets:
                _dump_offsets(model, images[0], images[min(1, n - 1)], out_dir, epoch, cfg.use_nonlocal)
            _save_checkpoint(model, ckpt_path, epoch + 1, rng, cfg)
    finally:
        mf.close()
        pf.close()

    if not metrics_rows and not aborted:
        _save_checkpoint(model, ckpt_path, start_epoch, rng, cfg)

    diversity_final = _diversity(model, frozen_adv, probe)
    return TrainResult(
        metrics=metrics_rows,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        pairs_path=pairs_path,
        diversity_init=diversity_init,
        diversity_final=diversity_final,
        mean_d_same=mean_d_same,
        mean_d_diff=mean_d_diff,
        aborted=aborted,
    )


def _gs_l2_loss(f, v_const, head, yb, accepted_flat, b):
    """Squared gradient distance over accepted pairs (the optional l2 mode).

    ||g_s - g_t||^2 factorizes through the rank-1 gradient structure into
    Gram matrices of embeddings and residual directions.
    """
    if len(accepted_flat) == 0:
        return None
    r = pairing.residual_direction(f, v_const, head, yb)
    gx = ad.matmul(f, ad.transpose(f))
    gr = ad.matmul(r, ad.transpose(r))
    prod = ad.mul(gx, gr)  # <g_i, g_j> for every pair
    diag_idx = np.arange(b) * b + np.arange(b)
    diag = ad.take(prod, diag_idx)
    s_idx = accepted_flat // b
    t_idx = accepted_flat % b
    term = ad.add(ad.take(diag, s_idx), ad.take(diag, t_idx))
    term = ad.sub(term, ad.scale(ad.take(prod, accepted_flat), 2.0))
    return ad.tmean(term)


def _choose_partners(d, cams, delta, embeds) -> list[tuple[int, int]]:
    """Reference image per batch item: best accepted cross-view partner,
    else the nearest cross-view embedding; items with no cross-view
    candidates are skipped."""
    b = len(cams)
    sims = evaluation.cosine_similarities(embeds, embeds)
    out = []
    for i in range(b):
        cross = np.flatnonzero(cams != cams[i])
        if len(cross) == 0:
            continue
        di = d[i, cross]
        best = int(np.argmax(di))
        if di[best] > delta:
            out.append((i, int(cross[best])))
        else:
            out.append((i, int(cross[int(np.argmax(sims[i, cross]))])))
    return out


def _assert_stage1_gating(model: ReidModel) -> None:
    for name, t in model.params.items():
        if name.startswith(("adv/", "align/", "attn/")):
            if t.grad is not None and np.any(t.grad != 0.0):
                raise ContractError(f"stage-1 gradient leaked into {name}")


def _test_metrics(model, test_recs, test_images) -> tuple[float, float]:
    embeds = _embed_all(model, test_images)
    ids = np.array([r.identity for r in test_recs])
    cams = np.array([r.camera for r in test_recs])
    is_q = np.array([r.split == "query" for r in test_recs])
    if not is_q.any() or is_q.all():
        return 0.0, 0.0
    report, _ = evaluation.evaluate(
        embeds[is_q], ids[is_q], cams[is_q],
        embeds[~is_q], ids[~is_q], cams[~is_q],
    )
    return report.rank1, report.map


def _save_checkpoint(model, path, epoch, rng, cfg) -> None:
    text = config_text(cfg)
    model.save(path, extra={
        "epoch": np.float32(epoch),
        "rng_state": checkpoint.encode_rng_state(rng),
        "config_digest": checkpoint.config_digest(text),
    })


def _dump_gates(model, probe, out_dir, epoch) -> None:
    u = model.features(ad.constant(probe))
    path = os.path.join(out_dir, "gates.csv")
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write("epoch,head,channel,mean_gate\n")
        pooled = ad.mean_pool_spatial(u)
        for j, head in enumerate(model.attn_heads):
            h = ad.relu(ad.matmul(pooled, ad.transpose(head.w1)))
            gate = ad.sigmoid(ad.matmul(h, ad.transpose(head.w2)))
            means = gate.data.mean(axis=0)
            for ch, v in enumerate(means):
                fh.write(f"{epoch},{j},{ch},{v:.6f}\n")


def _dump_offsets(model, img_a, img_b, out_dir, epoch, use_nonlocal) -> None:
    from . import alignment

    u = model.features(ad.constant(np.stack([img_a, img_b])))
    u_a = ad.constant(u.data[0])
    u_b = ad.constant(u.data[1])
    if use_nonlocal:
        off = alignment.offset_field(u_a, u_b, model.offsets)
    else:
        z = ad.concat([u_a, u_b], axis=0)
        off = ad.conv2d(z, model.offsets.proj_w, stride=1, pad=0)
        off = ad.add(off, ad.reshape(model.offsets.proj_b, (-1, 1, 1)))
    checkpoint.save_tensors(
        os.path.join(out_dir, f"offsets_epoch{epoch:03d}.pssl"),
        {"offsets": off.data},
    )
