"""Command-line surface: synth | surrogate | train | eval | embed | gradcheck.

Every config key is also a ``--key value`` flag; flags override values from
``--config FILE``.  Exit codes: 2 for an unknown config key or bad value,
3 for a missing input file, 1 for any other failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad, checkpoint, evaluation, surrogate, synth, trainer
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, ConfigKeyError
from .model import ReidModel

log = logging.getLogger(__name__)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="V")


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).exists():
            raise FileNotFoundError(args.config)
        cfg = load_config(args.config)
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(RunConfig)
        if getattr(args, f"cfg_{f.name}", None) is not None
    }
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _require(path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{kind}: {path}")
    return p


def _dataset_spec(cfg: RunConfig) -> synth.SyntheticDatasetSpec:
    return synth.SyntheticDatasetSpec(
        num_identities=cfg.identities,
        cameras=cfg.cameras,
        images_per_identity_per_camera=cfg.images_per_identity,
        image_hw=(cfg.image_h, cfg.image_w),
        seed=cfg.data_seed,
        camera_nuisance=cfg.camera_nuisance,
    )


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    records = synth.generate_dataset(_dataset_spec(cfg), args.out)
    print(f"wrote {len(records)} images under {args.out}")
    return 0


def cmd_surrogate(args) -> int:
    cfg = _resolve_config(args)
    data = _require(args.data, "dataset directory")
    records = [r for r in synth.load_manifest(data) if r.split == "train"]
    patches = []
    for i, rec in enumerate(records):
        img = synth.read_raster(data / rec.path)
        u8 = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        patches.extend(surrogate.sample_patches(u8, source_image=i))
    sets = surrogate.build_patch_sets(patches, cfg.transforms_per_patch, cfg.surrogate_seed)
    catalog = surrogate.build_catalog(sets, cfg.surrogate_classes, seed=cfg.surrogate_seed)
    manifest, blob = surrogate.save_catalog(catalog, args.out)
    print(f"catalog: {len(sets)} patch sets -> {catalog.num_classes} classes "
          f"({manifest.name}, {blob.name})")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _require(args.data, "dataset directory")
    _require(str(Path(args.catalog).with_suffix(".txt")), "surrogate catalog")
    resume = None
    if args.resume:
        resume = str(_require(args.resume, "checkpoint"))
    result = trainer.train(cfg, args.data, args.catalog, args.out, init_checkpoint=resume)
    tail = result.metrics[-1] if result.metrics else {}
    status = "aborted" if result.aborted else "done"
    print(f"train {status}: {len(result.metrics)} epochs, "
          f"rank1={tail.get('rank1', 0.0):.3f} mAP={tail.get('mAP', 0.0):.3f} "
          f"pair_precision={tail.get('pair_precision', 0.0):.3f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 1 if result.aborted else 0


def _load_model(cfg: RunConfig, ckpt_path) -> ReidModel:
    blob = checkpoint.load_tensors(ckpt_path)
    num_classes = blob["align/cls/w"].shape[0]  # class count travels with the weights
    model = ReidModel(int(num_classes), trainer._model_config(cfg), seed=cfg.model_seed)
    model.load(ckpt_path)
    return model


def _embed_split(model, data, records) -> np.ndarray:
    images = synth.load_images(data, records)
    return trainer._embed_all(model, images)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    data = _require(args.data, "dataset directory")
    ckpt = _require(args.checkpoint, "checkpoint")
    model = _load_model(cfg, ckpt)
    records = synth.load_manifest(data)
    queries = [r for r in records if r.split == "query"]
    gallery = [r for r in records if r.split == "gallery"]
    if not queries or not gallery:
        raise ConfigError("dataset has no query/gallery split to evaluate")
    qe = _embed_split(model, data, queries)
    ge = _embed_split(model, data, gallery)
    report, results = evaluation.evaluate(
        qe, np.array([r.identity for r in queries]), np.array([r.camera for r in queries]),
        ge, np.array([r.identity for r in gallery]), np.array([r.camera for r in gallery]),
    )
    if args.rerank or cfg.eval_rerank:
        g_images = synth.load_images(data, gallery)
        q_images = synth.load_images(data, queries)
        scorer = _alignment_scorer(model, q_images, g_images)
        results = evaluation.rerank_top(results, scorer, top_r=cfg.rerank_top)
        report = evaluation.report_from_results(results, report.num_skipped)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(report, out, results if args.ranked_lists else None)
    print(f"rank1={report.rank1:.4f} mAP={report.map:.4f} "
          f"({report.num_queries} queries, {report.num_skipped} skipped)")
    return 0


def _alignment_scorer(model, q_images, g_images):
    """Pair score for reranking: cosine between the query block and the
    gallery block warped onto it by the offset/deformable path."""
    from . import alignment

    cache: dict[tuple[int, int], float] = {}

    def score(qi: int, gi: int) -> float:
        key = (qi, gi)
        if key not in cache:
            u = model.features(ad.constant(np.stack([q_images[qi], g_images[gi]])))
            u_q = ad.constant(u.data[0])
            u_g = ad.constant(u.data[1])
            warped, _ = alignment.align_pair(u_q, u_g, model.deform_w, model.offsets)
            a = u.data[0].reshape(-1)
            b = warped.data.reshape(-1)
            denom = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
            cache[key] = float(a @ b / denom)
        return cache[key]

    return score


def cmd_embed(args) -> int:
    cfg = _resolve_config(args)
    data = _require(args.data, "dataset directory")
    ckpt = _require(args.checkpoint, "checkpoint")
    model = _load_model(cfg, ckpt)
    records = synth.load_manifest(data)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    if not records:
        raise ConfigError(f"no records in split {args.split!r}")
    embeds = _embed_split(model, data, records)
    blob = {"embeddings": embeds,
            "identities": np.array([r.identity for r in records], dtype=np.float64),
            "cameras": np.array([r.camera for r in records], dtype=np.float64)}
    checkpoint.save_tensors(args.out, blob)
    print(f"wrote {len(records)} embeddings ({embeds.shape[1]}-d) to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    ok, _results, _elapsed = gradcheck.run_battery(seed=args.seed, instances=args.instances)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reidlab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("surrogate", help="build the surrogate-class catalog")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="catalog path prefix")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_surrogate)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--data", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--ranked-lists", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="dump embeddings for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all",
                   choices=["all", "train", "query", "gallery"])
    _add_config_flags(p)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigKeyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
