"""Flat plain-text configuration.

One ``key = value`` per line, ``#`` comments, unknown keys are hard errors
(exit code 2 at the CLI).  Every key has a declared type and default; CLI
flags mirror keys one-to-one (``--batch_size 32``) and override file values.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError, ConfigKeyError


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    # dataset
    identities: int = 10
    cameras: int = 3
    images_per_identity: int = 8
    image_h: int = 32
    image_w: int = 16
    camera_nuisance: float = 0.55
    data_seed: int = 0
    # surrogate classes
    surrogate_classes: int = 32
    transforms_per_patch: int = 64
    surrogate_seed: int = 0
    # model
    embed_dim: int = 64
    attn_heads: int = 4
    attn_hidden: int = 64
    sa_hidden: int = 32
    sa_dim: int = 16
    adv_hidden: int = 32
    adv_dim: int = 16
    deform_kernel: int = 3
    use_nonlocal: bool = True
    model_seed: int = 0
    # objective
    lambda1: float = 0.015
    lambda2: float = 2.5
    gs_weight: float = 1.0
    alpha: float = 2.0
    delta: float = 0.25
    beta: float = 0.5
    grl_lambda: float = 1.0
    n_reinit: int = 500
    gs_l2: bool = False
    sa_weight_decay: float = 0.0
    # schedule
    batch_size: int = 64
    lr_start: float = 0.05
    lr_after: float = 0.005
    lr_decay_epoch: int = 40
    epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 0.0005
    stage: str = "finetune_full"
    train_seed: int = 0
    snapshot_interval: int = 2
    # augmentation
    flip_p: float = 0.5
    erase_p: float = 0.5
    erase_area_lo: float = 0.02
    erase_area_hi: float = 0.2
    # diagnostics
    dump_gates: bool = False
    dump_offsets: bool = False
    eval_rerank: bool = False
    rerank_top: int = 20

    def validate(self) -> None:
        if self.stage not in ("pretrain_GS", "finetune_full"):
            raise ConfigError(f"stage must be pretrain_GS or finetune_full, got {self.stage!r}")
        if not (self.lr_start > self.lr_after > 0):
            raise ConfigError("need lr_start > lr_after > 0")
        if self.epochs < 0 or self.lr_decay_epoch < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.gs_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.flip_p <= 1 or not 0 <= self.erase_p <= 1:
            raise ConfigError("augmentation probabilities must lie in [0, 1]")
        if not 0 < self.erase_area_lo <= self.erase_area_hi < 1:
            raise ConfigError("erase area range must satisfy 0 < lo <= hi < 1")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigKeyError(key)
    ftype = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if ftype == "bool":
            return _bool(text)
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        updates[key] = parse_value(key, value)
    return replace(cfg, **updates)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings (or a mapping) on top of a config."""
    if not isinstance(overrides, dict):
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        overrides = pairs
    return replace(cfg, **{k: parse_value(k, v) for k, v in overrides.items()})


def config_text(cfg: RunConfig) -> str:
    """Serialize back to the file format (used for checkpoint provenance)."""
    return "\n".join(f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)) + "\n"
