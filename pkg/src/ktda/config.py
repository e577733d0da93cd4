"""Run configuration: line-oriented key=value text with dotted sections.

One flat namespace covers every module; unknown keys are rejected so a
typo cannot silently fall back to a default. The resolved config is
serialized into each run directory, and its text is what the config hash
and checkpoint embedding use.
"""

from __future__ import annotations

import hashlib

from .data import DatasetSpec
from .losses import LossToggles, LossWeights
from .model import BackboneConfig, FamConfig, FmmConfig, ModelConfig, VtmConfig
from .train import OptimConfig, TrainSettings


class ConfigError(ValueError):
    pass


def _int_list(text):
    return tuple(int(x) for x in str(text).split(",") if x != "")


# key -> (default, parser, help)
DEFAULTS = {
    "run.seed": (0, int, "master seed for model init and batch order"),
    "engine.dtype": ("float32", str, "float width for training (float32|float64)"),
    "data.num_samples": (64, int, "synthetic dataset size"),
    "data.patch": (256, int, "square patch size in pixels"),
    "data.classes": (5, int, "number of coverage classes K"),
    "data.train_fraction": (0.8, float, "train share of the split"),
    "data.seed": (0, int, "dataset generation seed"),
    "data.noise_cells": (0, int, "noise lattice cells per axis; 0 = patch/8"),
    "model.channels": ("16,32,64,128", _int_list, "backbone stage channels"),
    "model.strides": ("2,2,2,2", _int_list, "backbone per-stage downsample factors"),
    "model.num_classes": (5, int, "segmentation classes K"),
    "model.use_fam": (True, None, "enable teacher + alignment + modulation path"),
    "model.fam_multi_scale": (True, None, "align all scales (else deepest only)"),
    "model.fmm_blocks": (4, int, "transformer blocks in the modulation stack"),
    "model.fmm_heads": (4, int, "attention heads in modulation blocks"),
    "model.fmm_share": (True, None, "share one block stack across scales"),
    "model.vtm_patch": (8, int, "teacher patch size"),
    "model.vtm_dim": (64, int, "teacher embedding dim (alignment target)"),
    "model.vtm_depth": (4, int, "teacher transformer depth"),
    "model.vtm_heads": (4, int, "teacher attention heads"),
    "model.vtm_taps": ("1,2,3,4", _int_list, "teacher layers supplying targets"),
    "model.vtm_seed": (1234, int, "teacher init seed (fixed across ablations)"),
    "loss.lambda_mse": (0.5, float, "feature MSE weight"),
    "loss.lambda_kl": (0.5, float, "feature KL weight"),
    "loss.lambda_ce": (1.0, float, "primary cross-entropy weight"),
    "loss.lambda_aux": (0.4, float, "auxiliary cross-entropy weight"),
    "loss.lambda_kt": (1.0, float, "knowledge-transfer group weight"),
    "loss.lambda_da": (1.0, float, "domain-adaptation group weight"),
    "loss.enable_mse": (True, None, "include the feature MSE term"),
    "loss.enable_kl": (True, None, "include the feature KL term"),
    "loss.enable_ce": (True, None, "include the primary CE term"),
    "loss.enable_aux": (True, None, "include the auxiliary CE term"),
    "loss.literal_mse": (False, None, "use unnormalized squared-L2 MSE variant"),
    "loss.ignore_index": (255, int, "mask value excluded from CE and metrics"),
    "optim.base_lr": (1e-3, float, "peak learning rate"),
    "optim.beta1": (0.9, float, "Adam first-moment decay"),
    "optim.beta2": (0.999, float, "Adam second-moment decay"),
    "optim.eps": (1e-8, float, "Adam denominator epsilon"),
    "optim.weight_decay": (0.01, float, "decoupled weight decay on weights"),
    "optim.warmup_iters": (100, int, "linear warmup length (desk scale)"),
    "optim.max_iters": (2000, int, "total iterations (desk scale)"),
    "optim.poly_power": (0.9, float, "polynomial decay exponent"),
    "optim.min_lr": (0.0, float, "decay floor"),
    "optim.grad_clip": (0.0, float, "global grad-norm clip; 0 disables"),
    "train.batch_size": (4, int, "samples per iteration"),
    "train.eval_every": (200, int, "eval cadence in iterations; 0 disables"),
    "train.checkpoint_every": (500, int, "checkpoint cadence; 0 disables"),
    "train.eval_split": ("test", str, "split evaluated during training"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_value(key, raw):
    default, parser, _ = DEFAULTS[key]
    if isinstance(raw, str):
        raw = raw.strip()
    if parser is None:  # boolean
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return parser(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({e})") from None


def default_config():
    return {k: _parse_value(k, v) for k, (v, _, _) in DEFAULTS.items()}


def parse_config_text(text, base=None):
    cfg = dict(base) if base is not None else default_config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        cfg[key] = _parse_value(key, raw)
    return cfg


def apply_overrides(cfg, overrides):
    """overrides: iterable of 'key=value' strings (e.g. from --set flags)."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key '{key}'")
        out[key] = _parse_value(key, raw)
    return out


def resolve(config_path=None, overrides=()):
    cfg = default_config()
    if config_path:
        with open(config_path) as f:
            cfg = parse_config_text(f.read(), base=cfg)
    return apply_overrides(cfg, overrides)


def serialize(cfg):
    """Stable text form: DEFAULTS order, one key=value per line."""
    lines = []
    for key in DEFAULTS:
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()[:12]


def describe_defaults():
    width = max(len(k) for k in DEFAULTS)
    rows = []
    for key, (default, _, help_text) in DEFAULTS.items():
        rows.append(f"{key:<{width}}  default={default!r:<16} {help_text}")
    return "\n".join(rows)


# -- construction of per-module configs --------------------------------------


def to_dataset_spec(cfg):
    return DatasetSpec(
        num_samples=cfg["data.num_samples"],
        patch=cfg["data.patch"],
        classes=cfg["data.classes"],
        train_fraction=cfg["data.train_fraction"],
        seed=cfg["data.seed"],
        noise_cells=cfg["data.noise_cells"] or None,
    )


def to_model_config(cfg):
    return ModelConfig(
        num_classes=cfg["model.num_classes"],
        use_fam=cfg["model.use_fam"],
        seed=cfg["run.seed"],
        backbone=BackboneConfig(
            channels=cfg["model.channels"], strides=cfg["model.strides"]
        ),
        vtm=VtmConfig(
            patch=cfg["model.vtm_patch"],
            dim=cfg["model.vtm_dim"],
            depth=cfg["model.vtm_depth"],
            heads=cfg["model.vtm_heads"],
            taps=cfg["model.vtm_taps"],
            seed=cfg["model.vtm_seed"],
        ),
        fam=FamConfig(multi_scale=cfg["model.fam_multi_scale"]),
        fmm=FmmConfig(
            blocks=cfg["model.fmm_blocks"],
            heads=cfg["model.fmm_heads"],
            share_weights=cfg["model.fmm_share"],
        ),
    )


def to_loss_weights(cfg):
    return LossWeights(
        lambda_mse=cfg["loss.lambda_mse"],
        lambda_kl=cfg["loss.lambda_kl"],
        lambda_ce=cfg["loss.lambda_ce"],
        lambda_aux=cfg["loss.lambda_aux"],
        lambda_kt=cfg["loss.lambda_kt"],
        lambda_da=cfg["loss.lambda_da"],
    )


def to_loss_toggles(cfg):
    return LossToggles(
        mse=cfg["loss.enable_mse"],
        kl=cfg["loss.enable_kl"],
        ce=cfg["loss.enable_ce"],
        aux=cfg["loss.enable_aux"],
    )


def to_optim_config(cfg):
    return OptimConfig(
        base_lr=cfg["optim.base_lr"],
        beta1=cfg["optim.beta1"],
        beta2=cfg["optim.beta2"],
        eps=cfg["optim.eps"],
        weight_decay=cfg["optim.weight_decay"],
        warmup_iters=cfg["optim.warmup_iters"],
        max_iters=cfg["optim.max_iters"],
        poly_power=cfg["optim.poly_power"],
        min_lr=cfg["optim.min_lr"],
        grad_clip=cfg["optim.grad_clip"],
    )


def to_train_settings(cfg):
    return TrainSettings(
        batch_size=cfg["train.batch_size"],
        seed=cfg["run.seed"],
        eval_every=cfg["train.eval_every"],
        checkpoint_every=cfg["train.checkpoint_every"],
        ignore_index=cfg["loss.ignore_index"],
        eval_split=cfg["train.eval_split"],
    )
