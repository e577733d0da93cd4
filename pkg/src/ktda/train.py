"""Optimization loop: AdamW with linear warmup + polynomial decay,
CSV logging, periodic evaluation, deterministic checkpoint/resume.

All stochasticity (batch order) derives from (seed, epoch) counters, so a
resumed run replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import batch_iter
from .losses import LOSS_CSV_HEADER, LossToggles, LossWeights, total_loss
from .metrics import METRIC_CSV_HEADER, ConfusionMatrix
from .tensor import Tensor

ALIGN_CSV_HEADER = "iter,cosine"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_iters: int = 100  # desk scale; full scale uses 1150/23000
    max_iters: int = 2000
    poly_power: float = 0.9
    min_lr: float = 0.0
    grad_clip: float = 0.0  # 0 disables global-norm clipping

    def __post_init__(self):
        if not 0 <= self.warmup_iters <= self.max_iters:
            raise ValueError("need 0 <= warmup_iters <= max_iters")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")


def lr_at(iteration, cfg: OptimConfig):
    """Linear warmup to base_lr, then polynomial decay to min_lr."""
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * (iteration + 1) / cfg.warmup_iters
    span = cfg.max_iters - cfg.warmup_iters
    progress = (iteration - cfg.warmup_iters) / span if span > 0 else 1.0
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * (1.0 - progress) ** cfg.poly_power


class AdamW:
    """Decoupled weight decay, then bias-corrected Adam update.

    Weight decay touches only parameters flagged for decay (weights, not
    biases or norm parameters); frozen parameters are never updated.
    """

    def __init__(self, registry, cfg: OptimConfig):
        self.registry = registry
        self.cfg = cfg
        self.step_count = 0
        self.m = {}
        self.v = {}
        for name, p in registry.trainable():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def clip_gradients(self):
        if self.cfg.grad_clip <= 0:
            return
        sq = 0.0
        for _, p in self.registry.trainable():
            if p.grad is not None:
                sq += float((p.grad**2).sum())
        norm = math.sqrt(sq)
        if norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
            for _, p in self.registry.trainable():
                if p.grad is not None:
                    p.grad *= scale

    def step(self, lr):
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.registry.trainable():
            if p.grad is None:
                raise ValueError(f"missing gradient on trainable parameter '{name}'")
            g = p.grad
            if cfg.weight_decay and self.registry.wants_decay(name):
                p.data -= lr * cfg.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays):
        for name in self.m:
            self.m[name] = arrays[f"optim.m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = arrays[f"optim.v.{name}"].astype(self.v[name].dtype, copy=True)


@dataclass
class TrainState:
    iteration: int = 0
    best_metric: float = -1.0
    seed: int = 0  # with iteration, fully determines the batch stream


@dataclass
class TrainSettings:
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 500
    ignore_index: int = 255
    eval_split: str = "test"


def save_checkpoint(path, model, optimizer, state: TrainState, config_text=""):
    records = {}
    for name, p in model.registry.items():
        records[f"param.{name}"] = p.data
    records.update(optimizer.state_arrays())
    records["state.iteration"] = np.array([state.iteration], dtype=np.int64)
    records["state.step_count"] = np.array([optimizer.step_count], dtype=np.int64)
    records["state.seed"] = np.array([state.seed], dtype=np.int64)
    records["state.best_metric"] = np.array([state.best_metric], dtype=np.float64)
    records["config"] = np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8).copy()
    ckpt.save(path, records)


def load_checkpoint(path, model, optimizer=None):
    records = ckpt.load(path)
    params = {
        name[len("param.") :]: arr for name, arr in records.items() if name.startswith("param.")
    }
    model.registry.load_state(params)
    state = TrainState(
        iteration=int(records["state.iteration"][0]),
        best_metric=float(records["state.best_metric"][0]),
        seed=int(records["state.seed"][0]),
    )
    if optimizer is not None:
        optimizer.load_state(
            {k: v for k, v in records.items() if k.startswith("optim.")}
        )
        optimizer.step_count = int(records["state.step_count"][0])
    config_text = records.get("config", np.zeros(0, np.uint8)).tobytes().decode("utf-8")
    return state, config_text


def checkpoint_config_text(path):
    records = ckpt.load(path)
    return records.get("config", np.zeros(0, np.uint8)).tobytes().decode("utf-8")


def _first_nan_term(bd):
    for term in ("mse", "kl", "kt", "ce", "aux", "da", "total"):
        if math.isnan(getattr(bd, term)):
            return term
    return None


def alignment_cosine(output):
    """Mean over scales of cos(F''_i, F_i^vtm), flattened per scale."""
    if output.aligned is None or output.teacher is None:
        return float("nan")
    vals = []
    for s, t in zip(output.aligned, output.teacher):
        a = s.data.reshape(-1)
        b = t.data.reshape(-1)
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        vals.append(float(a @ b / denom) if denom > 0 else 0.0)
    return float(np.mean(vals))


def evaluate(model, dataset, ids, batch_size=4, ignore_index=255):
    """Confusion-matrix evaluation over the given ids."""
    cm = ConfusionMatrix(model.cfg.num_classes)
    with T.no_grad():
        for lo in range(0, len(ids), batch_size):
            chunk = ids[lo : lo + batch_size]
            images, masks = dataset.batch_arrays(chunk)
            out = model.forward(Tensor(images))
            pred = out.logits.data.argmax(axis=1)
            cm.add(pred, masks, ignore_index)
    return cm


def freeze_idle_heads(model, toggles: LossToggles):
    """Heads excluded from the objective receive no gradients; freeze their
    parameters so the optimizer skips them for this run."""
    prefixes = []
    if not toggles.aux:
        prefixes.append("aux.")
    if not toggles.ce:
        prefixes.extend(["decoder.", "fmm."])
    for name, _ in model.registry.items():
        if any(name.startswith(p) for p in prefixes):
            model.registry.freeze(name)


def train_loop(
    model,
    dataset,
    weights: LossWeights,
    toggles: LossToggles,
    optim_cfg: OptimConfig,
    settings: TrainSettings,
    out_dir,
    resume_from=None,
    config_text="",
    quiet=False,
):
    """Runs to optim_cfg.max_iters; returns (state, history dict)."""
    os.makedirs(out_dir, exist_ok=True)
    freeze_idle_heads(model, toggles)
    optimizer = AdamW(model.registry, optim_cfg)
    state = TrainState(seed=settings.seed)
    if resume_from:
        state, _ = load_checkpoint(resume_from, model, optimizer)

    train_ids = dataset.ids("train")
    eval_ids = dataset.ids(settings.eval_split)
    batches_per_epoch = math.ceil(len(train_ids) / settings.batch_size)

    mode = "a" if resume_from else "w"
    loss_csv = open(os.path.join(out_dir, "loss.csv"), mode)
    metric_csv = open(os.path.join(out_dir, "metrics.csv"), mode)
    align_csv = open(os.path.join(out_dir, "alignment.csv"), mode)
    if not resume_from:
        loss_csv.write(LOSS_CSV_HEADER + "\n")
        metric_csv.write(METRIC_CSV_HEADER + "\n")
        align_csv.write(ALIGN_CSV_HEADER + "\n")

    history = {"loss": [], "eval": []}
    track_alignment = model.cfg.use_fam

    def batch_for(iteration):
        epoch, offset = divmod(iteration, batches_per_epoch)
        for i, chunk in enumerate(batch_iter(train_ids, settings.batch_size, state.seed, epoch)):
            if i == offset:
                return chunk
        raise AssertionError("batch offset out of range")

    try:
        for iteration in range(state.iteration, optim_cfg.max_iters):
            sids = batch_for(iteration)
            images, masks = dataset.batch_arrays(sids)
            model.zero_grad()
            out = model.forward(Tensor(images))
            bd = total_loss(
                out, masks, weights, toggles, ignore_index=settings.ignore_index
            )
            nan_term = _first_nan_term(bd)
            if nan_term is not None:
                raise TrainingDiverged(
                    f"NaN detected in loss term '{nan_term}' at iteration {iteration}"
                )
            bd.total_tensor.backward()
            optimizer.clip_gradients()
            optimizer.step(lr_at(iteration, optim_cfg))

            loss_csv.write(bd.csv_row(iteration) + "\n")
            bd.total_tensor = None  # drop the graph so history stays small
            history["loss"].append((iteration, bd))
            if track_alignment:
                align_csv.write(f"{iteration},{alignment_cosine(out):.17g}\n")

            done = iteration + 1
            if settings.eval_every and (done % settings.eval_every == 0 or done == optim_cfg.max_iters):
                cm = evaluate(
                    model, dataset, eval_ids, settings.batch_size, settings.ignore_index
                )
                summary = cm.summary()
                metric_csv.write(
                    f"{done},{summary['miou']:.17g},{summary['oa']:.17g},{summary['f1']:.17g}\n"
                )
                history["eval"].append((done, summary))
                if summary["miou"] > state.best_metric:
                    state.best_metric = summary["miou"]
                    state.iteration = done
                    save_checkpoint(
                        os.path.join(out_dir, "best.ckpt"), model, optimizer, state, config_text
                    )
                if not quiet:
                    print(
                        f"iter {done}: total={bd.total:.4f} "
                        f"miou={summary['miou']:.4f} oa={summary['oa']:.4f}"
                    )
            if settings.checkpoint_every and done % settings.checkpoint_every == 0:
                state.iteration = done
                save_checkpoint(
                    os.path.join(out_dir, "latest.ckpt"), model, optimizer, state, config_text
                )
        state.iteration = optim_cfg.max_iters
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model, optimizer, state, config_text)
    finally:
        loss_csv.close()
        metric_csv.close()
        align_csv.close()
    return state, history
