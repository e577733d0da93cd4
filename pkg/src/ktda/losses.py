"""Objective terms: feature MSE + KL (knowledge transfer), primary +
auxiliary cross-entropy (domain adaptation), and their weighted total.

Default weighting: 0.5*mse + 0.5*kl for the transfer term, ce + 0.4*aux for
the adaptation term, and the two groups summed with unit weights. Every
term can be toggled off; a disabled term never enters the backward graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE_INDEX = 255

LOSS_CSV_HEADER = "iter,mse,kl,kt,ce,aux,da,total"


@dataclass
class LossWeights:
    lambda_mse: float = 0.5
    lambda_kl: float = 0.5
    lambda_ce: float = 1.0
    lambda_aux: float = 0.4
    lambda_kt: float = 1.0
    lambda_da: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass
class LossToggles:
    mse: bool = True
    kl: bool = True
    ce: bool = True
    aux: bool = True

    def any_enabled(self):
        return self.mse or self.kl or self.ce or self.aux


@dataclass
class LossBreakdown:
    mse: float = 0.0
    kl: float = 0.0
    kt: float = 0.0
    ce: float = 0.0
    aux: float = 0.0
    da: float = 0.0
    total: float = 0.0
    enabled: dict = field(default_factory=dict)
    degenerate_batch: bool = False
    total_tensor: Tensor | None = None

    def csv_row(self, iteration):
        vals = [self.mse, self.kl, self.kt, self.ce, self.aux, self.da, self.total]
        return f"{iteration}," + ",".join(f"{v:.17g}" for v in vals)


def _check_pyramids(student, teacher, op):
    if len(student) != len(teacher):
        raise T.ShapeError(f"{op}: pyramid lengths differ ({len(student)} vs {len(teacher)})")
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise T.ShapeError(f"{op}: scale shapes differ ({s.shape} vs {t.shape})")


def mse_loss(student, teacher, literal_sum=False):
    """Mean squared feature distance, averaged over scales.

    Per scale this is the per-element mean of (F'' - F_vtm)^2, which keeps
    the value resolution-invariant; literal_sum=True instead keeps the raw
    squared L2 norm per scale.
    """
    _check_pyramids(student, teacher, "mse_loss")
    total = None
    for s, t in zip(student, teacher):
        d = s - t.detach() if isinstance(t, Tensor) else s - t
        sq = d * d
        term = sq.sum() if literal_sum else sq.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(student))


def kl_loss(student, teacher):
    """KL(student || teacher) between channel-softmax distributions, averaged
    over spatial locations and scales. No gradient reaches the teacher."""
    _check_pyramids(student, teacher, "kl_loss")
    total = None
    for s, t in zip(student, teacher):
        log_p = T.log_softmax(s, axis=1)
        p = T.softmax(s, axis=1)
        log_q = T.log_softmax(t.detach(), axis=1)
        per_loc = (p * (log_p - log_q)).sum(axis=1)  # [B,H,W]
        term = per_loc.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(student))


def kt_loss(student, teacher, w: LossWeights, toggles: LossToggles | None = None):
    """Knowledge transfer term: lambda_mse * mse + lambda_kl * kl."""
    toggles = toggles or LossToggles()
    parts = []
    if toggles.mse:
        parts.append(mse_loss(student, teacher) * w.lambda_mse)
    if toggles.kl:
        parts.append(kl_loss(student, teacher) * w.lambda_kl)
    if not parts:
        return None
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def ce_loss(logits, target, ignore_index=IGNORE_INDEX):
    """Mean pixelwise cross-entropy: -log softmax(logits)[target class].

    target holds integer class ids [B,H,W]; pixels equal to ignore_index are
    skipped. With zero scored pixels the loss is 0 and the second return
    flags the batch as degenerate.
    """
    target = np.asarray(target)
    b, k, h, w = logits.shape
    if target.shape != (b, h, w):
        raise T.ShapeError(f"ce_loss: target {target.shape} vs logits {logits.shape}")
    valid = target != ignore_index
    if np.any((target >= k) & valid) or np.any(target < 0):
        bad = int(target[valid & ((target >= k) | (target < 0))][0])
        raise ValueError(f"ce_loss: class id {bad} out of range [0, {k})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0), True
    onehot = np.zeros((b, k, h, w), dtype=logits.data.dtype)
    bb, yy, xx = np.nonzero(valid)
    onehot[bb, target[valid], yy, xx] = 1.0
    log_p = T.log_softmax(logits, axis=1)
    loss = (log_p * Tensor(onehot)).sum() * (-1.0 / n_valid)
    return loss, False


def da_loss(logits, logits_aux, target, w: LossWeights, toggles: LossToggles | None = None,
            ignore_index=IGNORE_INDEX):
    """Domain adaptation term: lambda_ce * CE(primary) + lambda_aux * CE(aux)."""
    toggles = toggles or LossToggles()
    parts = []
    degenerate = False
    if toggles.ce:
        ce, deg = ce_loss(logits, target, ignore_index)
        degenerate |= deg
        parts.append(ce * w.lambda_ce)
    if toggles.aux:
        aux, deg = ce_loss(logits_aux, target, ignore_index)
        degenerate |= deg
        parts.append(aux * w.lambda_aux)
    if not parts:
        return None, degenerate
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out, degenerate


def total_loss(output, target, w: LossWeights, toggles: LossToggles | None = None,
               ignore_index=IGNORE_INDEX, literal_mse=False):
    """Composite objective over a SegOutput; returns a LossBreakdown whose
    total_tensor is the graph node to backpropagate.

    Disabled terms are never built, so no zero-multiplied dead branches
    appear in the graph; their reported value is exactly 0.
    """
    toggles = toggles or LossToggles()
    if not toggles.any_enabled():
        raise ValueError("total_loss: all loss terms are disabled")
    has_features = output.aligned is not None and output.teacher is not None
    bd = LossBreakdown(
        enabled={
            "mse": toggles.mse and has_features,
            "kl": toggles.kl and has_features,
            "ce": toggles.ce,
            "aux": toggles.aux,
        }
    )

    kt_parts = []
    if bd.enabled["mse"]:
        mse = mse_loss(output.aligned, output.teacher, literal_sum=literal_mse)
        bd.mse = mse.item()
        kt_parts.append(mse * w.lambda_mse)
    if bd.enabled["kl"]:
        kl = kl_loss(output.aligned, output.teacher)
        bd.kl = kl.item()
        kt_parts.append(kl * w.lambda_kl)

    da_parts = []
    if bd.enabled["ce"]:
        ce, deg = ce_loss(output.logits, target, ignore_index)
        bd.ce = ce.item()
        bd.degenerate_batch |= deg
        da_parts.append(ce * w.lambda_ce)
    if bd.enabled["aux"]:
        aux, deg = ce_loss(output.logits_aux, target, ignore_index)
        bd.aux = aux.item()
        bd.degenerate_batch |= deg
        da_parts.append(aux * w.lambda_aux)

    total = None
    if kt_parts:
        kt = kt_parts[0]
        for p in kt_parts[1:]:
            kt = kt + p
        bd.kt = kt.item()
        total = kt * w.lambda_kt
    if da_parts:
        da = da_parts[0]
        for p in da_parts[1:]:
            da = da + p
        bd.da = da.item()
        total = da * w.lambda_da if total is None else total + da * w.lambda_da
    if total is None:
        # feature terms were requested but the model ran without FAM
        raise ValueError("total_loss: no enabled term is computable for this model output")
    bd.total = total.item()
    bd.total_tensor = total
    return bd
