"""Finite-difference audit of every differentiable op and composite loss.

Runs in 64-bit mode; elementwise ops must agree with central differences to
1e-6 relative error, structured ops to 1e-4, and the full model objective
(checked on a sampled parameter subset) to 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import LossToggles, LossWeights, ce_loss, da_loss, kl_loss, kt_loss, mse_loss, total_loss
from .model import BackboneConfig, FamConfig, FmmConfig, ModelConfig, Segmenter, VtmConfig
from .nn import Linear, MultiHeadSelfAttention, TransformerBlock
from .tensor import Tensor, gradcheck

ELEMENTWISE_TOL = 1e-6
STRUCTURED_TOL = 1e-4
FULL_MODEL_TOL = 1e-3


def _t(rng, *shape, shift=0.0, scale=1.0, grad=True):
    return Tensor(rng.standard_normal(shape) * scale + shift, requires_grad=grad)


def _away_from_kink(x, margin=5e-2):
    x.data = np.where(np.abs(x.data) < margin, x.data + 2 * margin, x.data)
    return x


def audit_checks(seed=0):
    """Yields (name, callable) pairs; each callable returns a GradCheckReport."""
    rng = np.random.default_rng(seed)

    def elementwise():
        for name, f in (
            ("add", lambda a, b: (a + b).sum()),
            ("sub", lambda a, b: (a - b).sum()),
            ("mul", lambda a, b: (a * b).sum()),
            ("div", lambda a, b: (a / b).sum()),
        ):
            yield name, lambda f=f, name=name: gradcheck(
                f,
                [_t(rng, 3, 4), _t(rng, 3, 4, shift=3.0)],
                name=name,
                tol=ELEMENTWISE_TOL,
            )
        yield "relu", lambda: gradcheck(
            lambda x: (T.relu(x) * T.relu(x)).sum(),
            [_away_from_kink(_t(rng, 3, 4))],
            name="relu",
            tol=ELEMENTWISE_TOL,
        )
        yield "gelu", lambda: gradcheck(
            lambda x: (T.gelu(x) * T.gelu(x)).sum(), [_t(rng, 3, 4)], name="gelu",
            tol=ELEMENTWISE_TOL,
        )
        yield "exp", lambda: gradcheck(
            lambda x: T.exp(x).sum(), [_t(rng, 3, 4)], name="exp", tol=ELEMENTWISE_TOL
        )
        yield "log", lambda: gradcheck(
            lambda x: T.log(x).sum(), [_t(rng, 3, 4, shift=4.0)], name="log",
            tol=ELEMENTWISE_TOL,
        )
        yield "sqrt", lambda: gradcheck(
            lambda x: T.sqrt(x).sum(), [_t(rng, 3, 4, shift=4.0)], name="sqrt",
            tol=ELEMENTWISE_TOL,
        )

    yield from elementwise()

    yield "matmul", lambda: gradcheck(
        lambda a, b: ((a @ b) * (a @ b)).sum(),
        [_t(rng, 4, 5), _t(rng, 5, 3)],
        name="matmul",
        tol=STRUCTURED_TOL,
    )
    yield "matmul_batched", lambda: gradcheck(
        lambda a, b: ((a @ b) * (a @ b)).sum(),
        [_t(rng, 2, 3, 4), _t(rng, 4, 3)],
        name="matmul_batched",
        tol=STRUCTURED_TOL,
    )
    yield "sum_axis", lambda: gradcheck(
        lambda x: (x.sum(axis=1) * x.sum(axis=1)).sum(), [_t(rng, 3, 4)],
        name="sum_axis", tol=ELEMENTWISE_TOL,
    )
    yield "mean_axes", lambda: gradcheck(
        lambda x: (x.mean(axis=(1, 3)) ** 2.0).sum(), [_t(rng, 2, 3, 2, 3)],
        name="mean_axes", tol=ELEMENTWISE_TOL,
    )
    yield "reshape_transpose", lambda: gradcheck(
        lambda x: (x.reshape(2, 6).transpose(1, 0) ** 2.0).sum(), [_t(rng, 2, 3, 2)],
        name="reshape_transpose", tol=ELEMENTWISE_TOL,
    )
    yield "concat_split", lambda: gradcheck(
        lambda a, b: (T.split(T.concat([a, b], axis=0), 2, axis=0)[0] ** 2.0).sum(),
        [_t(rng, 2, 3), _t(rng, 2, 3)],
        name="concat_split", tol=ELEMENTWISE_TOL,
    )
    yield "softmax", lambda: gradcheck(
        lambda x: (T.softmax(x, axis=1) ** 2.0).sum(), [_t(rng, 3, 5)],
        name="softmax", tol=STRUCTURED_TOL,
    )
    yield "log_softmax", lambda: gradcheck(
        lambda x: (T.log_softmax(x, axis=1) ** 2.0).sum(), [_t(rng, 3, 5)],
        name="log_softmax", tol=STRUCTURED_TOL,
    )
    yield "layer_norm", lambda: gradcheck(
        lambda x, g, b: (T.layer_norm(x, g, b) ** 2.0).sum(),
        [_t(rng, 2, 6), _t(rng, 6), _t(rng, 6)],
        name="layer_norm", tol=STRUCTURED_TOL,
    )
    yield "conv2d", lambda: gradcheck(
        lambda x, w, b: (T.conv2d(x, w, b, pad=1) ** 2.0).sum(),
        [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3, scale=0.5), _t(rng, 4)],
        name="conv2d", tol=STRUCTURED_TOL,
    )
    yield "conv2d_strided", lambda: gradcheck(
        lambda x, w: (T.conv2d(x, w, stride=2) ** 2.0).sum(),
        [_t(rng, 1, 2, 7, 7), _t(rng, 3, 2, 3, 3, scale=0.5)],
        name="conv2d_strided", tol=STRUCTURED_TOL,
    )
    yield "bilinear_up", lambda: gradcheck(
        lambda x: (T.bilinear_resize(x, 7, 6) ** 2.0).sum(), [_t(rng, 1, 2, 3, 3)],
        name="bilinear_up", tol=STRUCTURED_TOL,
    )
    yield "bilinear_down", lambda: gradcheck(
        lambda x: (T.bilinear_resize(x, 2, 2) ** 2.0).sum(), [_t(rng, 1, 2, 5, 5)],
        name="bilinear_down", tol=STRUCTURED_TOL,
    )

    def layer_checks():
        lin = Linear(5, 3, np.random.default_rng(seed + 1))
        yield "linear", lambda: gradcheck(
            lambda x, w, b: (lin(x) ** 2.0).sum(),
            [_t(rng, 2, 5), lin.w, lin.b],
            name="linear", tol=STRUCTURED_TOL,
        )
        attn = MultiHeadSelfAttention(8, 2, np.random.default_rng(seed + 2))
        yield "mhsa", lambda: gradcheck(
            lambda x: (attn(x) ** 2.0).sum(), [_t(rng, 1, 4, 8)],
            name="mhsa", tol=STRUCTURED_TOL,
        )
        block = TransformerBlock(6, 2, np.random.default_rng(seed + 3))
        yield "transformer_block", lambda: gradcheck(
            lambda x: (block(x) ** 2.0).sum(), [_t(rng, 1, 3, 6)],
            name="transformer_block", tol=STRUCTURED_TOL,
        )

    yield from layer_checks()

    def loss_checks():
        w = LossWeights()
        teach = [_t(rng, 1, 3, 2, 2, grad=False) for _ in range(2)]
        yield "loss_mse", lambda: gradcheck(
            lambda a, b: mse_loss([a, b], teach),
            [_t(rng, 1, 3, 2, 2), _t(rng, 1, 3, 2, 2)],
            name="loss_mse", tol=1e-5,
        )
        yield "loss_kl", lambda: gradcheck(
            lambda a, b: kl_loss([a, b], teach),
            [_t(rng, 1, 3, 2, 2), _t(rng, 1, 3, 2, 2)],
            name="loss_kl", tol=1e-5,
        )
        yield "loss_kt", lambda: gradcheck(
            lambda a, b: kt_loss([a, b], teach, w),
            [_t(rng, 1, 3, 2, 2), _t(rng, 1, 3, 2, 2)],
            name="loss_kt", tol=1e-5,
        )
        target = np.random.default_rng(seed + 4).integers(0, 4, (1, 3, 3))
        yield "loss_ce", lambda: gradcheck(
            lambda l: ce_loss(l, target)[0], [_t(rng, 1, 4, 3, 3)],
            name="loss_ce", tol=1e-5,
        )
        yield "loss_da", lambda: gradcheck(
            lambda l, a: da_loss(l, a, target, w)[0],
            [_t(rng, 1, 4, 3, 3), _t(rng, 1, 4, 3, 3)],
            name="loss_da", tol=1e-5,
        )

    yield from loss_checks()

    def full_model_check():
        cfg = ModelConfig(
            num_classes=3,
            seed=seed,
            backbone=BackboneConfig(channels=(4, 8), strides=(2, 2)),
            vtm=VtmConfig(patch=8, dim=8, depth=2, heads=2, taps=(1, 2), seed=77),
            fam=FamConfig(),
            fmm=FmmConfig(blocks=1, heads=2),
        )
        model = Segmenter(cfg)
        x = Tensor(np.random.default_rng(seed + 5).random((1, 3, 16, 16)))
        y = np.random.default_rng(seed + 6).integers(0, 3, (1, 16, 16))
        names = [n for n, _ in model.registry.trainable()]
        pick = np.random.default_rng(seed + 7).choice(len(names), 8, replace=False)
        params = [model.registry.get(names[i]) for i in pick]

        def f(*ps):
            out = model.forward(x)
            return total_loss(out, y, LossWeights(), LossToggles()).total_tensor

        return gradcheck(f, params, name="full_model_eq9", tol=FULL_MODEL_TOL, max_coords=4)

    yield "full_model_eq9", full_model_check


def run_audit(seed=0, verbose=True):
    """Executes every check in 64-bit mode; returns the report list."""
    reports = []
    with T.precision("float64"):
        for name, check in audit_checks(seed):
            rep = check()
            reports.append(rep)
            if verbose:
                status = "PASS" if rep.passed else "FAIL"
                print(f"  {status}  {rep.op_name:<20} max_rel={rep.max_rel_error:.3e} "
                      f"tol={rep.tolerance:.0e}")
    return reports
