"""Full segmentation architecture: CNN student backbone, frozen transformer
teacher, feature alignment (FAM), feature modulation (FMM), dual heads.

The teacher is a deterministic, seeded, randomly initialized ViT encoder.
It stands in for a large pretrained model: its parameters never receive
gradients and its forward pass runs outside the autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, ParamRegistry, TransformerBlock
from .tensor import Tensor


@dataclass
class BackboneConfig:
    channels: tuple = (16, 32, 64, 128)
    strides: tuple = (2, 2, 2, 2)  # downsample factor per stage

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ValueError(f"invalid backbone channels {self.channels}")
        if len(self.strides) != len(self.channels):
            raise ValueError("strides and channels must have equal length")

    @property
    def num_scales(self):
        return len(self.channels)

    @property
    def total_stride(self):
        return int(np.prod(self.strides))


@dataclass
class VtmConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    taps: tuple = (1, 2, 3, 4)
    seed: int = 1234

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        if list(self.taps) != sorted(set(self.taps)) or any(
            t < 1 or t > self.depth for t in self.taps
        ):
            raise ValueError(f"tap layers {self.taps} must be strictly increasing in [1, depth]")
        if self.dim % self.heads:
            raise ValueError(f"teacher dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class FamConfig:
    multi_scale: bool = True


@dataclass
class FmmConfig:
    blocks: int = 4
    heads: int = 4
    share_weights: bool = True

    def __post_init__(self):
        if self.blocks < 0:
            raise ValueError("fmm blocks must be >= 0")


@dataclass
class ModelConfig:
    num_classes: int = 5
    use_fam: bool = True
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vtm: VtmConfig = field(default_factory=VtmConfig)
    fam: FamConfig = field(default_factory=FamConfig)
    fmm: FmmConfig = field(default_factory=FmmConfig)


@dataclass
class SegOutput:
    logits: Tensor  # [B,K,H,W] primary head
    logits_aux: Tensor  # [B,K,H,W] auxiliary head
    aligned: list | None  # student features after FAM, teacher geometry
    modulated: list | None  # aligned features after the FMM stack
    teacher: list | None  # frozen teacher features, constants


def _avg_pool(x, factor):
    """Exact 2x2 (or fxf) mean pooling via reshape; stays differentiable."""
    if factor == 1:
        return x
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise T.ShapeError(f"pool: size {h}x{w} not divisible by factor {factor}")
    return x.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


class _Stage:
    """One backbone stage: downsample, then two 3x3 convs with ReLU."""

    def __init__(self, c_in, c_out, factor, rng):
        self.factor = factor
        self.conv1 = Conv2d(c_in, c_out, 3, rng, pad=1)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, pad=1)

    def __call__(self, x):
        x = _avg_pool(x, self.factor)
        x = T.relu(self.conv1(x))
        return T.relu(self.conv2(x))

    def params(self, prefix):
        yield from self.conv1.params(f"{prefix}.conv1")
        yield from self.conv2.params(f"{prefix}.conv2")


class Backbone:
    def __init__(self, cfg: BackboneConfig, in_channels, rng):
        self.cfg = cfg
        self.stages = []
        c_prev = in_channels
        for c, s in zip(cfg.channels, cfg.strides):
            self.stages.append(_Stage(c_prev, c, s, rng))
            c_prev = c

    def __call__(self, x):
        _, _, h, w = x.shape
        if h % self.cfg.total_stride or w % self.cfg.total_stride:
            raise T.ShapeError(
                f"backbone: input {h}x{w} not divisible by total stride {self.cfg.total_stride}"
            )
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid

    def params(self, prefix):
        for i, stage in enumerate(self.stages):
            yield from stage.params(f"{prefix}.stage{i}")


def sincos_position_grid(gh, gw, dim, dtype):
    """Fixed 2-D sine/cosine position features [1, gh*gw, dim]."""
    quarter = dim // 4
    omega = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * omega[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    pos = np.concatenate(parts, axis=1)
    if pos.shape[1] < dim:  # dim not divisible by 4: zero-pad the tail
        pos = np.pad(pos, ((0, 0), (0, dim - pos.shape[1])))
    return pos[None].astype(dtype)


class VtmEncoder:
    """Frozen toy vision-transformer teacher.

    Patch embedding is a fan-in-scaled linear map over flattened, centered
    pxp patches; position information is a small fixed sinusoidal term, so
    features stay content-dominated (as with a pretrained encoder) and the
    teacher accepts any input size whose sides divide by the patch.
    """

    POS_SCALE = 0.25

    def __init__(self, cfg: VtmConfig, in_channels=3):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 7])
        fan_in = in_channels * cfg.patch * cfg.patch
        self.embed = Linear(fan_in, cfg.dim, rng, std=1.0 / math.sqrt(fan_in))
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]

    def token_grid(self, h, w):
        p = self.cfg.patch
        if h % p or w % p:
            raise T.ShapeError(f"teacher: input {h}x{w} not divisible by patch {p}")
        return h // p, w // p

    def __call__(self, x):
        """Returns the tap-layer feature maps, each [B, dim, gh, gw]."""
        b, c, h, w = x.shape
        gh, gw = self.token_grid(h, w)
        p, d = self.cfg.patch, self.cfg.dim
        with T.no_grad():
            centered = x * 2.0 - 1.0  # map [0,1] pixels to zero-centered range
            tokens = (
                centered.reshape(b, c, gh, p, gw, p)
                .transpose(0, 2, 4, 1, 3, 5)
                .reshape(b, gh * gw, c * p * p)
            )
            pos = sincos_position_grid(gh, gw, d, x.data.dtype) * self.POS_SCALE
            z = self.embed(tokens) + Tensor(pos)
            maps = []
            for i, block in enumerate(self.blocks, start=1):
                z = block(z)
                if i in self.cfg.taps:
                    maps.append(z.reshape(b, gh, gw, d).transpose(0, 3, 1, 2))
        return maps

    def params(self, prefix):
        yield from self.embed.params(f"{prefix}.embed")
        for i, block in enumerate(self.blocks):
            yield from block.params(f"{prefix}.block{i}")


class FeatureAlign:
    """FAM: per-scale 1x1 channel projection + bilinear resize onto the
    teacher's token grid, so student and teacher maps share one shape."""

    def __init__(self, in_channels, out_dim, rng):
        self.projs = [Conv2d(c, out_dim, 1, rng) for c in in_channels]
        self.in_channels = tuple(in_channels)

    def __call__(self, pyramid, target_hw):
        if len(pyramid) != len(self.projs):
            raise T.ShapeError(
                f"fam: got {len(pyramid)} scales, configured for {len(self.projs)}"
            )
        th, tw = target_hw
        out = []
        for feat, proj in zip(pyramid, self.projs):
            if feat.shape[1] != proj.w.shape[1]:
                raise T.ShapeError(
                    f"fam: scale has {feat.shape[1]} channels, projection expects "
                    f"{proj.w.shape[1]}"
                )
            out.append(T.bilinear_resize(proj(feat), th, tw))
        return out

    def params(self, prefix):
        for i, proj in enumerate(self.projs):
            yield from proj.params(f"{prefix}.proj{i}")


class FeatureModulate:
    """FMM: N transformer blocks over each scale's token sequence.

    One block stack is shared across scales (applied independently per
    scale); N=0 passes the pyramid through untouched.
    """

    def __init__(self, cfg: FmmConfig, dim, num_scales, rng):
        self.cfg = cfg
        n_stacks = 1 if cfg.share_weights else num_scales
        self.stacks = [
            [TransformerBlock(dim, cfg.heads, rng) for _ in range(cfg.blocks)]
            for _ in range(n_stacks)
        ]

    def __call__(self, pyramid):
        if self.cfg.blocks == 0:
            return pyramid
        if self.cfg.share_weights and len(pyramid) > 1 and len(
            {f.shape for f in pyramid}
        ) == 1:
            # one pass with scales stacked on the batch axis; attention and
            # norms act per token sequence, so per-scale results are identical
            b, c, h, w = pyramid[0].shape
            z = T.concat(pyramid, axis=0).transpose(0, 2, 3, 1).reshape(
                len(pyramid) * b, h * w, c
            )
            for block in self.stacks[0]:
                z = block(z)
            z = z.reshape(len(pyramid) * b, h, w, c).transpose(0, 3, 1, 2)
            return T.split(z, len(pyramid), axis=0)
        out = []
        for s, feat in enumerate(pyramid):
            blocks = self.stacks[0 if self.cfg.share_weights else s]
            b, c, h, w = feat.shape
            z = feat.transpose(0, 2, 3, 1).reshape(b, h * w, c)
            for block in blocks:
                z = block(z)
            out.append(z.reshape(b, h, w, c).transpose(0, 3, 1, 2))
        return out

    def params(self, prefix):
        for s, stack in enumerate(self.stacks):
            tag = prefix if self.cfg.share_weights else f"{prefix}.scale{s}"
            for i, block in enumerate(stack):
                yield from block.params(f"{tag}.block{i}")


class DecoderHead:
    """Primary head: per-scale 3x3 conv + ReLU, channel concat, 1x1 fusion
    to class logits, bilinear resize to the input size."""

    def __init__(self, in_channels, mid_channels, num_classes, rng):
        self.scale_convs = [Conv2d(c, mid_channels, 3, rng, pad=1) for c in in_channels]
        self.fuse = Conv2d(mid_channels * len(in_channels), num_classes, 1, rng)

    def __call__(self, pyramid, out_hw):
        if len(pyramid) != len(self.scale_convs):
            raise T.ShapeError(
                f"decoder: got {len(pyramid)} scales, configured for {len(self.scale_convs)}"
            )
        feats = [T.relu(conv(f)) for conv, f in zip(self.scale_convs, pyramid)]
        if len(feats) > 1:
            ref_h, ref_w = feats[0].shape[2], feats[0].shape[3]
            feats = [
                f if (f.shape[2], f.shape[3]) == (ref_h, ref_w)
                else T.bilinear_resize(f, ref_h, ref_w)
                for f in feats
            ]
            fused = T.concat(feats, axis=1)
        else:
            fused = feats[0]
        logits = self.fuse(fused)
        return T.bilinear_resize(logits, *out_hw)

    def params(self, prefix):
        for i, conv in enumerate(self.scale_convs):
            yield from conv.params(f"{prefix}.scale{i}")
        yield from self.fuse.params(f"{prefix}.fuse")


class AuxHead:
    """Auxiliary head: exactly two convolutions and an interpolation."""

    def __init__(self, in_channels, num_classes, rng):
        self.conv1 = Conv2d(in_channels, in_channels, 3, rng, pad=1)
        self.conv2 = Conv2d(in_channels, num_classes, 1, rng)

    def __call__(self, feat, out_hw):
        x = T.relu(self.conv1(feat))
        return T.bilinear_resize(self.conv2(x), *out_hw)

    def params(self, prefix):
        yield from self.conv1.params(f"{prefix}.conv1")
        yield from self.conv2.params(f"{prefix}.conv2")


class Segmenter:
    """End-to-end model; one forward populates every SegOutput field."""

    def __init__(self, cfg: ModelConfig, in_channels=3):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 11])
        self.backbone = Backbone(cfg.backbone, in_channels, rng)
        n = cfg.backbone.num_scales
        if cfg.use_fam:
            self.n_aligned = n if cfg.fam.multi_scale else 1
            fam_in = (
                cfg.backbone.channels if cfg.fam.multi_scale else cfg.backbone.channels[-1:]
            )
            self.teacher = VtmEncoder(cfg.vtm, in_channels)
            self.fam = FeatureAlign(fam_in, cfg.vtm.dim, rng)
            self.fmm = FeatureModulate(cfg.fmm, cfg.vtm.dim, self.n_aligned, rng)
            dec_in = [cfg.vtm.dim] * self.n_aligned
            aux_in = cfg.vtm.dim
            mid = cfg.vtm.dim
        else:
            self.teacher = None
            self.fam = None
            self.fmm = None
            dec_in = list(cfg.backbone.channels)
            aux_in = cfg.backbone.channels[-1]
            mid = max(cfg.backbone.channels)
        self.decoder = DecoderHead(dec_in, mid, cfg.num_classes, rng)
        self.aux = AuxHead(aux_in, cfg.num_classes, rng)
        self.registry = self._build_registry()

    def _build_registry(self):
        reg = ParamRegistry()
        for name, p in self.backbone.params("backbone"):
            reg.register(name, p)
        if self.cfg.use_fam:
            for name, p in self.teacher.params("teacher"):
                reg.register(name, p, frozen=True)
            for name, p in self.fam.params("fam"):
                reg.register(name, p)
            for name, p in self.fmm.params("fmm"):
                reg.register(name, p)
        for name, p in self.decoder.params("decoder"):
            reg.register(name, p)
        for name, p in self.aux.params("aux"):
            reg.register(name, p)
        return reg

    def forward(self, x):
        _, _, h, w = x.shape
        pyramid = self.backbone(x)
        if self.cfg.use_fam:
            gh, gw = self.teacher.token_grid(h, w)
            teacher_maps = self.teacher(x)[-self.n_aligned :]
            student_sel = pyramid if self.cfg.fam.multi_scale else pyramid[-1:]
            aligned = self.fam(student_sel, (gh, gw))
            modulated = self.fmm(aligned)
            logits = self.decoder(modulated, (h, w))
            logits_aux = self.aux(aligned[-1], (h, w))
            return SegOutput(logits, logits_aux, aligned, modulated, teacher_maps)
        logits = self.decoder(pyramid, (h, w))
        logits_aux = self.aux(pyramid[-1], (h, w))
        return SegOutput(logits, logits_aux, None, None, None)

    __call__ = forward

    def trainable_params(self):
        return self.registry.trainable()

    def zero_grad(self):
        for _, p in self.registry.items():
            p.grad = None
