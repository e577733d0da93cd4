"""Parameterized building blocks: linear, conv, attention, transformer block.

Blocks use pre-norm residual placement with a GELU MLP at expansion ratio 4.
Weights initialize from a seeded truncated normal (std 0.02), biases and
norm shifts to zero, norm scales to one.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(shape, rng, std=0.02):
    """Normal draws rejected outside +-2 std (resampled, not clipped)."""
    out = rng.standard_normal(shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return (out * std).astype(T.default_dtype())


def parameter(shape, rng, std=0.02):
    return Tensor(trunc_normal(shape, rng, std), requires_grad=True)


class ParamRegistry:
    """Flat name -> parameter map with frozen/weight-decay flags."""

    def __init__(self):
        self._params = {}
        self._frozen = {}
        self._decay = {}

    def register(self, name, param, frozen=False, decay=None):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if decay is None:
            decay = param.ndim >= 2  # biases and norm params skip weight decay
        if frozen:
            param.requires_grad = False
        self._params[name] = param
        self._frozen[name] = frozen
        self._decay[name] = decay
        return param

    def freeze(self, name):
        self._frozen[name] = True
        self._params[name].requires_grad = False

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def get(self, name):
        return self._params[name]

    def is_frozen(self, name):
        return self._frozen[name]

    def wants_decay(self, name):
        return self._decay[name]

    def trainable(self):
        return [(n, p) for n, p in self._params.items() if not self._frozen[n]]

    def num_params(self, trainable_only=False):
        return sum(
            p.size
            for n, p in self._params.items()
            if not (trainable_only and self._frozen[n])
        )

    def state_arrays(self):
        """Name -> raw array view, in registration order."""
        return {n: p.data for n, p in self._params.items()}

    def load_state(self, arrays):
        for name, p in self._params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter '{name}'")
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(
                    f"shape mismatch for '{name}': checkpoint {tuple(arr.shape)} "
                    f"vs model {tuple(p.shape)}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)


class Linear:
    def __init__(self, d_in, d_out, rng, std=0.02):
        self.w = parameter((d_in, d_out), rng, std=std)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.w + self.b

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Conv2d:
    """3x3/1x1 convolution; weights fan-in scaled so conv stacks keep their
    activation magnitude (the 0.02-std init is reserved for attention/MLP)."""

    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0):
        fan_in = c_in * k * k
        self.w = parameter((c_out, c_in, k, k), rng, std=1.0 / math.sqrt(fan_in))
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention, scale 1/sqrt(head_dim)."""

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x):
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(z):  # [B,T,d] -> [B,h,T,hd]
            return z.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.wo(ctx)

    def attention_weights(self, x):
        """Forward the score path only; used by tests of the softmax rows."""
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim
        q = self.wq(x).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        k = self.wk(x).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        return T.softmax(scores, axis=-1)

    def params(self, prefix):
        for tag, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            yield from lin.params(f"{prefix}.{tag}")


class TransformerBlock:
    """Pre-norm residual block: x + attn(ln(x)), then + mlp(ln(.))."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))

    def params(self, prefix):
        yield from self.norm1.params(f"{prefix}.norm1")
        yield from self.attn.params(f"{prefix}.attn")
        yield from self.norm2.params(f"{prefix}.norm2")
        yield from self.fc1.params(f"{prefix}.fc1")
        yield from self.fc2.params(f"{prefix}.fc2")

    def num_params(self):
        return sum(p.size for _, p in self.params("b"))
