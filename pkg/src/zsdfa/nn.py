"""Layer building blocks on top of :mod:`zsdfa.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container; parameters and child modules are discovered from
    attributes in definition order (lists of modules are supported)."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, shape))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = xavier(rng, d_in, d_out, (d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 2):
        self.kernels = xavier(rng, c_in * k * k, c_out * k * k, (c_out, c_in, k, k))
        self.bias = param(np.zeros((c_out, 1, 1)))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernels, self.stride) + self.bias


class MLP(Module):
    """Two fully connected layers with a GELU in between."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(x.reshape(b, n, heads, d // heads), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, f, n, dh = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(b, n, f * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None):
    """Scaled dot-product attention over ``(b, f, n, d_f)`` head tensors.
    Returns the attended values and the attention weights."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ T.transpose(k)) * scale
    if mask is not None:
        scores = scores + mask
    weights = T.softmax_rows(scores)
    return weights @ v, weights


class SelfAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(rng, d, d)
        # a key bias only shifts each query's scores uniformly, which softmax cancels
        self.k = Linear(rng, d, d, bias=False)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        h = self.heads
        y, _ = attention(split_heads(self.q(x), h), split_heads(self.k(x), h),
                         split_heads(self.v(x), h), mask)
        return self.out(merge_heads(y))


class TransformerBlock(Module):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, rng, d: int, heads: int, mlp_ratio: float = 2.0):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, int(d * mlp_ratio), d)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def key_padding_mask(valid: np.ndarray, dtype) -> Tensor:
    """Additive mask ``(b, 1, 1, n)`` that blocks keys where ``valid`` is False."""
    m = np.where(valid, 0.0, NEG_INF).astype(dtype)
    return Tensor(m[:, None, None, :])
