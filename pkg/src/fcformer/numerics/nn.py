"""Parameters, modules and the transformer building blocks shared by the model."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning module tree."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Attribute-registered tree of parameters, buffers and submodules.

    Registration order is attribute assignment order, which fixes the
    parameter registry order (and therefore checkpoint layout).
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = None
        object.__setattr__(self, key, np.asarray(value, dtype=DTYPE))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix + k + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self._buffers:
            yield prefix + k, getattr(self, k)
        for k, m in self._modules.items():
            yield from m.named_buffers(prefix + k + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=DTYPE)
        for name in buffers:
            owner, key = self._resolve(name)
            owner.register_buffer(key, np.array(state[name], dtype=DTYPE))

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        *path, key = dotted.split(".")
        mod = self
        for part in path:
            mod = mod._modules[part]
        return mod, key


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[str(i)]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(DTYPE)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        super().__init__()
        std = std if std is not None else math.sqrt(1.0 / d_in)
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out, dtype=DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim, dtype=DTYPE))
        self.bias = Parameter(np.zeros(dim, dtype=DTYPE))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    """Multi-head self-attention: softmax(Q K^T / sqrt(d_head)) V, then an output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h, d = self.heads, c // self.heads

        def split(t):
            return t.reshape(b, n, h, d).transpose(0, 2, 1, 3)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = T.softmax(T.matmul(q, k.swapaxes(-1, -2)) * DTYPE(1.0 / math.sqrt(d)), axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer layer: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class BatchNorm(Module):
    """Batch normalisation over axis 0 with per-feature statistics.

    ``feature_shape`` covers all trailing axes. ``affine_bias=False`` gives the
    BNNeck form (learned scale, no shift).
    """

    def __init__(self, feature_shape, momentum: float = 0.1, eps: float = 1e-5,
                 affine_bias: bool = False):
        super().__init__()
        feature_shape = tuple(np.atleast_1d(feature_shape))
        self.weight = Parameter(np.ones(feature_shape, dtype=DTYPE))
        self.bias = Parameter(np.zeros(feature_shape, dtype=DTYPE)) if affine_bias else None
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(feature_shape))
        self.register_buffer("running_var", np.ones(feature_shape))

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise ValueError("batch norm in training mode needs batch size >= 2")
            mu = x.mean(axis=0, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=0, keepdims=True)
            m = DTYPE(self.momentum)
            unbiased = var.data[0] * DTYPE(n / (n - 1))
            self.running_mean = (1 - m) * self.running_mean + m * mu.data[0]
            self.running_var = (1 - m) * self.running_var + m * unbiased
            y = xc / T.sqrt(var + DTYPE(self.eps))
        else:
            y = (x - self.running_mean) / np.sqrt(self.running_var + DTYPE(self.eps))
        y = y * self.weight
        return y + self.bias if self.bias is not None else y
