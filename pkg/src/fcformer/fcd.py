"""Feature completion decoder.

Occluded patch tokens are projected along the token axis into K slots (which
modulate learnable prototype completion tokens) and L retained slots. Together
with the global token they form an N+1 sequence that a small transformer
decodes back to N completed patch tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import ConfigError
from .numerics import DTYPE, Module, ModuleList, Parameter, Tensor


@dataclass
class FcdConfig:
    alpha: float = 0.7
    dec_depth: int = 2

    def split(self, n_tokens: int) -> tuple[int, int]:
        """(K, L) with K = floor(alpha * N) and L = N - K."""
        k = int(math.floor(self.alpha * n_tokens + 1e-9))
        return k, n_tokens - k

    def validate(self, n_tokens: int) -> list[str]:
        errs = []
        if not 0.0 < self.alpha < 1.0:
            errs.append(f"fcd alpha must lie in (0, 1), got {self.alpha}")
        k, l = self.split(n_tokens)
        if k < 1 or l < 1:
            errs.append(f"fcd alpha {self.alpha} with N={n_tokens} gives K={k}, L={l}; both must be >= 1")
        if self.dec_depth < 0:
            errs.append("dec_depth must be >= 0")
        return errs


class FeatureCompletionDecoder(Module):
    def __init__(self, cfg: FcdConfig, n_tokens: int, dim: int, heads: int,
                 rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        errs = cfg.validate(n_tokens)
        if errs:
            raise ConfigError("; ".join(errs))
        self.cfg = cfg
        self.n_tokens = n_tokens
        self.k, self.l = cfg.split(n_tokens)
        # start as token selections (first K, last L), so output slot i begins at f_ot[i]
        eye = np.eye(n_tokens, dtype=np.float32)
        self.w1 = Parameter(eye[:, :self.k].copy())
        self.w2 = Parameter(eye[:, self.k:].copy())
        self.t_c = Parameter(1.0 + nx.nn.trunc_normal(rng, (1, self.k, dim)))
        self.gate = nx.Linear(dim, 1, rng)
        self.gate.weight.data[...] = 0.0
        self.pos = Parameter(nx.nn.trunc_normal(rng, (1, n_tokens + 1, dim)))
        self.blocks = ModuleList([nx.Block(dim, heads, rng, mlp_ratio) for _ in range(cfg.dec_depth)])
        # output projection starts at the identity; the decoder learns a correction
        self.out = nx.Linear(dim, dim, rng)
        self.out.weight.data[...] = np.eye(dim, dtype=np.float32)
        self.out.bias.data[...] = 0.0

    def completion_tokens(self, f_ot: Tensor) -> Tensor:
        """Instance-level tokens B x K x C: token-axis projection of f_ot times T_c."""
        proj = nx.matmul(f_ot.swapaxes(1, 2), self.w1).swapaxes(1, 2)
        return proj * self.t_c

    def hybrid_embed(self, f_og: Tensor, f_ot: Tensor) -> Tensor:
        b, n, c = f_ot.shape
        if n != self.n_tokens:
            raise ConfigError(f"decoder built for N={self.n_tokens}, got {n} tokens")
        t_b = self.completion_tokens(f_ot)
        kept = nx.matmul(f_ot.swapaxes(1, 2), self.w2).swapaxes(1, 2)
        f_r = nx.concat([f_og.reshape(b, 1, c), t_b, kept], axis=1)
        # positional injection, residual so a zero gate is the identity
        return self.gate(f_r) * self.pos + f_r

    def decode(self, f_r: Tensor) -> Tensor:
        x = f_r
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)[:, 1:]

    def __call__(self, f_og: Tensor, f_ot: Tensor) -> Tensor:
        return self.decode(self.hybrid_embed(f_og, f_ot))


def completion_loss(f_cp: Tensor, f_ht: Tensor | np.ndarray) -> Tensor:
    """Mean squared error against the (detached) holistic patch tokens."""
    if f_cp.shape != f_ht.shape:
        raise nx.DimensionError(f"completion_loss shape mismatch: {f_cp.shape} vs {f_ht.shape}")
    diff = f_cp - nx.as_tensor(f_ht).detach()
    return (diff * diff).mean()
