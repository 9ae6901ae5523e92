"""Per-stream part layers, BNNeck and identity classifier heads."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import split_parts
from .numerics import BatchNorm, Module, Tensor


class Stream(str, enum.Enum):
    HOLISTIC = "holistic"
    OCCLUDED = "occluded"
    COMPLETED = "completed"


@dataclass
class StreamFeatures:
    global_: Tensor     # B x C
    parts: Tensor       # B x M x C
    global_bn: Tensor   # B x C
    parts_bn: Tensor    # B x M x C


@dataclass
class FeatureTriplet:
    holistic: StreamFeatures
    occluded: StreamFeatures
    completed: StreamFeatures | None


class PartLayer(Module):
    """The stream's own transformer layer, run on every part sequence.

    Each part feature is the layer output at that part's global position.
    The output norm's gain starts at 1/sqrt(M*C), so a flattened M*C part
    vector has roughly unit length at initialisation.
    """

    def __init__(self, dim: int, heads: int, m_parts: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 gain_init: float | None = None):
        super().__init__()
        self.m_parts = m_parts
        self.block = nx.Block(dim, heads, rng, mlp_ratio)
        self.norm = nx.LayerNorm(dim)
        g0 = 1.0 / np.sqrt(m_parts * dim) if gain_init is None else gain_init
        self.norm.gain.data[...] = np.float32(g0)

    def __call__(self, seq: Tensor) -> Tensor:
        b, _, c = seq.shape
        parts = split_parts(seq, self.m_parts)
        x = self.norm(self.block(nx.concat(parts, axis=0)))
        return x[:, 0].reshape(self.m_parts, b, c).transpose(1, 0, 2)


class BNNeck(Module):
    def __init__(self, dim: int, m_parts: int, with_global: bool = True):
        super().__init__()
        self.parts = BatchNorm((m_parts, dim))
        if with_global:
            self.global_ = BatchNorm((dim,))


class Heads(Module):
    """Bias-free identity classifiers: one for the global pair, one per part stream."""

    def __init__(self, dim: int, n_ids: int, rng: np.random.Generator):
        super().__init__()
        self.global_ = nx.Linear(dim, n_ids, rng, bias=False, std=0.001)
        self.holistic = nx.Linear(dim, n_ids, rng, bias=False, std=0.001)
        self.occluded = nx.Linear(dim, n_ids, rng, bias=False, std=0.001)


def classify(heads: Heads, x_bn: Tensor, head: str) -> Tensor:
    """Logits over identities for ``head`` in {"global", "holistic", "occluded", "completed"}.

    Completed parts are scored by the holistic head so that their class
    distribution is directly comparable with the holistic one.
    """
    name = {"global": "global_", "completed": "holistic"}.get(head, head)
    return getattr(heads, name)(x_bn)
