"""Shared ViT trunk: patch + global-token + position + camera embedding, then L blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DTYPE, Module, ModuleList, Parameter, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    img_h: int = 64
    img_w: int = 32
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    n_cameras: int = 2
    lambda_cm: float = 3.0
    m_parts: int = 4
    mlp_ratio: int = 4

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_h // self.patch, self.img_w // self.patch

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def validate(self) -> list[str]:
        errs = []
        if self.img_h % self.patch or self.img_w % self.patch:
            errs.append(f"image {self.img_h}x{self.img_w} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            errs.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.m_parts < 1 or self.n_patches % self.m_parts:
            errs.append(f"m_parts {self.m_parts} does not divide N={self.n_patches}")
        if self.n_cameras < 1:
            errs.append("n_cameras must be >= 1")
        if self.depth < 0:
            errs.append("depth must be >= 0")
        return errs


# fixed input normalisation for uint8 images
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x H x W x 3 -> B x N x (patch*patch*3), patches in row-major grid order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def normalize_images(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=DTYPE)
    if np.asarray(images).dtype == np.uint8:
        x = x / DTYPE(255.0)
    return (x - DTYPE(PIXEL_MEAN)) / DTYPE(PIXEL_STD)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        errs = cfg.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        self.cfg = cfg
        c, n = cfg.dim, cfg.n_patches
        self.patch_embed = nx.Linear(cfg.patch * cfg.patch * 3, c, rng)
        self.global_token = Parameter(nx.nn.trunc_normal(rng, (1, 1, c)))
        self.pos_embed = Parameter(nx.nn.trunc_normal(rng, (1, n + 1, c)))
        self.cam_embed = Parameter(nx.nn.trunc_normal(rng, (cfg.n_cameras, c)))
        self.blocks = ModuleList([nx.Block(c, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.depth)])

    def embed(self, images: np.ndarray, cams) -> Tensor:
        """Token sequence B x (N+1) x C: index 0 is the global token, then patches row-major."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.shape[1:3] != (cfg.img_h, cfg.img_w):
            raise ConfigError(f"expected {cfg.img_h}x{cfg.img_w} images, got {images.shape[1:3]}")
        cams = np.asarray(cams, dtype=np.int64).reshape(-1)
        if cams.shape[0] != images.shape[0]:
            raise ValueError("one camera index per image is required")
        if cams.min() < 0 or cams.max() >= cfg.n_cameras:
            raise ValueError(f"camera index out of range [0, {cfg.n_cameras}): {cams.tolist()}")
        b = images.shape[0]
        patches = Tensor(patchify(normalize_images(images), cfg.patch))
        e_p = self.patch_embed(patches)
        e_g = self.global_token + Tensor(np.zeros((b, 1, cfg.dim), dtype=DTYPE))
        seq = nx.concat([e_g, e_p], axis=1) + self.pos_embed
        if cfg.lambda_cm != 0:
            cam = self.cam_embed[cams].reshape(b, 1, cfg.dim)
            seq = seq + cam * DTYPE(cfg.lambda_cm)
        return seq

    def encode(self, seq: Tensor) -> Tensor:
        for blk in self.blocks:
            seq = blk(seq)
        return seq

    def __call__(self, images: np.ndarray, cams) -> Tensor:
        return self.encode(self.embed(images, cams))


def split_parts(seq: Tensor, m_parts: int) -> list[Tensor]:
    """Part k = [global token, patch tokens k*N/M .. (k+1)*N/M)."""
    n = seq.shape[1] - 1
    if m_parts < 1 or n % m_parts:
        raise ConfigError(f"m_parts {m_parts} does not divide N={n}")
    step = n // m_parts
    g = seq[:, :1]
    return [nx.concat([g, seq[:, 1 + k * step: 1 + (k + 1) * step]], axis=1) for k in range(m_parts)]
