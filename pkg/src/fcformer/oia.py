"""Occlusion instance augmentation: paste a scaled library occluder onto each image.

The occluder is rescaled so its bounding box covers ``delta`` of the image
area, positioned according to its class prior, and composited with a hard
binary mask. Each holistic image yields an aligned (holistic, occluded, mask)
triple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

from .oil import Library, LibraryError, OcclusionInstance, Prior

DELTA_RANGE = (0.1, 0.7)
# Strong-prior occluders may slide below the frame by up to this fraction of their height.
BOTTOM_JITTER = 0.1


@dataclass
class AugmentedPair:
    holistic: np.ndarray  # H x W x 3 uint8
    occluded: np.ndarray  # H x W x 3 uint8
    occ_mask: np.ndarray  # H x W uint8, 1 where the occluder replaced the pixel
    pid: int
    cam: int


def scale_factor(h_o: int, w_o: int, H: int, W: int, delta: float) -> float:
    """Area ratio between the target occluder box (delta * H * W) and the instance box."""
    return delta * (H * W) / (h_o * w_o)


def scale_occluder(inst: OcclusionInstance | np.ndarray, H: int, W: int, delta: float) -> np.ndarray:
    """Resize so the box area is ``delta * H * W``; each side is clamped to the frame."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    px = inst.pixels if isinstance(inst, OcclusionInstance) else inst
    h_o, w_o = px.shape[:2]
    eps = scale_factor(h_o, w_o, H, W, delta)
    s = math.sqrt(eps)
    nh = min(H, max(1, int(round(h_o * s))))
    nw = min(W, max(1, int(round(w_o * s))))
    if (nh, nw) == (h_o, w_o):
        return px.copy()
    rgb = np.asarray(Image.fromarray(np.ascontiguousarray(px[..., :3])).resize((nw, nh), Image.BILINEAR))
    alpha = np.asarray(Image.fromarray(np.ascontiguousarray(px[..., 3])).resize((nw, nh), Image.NEAREST))
    out = np.empty((nh, nw, 4), dtype=np.uint8)
    out[..., :3] = rgb
    out[..., 3] = alpha
    return out


def draw_position(img_hw: tuple[int, int], occ_hw: tuple[int, int], prior: Prior,
                  rng: np.random.Generator) -> tuple[int, int]:
    """Top-left corner (row, col) of the occluder. Rows may exceed H - h for strong priors."""
    H, W = img_hw
    h, w = occ_hw
    col = int(rng.integers(0, W - w + 1))
    if prior is Prior.STRONG:
        row = H - h + int(rng.integers(0, int(BOTTOM_JITTER * h) + 1))
    else:
        row = int(rng.integers(0, H - h + 1))
    return row, col


def composite(img: np.ndarray, occ: np.ndarray, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
    """Paste ``occ`` at (row, col), clipping at the frame; pixels are replaced where alpha is set."""
    H, W = img.shape[:2]
    h, w = occ.shape[:2]
    out = img.copy()
    mask = np.zeros((H, W), dtype=np.uint8)
    r0, r1 = max(row, 0), min(row + h, H)
    c0, c1 = max(col, 0), min(col + w, W)
    if r0 >= r1 or c0 >= c1:
        return out, mask
    patch = occ[r0 - row:r1 - row, c0 - col:c1 - col]
    a = patch[..., 3] >= 128
    region = out[r0:r1, c0:c1]
    region[a] = patch[..., :3][a]
    mask[r0:r1, c0:c1] = a
    return out, mask


def place_occluder(img: np.ndarray, occ: np.ndarray, prior: Prior, rng: np.random.Generator,
                   position: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    H, W = img.shape[:2]
    h, w = occ.shape[:2]
    if h > H or w > W:
        raise ValueError(f"occluder {h}x{w} does not fit image {H}x{W}")
    if position is None:
        position = draw_position((H, W), (h, w), prior, rng)
    return composite(img, occ, *position)


def random_flip_pad(img: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Horizontal flip with p=0.5, then zero-pad by ``pad`` and random-crop back."""
    if rng.random() < 0.5:
        img = img[:, ::-1]
    if pad <= 0:
        return np.ascontiguousarray(img)
    H, W = img.shape[:2]
    padded = np.zeros((H + 2 * pad, W + 2 * pad, img.shape[2]), dtype=img.dtype)
    padded[pad:pad + H, pad:pad + W] = img
    r, c = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return padded[r:r + H, c:c + W].copy()


def augment_image(img: np.ndarray, lib: Library, rng: np.random.Generator,
                  delta_range: tuple[float, float] = DELTA_RANGE,
                  position: tuple[int, int] | None = None):
    """One occluded copy of ``img``; returns (occluded, mask, instance, resized occluder)."""
    H, W = img.shape[:2]
    inst = lib.sample_any(rng)
    delta = float(rng.uniform(*delta_range))
    occ = scale_occluder(inst, H, W, delta)
    if position is not None:
        # clamp a shared position to this occluder's valid range
        position = (min(position[0], H - 1), min(position[1], W - occ.shape[1]))
    occluded, mask = place_occluder(img, occ, inst.prior, rng, position)
    return occluded, mask, inst, occ


def augment_batch(batch: Sequence[tuple[np.ndarray, int, int]], lib: Library, rng: np.random.Generator,
                  delta_range: tuple[float, float] = DELTA_RANGE, fixed: bool = False) -> list[AugmentedPair]:
    """Occlude every image of ``batch`` (items are (image, pid, cam)).

    By default every instance draws its own occluder, scale and position. With
    ``fixed=True`` one position is drawn for the whole batch and reused.
    """
    if not batch:
        raise ValueError("empty batch")
    if len(lib) == 0:
        raise LibraryError("occlusion library is empty")
    pairs = []
    shared = None
    for img, pid, cam in batch:
        if fixed and shared is None:
            H, W = img.shape[:2]
            inst = lib.sample_any(rng)
            delta = float(rng.uniform(*delta_range))
            occ = scale_occluder(inst, H, W, delta)
            shared = draw_position((H, W), occ.shape[:2], inst.prior, rng)
            occluded, mask = composite(img, occ, *shared)
        else:
            occluded, mask, _, _ = augment_image(img, lib, rng, delta_range, shared)
        pairs.append(AugmentedPair(img, occluded, mask, int(pid), int(cam)))
    return pairs
