"""Occlusion instance library: RGBA occluder cut-outs split by position prior."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw


class Prior(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"


# Strong-prior objects sit on the ground, so they are bottom-aligned when pasted.
DEFAULT_CLASSES: dict[str, Prior] = {
    **{c: Prior.STRONG for c in ("car", "truck", "bicycle", "motorcycle", "fire hydrant",
                                 "table", "pedestrian", "chair", "bench")},
    **{c: Prior.WEAK for c in ("umbrella", "backpack", "suitcase", "road sign", "kite",
                               "tennis racket", "billboard")},
}

ALPHA_THRESHOLD = 128
MIN_OPAQUE_FRACTION = 0.01


class LibraryError(ValueError):
    pass


@dataclass(frozen=True)
class OcclusionInstance:
    pixels: np.ndarray  # h_o x w_o x 4 uint8, alpha in {0, 255}
    class_name: str
    prior: Prior

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 4 or px.dtype != np.uint8:
            raise LibraryError(f"{self.class_name}: expected HxWx4 uint8, got {px.shape} {px.dtype}")
        alpha = px[..., 3]
        if not np.isin(alpha, (0, 255)).all():
            raise LibraryError(f"{self.class_name}: alpha channel is not binary")
        if (alpha == 255).mean() < MIN_OPAQUE_FRACTION:
            raise LibraryError(f"{self.class_name}: fewer than 1% opaque pixels")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def binarize_alpha(rgba: np.ndarray) -> np.ndarray:
    out = np.array(rgba, dtype=np.uint8, copy=True)
    out[..., 3] = np.where(out[..., 3] >= ALPHA_THRESHOLD, 255, 0)
    return out


@dataclass
class Library:
    instances: list[OcclusionInstance]
    classes: dict[str, Prior] = field(default_factory=lambda: dict(DEFAULT_CLASSES))

    def __post_init__(self):
        for inst in self.instances:
            expected = self.classes.get(inst.class_name)
            if expected is None:
                raise LibraryError(f"unknown class '{inst.class_name}'")
            if expected is not inst.prior:
                raise LibraryError(f"class '{inst.class_name}' is registered as {expected.value}, "
                                   f"entry says {inst.prior.value}")
        self._strong = [i for i in self.instances if i.prior is Prior.STRONG]
        self._weak = [i for i in self.instances if i.prior is Prior.WEAK]

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def strong(self) -> list[OcclusionInstance]:
        return self._strong

    @property
    def weak(self) -> list[OcclusionInstance]:
        return self._weak

    @staticmethod
    def _pick(pool, rng: np.random.Generator, what: str) -> OcclusionInstance:
        if not pool:
            raise LibraryError(f"empty prior subset ({what})")
        return pool[int(rng.integers(len(pool)))]

    def sample_strong(self, rng: np.random.Generator) -> OcclusionInstance:
        return self._pick(self._strong, rng, "strong")

    def sample_weak(self, rng: np.random.Generator) -> OcclusionInstance:
        return self._pick(self._weak, rng, "weak")

    def sample_any(self, rng: np.random.Generator) -> OcclusionInstance:
        return self._pick(self.instances, rng, "any")


def load_library(manifest_path) -> Library:
    """Load a library from a JSON manifest.

    Manifest keys: ``version`` (int), ``entries`` (list of ``{"path", "class",
    "prior"}``, paths relative to the manifest) and optionally ``classes``
    (``{name: "strong"|"weak"}``) to extend the default registry.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LibraryError(f"cannot read manifest {manifest_path}: {exc}") from exc
    classes = dict(DEFAULT_CLASSES)
    for name, prior in doc.get("classes", {}).items():
        classes[name] = Prior(prior)
    root = manifest_path.parent
    instances = []
    for k, ent in enumerate(doc.get("entries", [])):
        label = f"entry {k} ({ent.get('path')})"
        if ent.get("class") not in classes:
            raise LibraryError(f"{label}: unknown class '{ent.get('class')}'")
        try:
            prior = Prior(ent["prior"])
        except (KeyError, ValueError) as exc:
            raise LibraryError(f"{label}: bad prior {ent.get('prior')!r}") from exc
        if classes[ent["class"]] is not prior:
            raise LibraryError(f"{label}: prior {prior.value} disagrees with class registry")
        path = root / ent["path"]
        if not path.is_file():
            raise LibraryError(f"{label}: missing file {path}")
        try:
            with Image.open(path) as im:
                rgba = np.asarray(im.convert("RGBA"))
        except OSError as exc:
            raise LibraryError(f"{label}: cannot decode image: {exc}") from exc
        try:
            instances.append(OcclusionInstance(binarize_alpha(rgba), ent["class"], prior))
        except LibraryError as exc:
            raise LibraryError(f"{label}: {exc}") from exc
    return Library(instances, classes)


def save_library(lib: Library, out_dir) -> Path:
    """Write PNGs plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, inst in enumerate(lib.instances):
        name = f"{k:04d}_{inst.class_name.replace(' ', '_')}.png"
        Image.fromarray(inst.pixels, "RGBA").save(out_dir / name)
        entries.append({"path": name, "class": inst.class_name, "prior": inst.prior.value})
    extra = {c: p.value for c, p in lib.classes.items() if DEFAULT_CLASSES.get(c) is not p}
    doc = {"version": 1, "entries": entries}
    if extra:
        doc["classes"] = extra
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def _draw_occluder(rng: np.random.Generator) -> np.ndarray:
    h, w = (int(v) for v in rng.integers(12, 40, size=2))
    mask = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(mask)
    kind = rng.integers(3)
    if kind == 0:
        draw.rectangle([0, 0, w - 1, h - 1], fill=255)
    elif kind == 1:
        draw.ellipse([0, 0, w - 1, h - 1], fill=255)
    else:
        n = int(rng.integers(5, 9))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(0.6, 1.0, n)
        pts = [(float((w - 1) / 2 * (1 + r * np.cos(a))), float((h - 1) / 2 * (1 + r * np.sin(a))))
               for a, r in zip(ang, rad)]
        draw.polygon(pts, fill=255)
    alpha = np.asarray(mask).copy()
    # ragged boundary: knock out a few edge pixels
    edge = (alpha == 255) & (rng.random(alpha.shape) < 0.08)
    edge[h // 4: 3 * h // 4, w // 4: 3 * w // 4] = False
    alpha[edge] = 0
    # keep the box well filled so the pasted area tracks the requested scale
    if (alpha == 255).mean() < 0.55:
        fallback = Image.new("L", (w, h), 0)
        ImageDraw.Draw(fallback).ellipse([0, 0, w - 1, h - 1], fill=255)
        alpha = np.asarray(fallback).copy()

    base = rng.integers(0, 256, size=3)
    stripe = rng.integers(0, 256, size=3)
    period = int(rng.integers(3, 8))
    yy, xx = np.mgrid[0:h, 0:w]
    use_stripe = ((xx + yy * int(rng.integers(0, 2))) // period) % 2 == 1
    rgb = np.where(use_stripe[..., None], stripe, base).astype(np.int16)
    rgb += rng.integers(-12, 13, size=rgb.shape)
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    rgba[..., :3] = np.clip(rgb, 0, 255)
    rgba[..., 3] = alpha
    rgba[alpha == 0, :3] = 0
    return rgba


def make_synthetic_library(seed: int, n_per_prior: int) -> Library:
    """Procedural stand-in library: ``n_per_prior`` strong and weak occluders each."""
    if n_per_prior < 1:
        raise LibraryError("n_per_prior must be >= 1")
    rng = np.random.default_rng([seed, 0x0C1])
    strong = [c for c, p in DEFAULT_CLASSES.items() if p is Prior.STRONG]
    weak = [c for c, p in DEFAULT_CLASSES.items() if p is Prior.WEAK]
    instances = []
    for prior, names in ((Prior.STRONG, strong), (Prior.WEAK, weak)):
        for k in range(n_per_prior):
            instances.append(OcclusionInstance(_draw_occluder(rng), names[k % len(names)], prior))
    return Library(instances)
