"""Synthetic person re-identification data and the P x K identity sampler.

Each identity is a procedurally drawn pedestrian (head, torso, legs, shoes)
whose geometry and clothing colours are fixed; cameras apply a photometric
transform, and every image gets its own background. Query images can be
pre-occluded with library occluders to emulate occluded-query benchmarks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import oia
from .oil import Library, make_synthetic_library

IMG_H, IMG_W = 64, 32

PALETTE = np.array([
    [200, 40, 40], [40, 160, 60], [40, 70, 200], [230, 200, 40],
    [240, 240, 240], [30, 30, 30], [150, 80, 200], [240, 130, 30],
], dtype=np.int16)
SKIN = np.array([[236, 200, 170], [200, 150, 110], [140, 95, 60]], dtype=np.int16)
PATTERNS = ("solid", "hstripe", "vstripe")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ToyPerson:
    pid: int
    upper: int
    lower: int
    shoes: int
    hair: int
    skin: int
    pattern: str
    pattern_color: int
    torso_w: int
    leg_len: int
    x_off: int

    def attributes(self) -> tuple:
        return (self.upper, self.lower, self.shoes, self.hair, self.skin, self.pattern,
                self.pattern_color, self.torso_w, self.leg_len, self.x_off)


@dataclass(frozen=True)
class Camera:
    gain: tuple[float, float, float]
    bias: float


@dataclass
class Split:
    images: np.ndarray  # n x H x W x 3 uint8
    pids: np.ndarray
    cams: np.ndarray
    idx: np.ndarray     # per (pid, cam) running index, used in filenames

    def __len__(self) -> int:
        return len(self.pids)

    def names(self) -> list[str]:
        return [f"{p}_{c}_{i}.png" for p, c, i in zip(self.pids, self.cams, self.idx)]


@dataclass
class ToyDataset:
    train: Split
    query: Split
    gallery: Split
    n_cams: int
    meta: dict = field(default_factory=dict)

    @property
    def train_ids(self) -> np.ndarray:
        return np.unique(self.train.pids)


def make_people(rng: np.random.Generator, n_ids: int) -> list[ToyPerson]:
    people, seen = [], set()
    while len(people) < n_ids:
        p = ToyPerson(
            pid=len(people),
            upper=int(rng.integers(len(PALETTE))),
            lower=int(rng.integers(len(PALETTE))),
            shoes=int(rng.integers(len(PALETTE))),
            hair=int(rng.integers(len(PALETTE))),
            skin=int(rng.integers(len(SKIN))),
            pattern=PATTERNS[int(rng.integers(len(PATTERNS)))],
            pattern_color=int(rng.integers(len(PALETTE))),
            torso_w=int(rng.integers(10, 15)),
            leg_len=int(rng.integers(22, 27)),
            x_off=int(rng.integers(-2, 3)),
        )
        if p.attributes() in seen:
            continue
        seen.add(p.attributes())
        people.append(p)
    return people


def make_cameras(rng: np.random.Generator, n_cams: int) -> list[Camera]:
    return [Camera(tuple(float(g) for g in rng.uniform(0.75, 1.2, 3)), float(rng.uniform(-20, 20)))
            for _ in range(n_cams)]


def person_mask(person: ToyPerson) -> np.ndarray:
    """Integer label map of the body: 0 background, 1 hair, 2 face, 3 torso, 4 legs, 5 shoes."""
    lab = np.zeros((IMG_H, IMG_W), dtype=np.uint8)
    cx = IMG_W // 2 + person.x_off
    yy, xx = np.mgrid[0:IMG_H, 0:IMG_W]
    head = ((yy - 8) / 5.5) ** 2 + ((xx - cx) / 4.5) ** 2 <= 1
    lab[head] = 2
    lab[head & (yy < 7)] = 1
    top, torso_h = 14, 64 - 14 - person.leg_len - 1
    half = person.torso_w // 2
    lab[top:top + torso_h, cx - half:cx + half] = 3
    leg_top = top + torso_h
    leg_bottom = min(IMG_H - 3, leg_top + person.leg_len - 3)
    for x0 in (cx - half + 1, cx + 1):
        lab[leg_top:leg_bottom, x0:x0 + half - 2] = 4
        lab[leg_bottom:leg_bottom + 3, x0 - 1:x0 + half - 1] = 5
    return lab


def render_base(person: ToyPerson, rng: np.random.Generator) -> np.ndarray:
    """Camera-independent scene: textured background plus the body, int16 RGB."""
    lab = person_mask(person)
    bg = rng.integers(60, 190, size=3).astype(np.int16)
    img = np.broadcast_to(bg, (IMG_H, IMG_W, 3)).astype(np.int16).copy()
    img += rng.integers(-25, 26, size=(IMG_H, IMG_W, 1)).astype(np.int16)
    img[lab == 1] = PALETTE[person.hair]
    img[lab == 2] = SKIN[person.skin]
    img[lab == 3] = PALETTE[person.upper]
    img[lab == 4] = PALETTE[person.lower]
    img[lab == 5] = PALETTE[person.shoes]
    if person.pattern != "solid":
        yy, xx = np.mgrid[0:IMG_H, 0:IMG_W]
        stripes = ((yy // 3) % 2 == 1) if person.pattern == "hstripe" else ((xx // 2) % 2 == 1)
        img[(lab == 3) & stripes] = PALETTE[person.pattern_color]
    return img


def apply_camera(base: np.ndarray, cam: Camera, noise: np.ndarray | None = None) -> np.ndarray:
    img = base.astype(np.float32) * np.asarray(cam.gain, dtype=np.float32) + np.float32(cam.bias)
    if noise is not None:
        img += noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render(person: ToyPerson, cam: Camera, rng: np.random.Generator) -> np.ndarray:
    base = render_base(person, rng)
    return apply_camera(base, cam, rng.normal(0, 6, size=base.shape).astype(np.float32))


def _render_split(people, cameras, rng, per_id: int, cam_offset: int = 0) -> Split:
    images, pids, cams, idx = [], [], [], []
    for person in people:
        counter: dict[int, int] = {}
        for k in range(per_id):
            c = (k + cam_offset) % len(cameras)
            images.append(render(person, cameras[c], rng))
            pids.append(person.pid)
            cams.append(c)
            idx.append(counter.get(c, 0))
            counter[c] = counter.get(c, 0) + 1
    return Split(np.stack(images), np.array(pids), np.array(cams), np.array(idx))


def generate_dataset(seed: int, n_ids: int, imgs_per_id: int = 8, n_cams: int = 2,
                     query_per_id: int = 2, gallery_per_id: int = 4, occlude_query: bool = True,
                     query_library: Library | None = None) -> ToyDataset:
    """Deterministic synthetic dataset.

    Train, query and gallery hold different renders of the same identities.
    Gallery images are holistic; query images are occluded with a held-out
    occluder library when ``occlude_query`` is set.
    """
    if n_ids < 2:
        raise DataError("n_ids must be >= 2")
    if n_cams < 1:
        raise DataError("n_cams must be >= 1")
    rng = np.random.default_rng([seed, 0xDA7A])
    people = make_people(rng, n_ids)
    cameras = make_cameras(rng, n_cams)
    train = _render_split(people, cameras, np.random.default_rng([seed, 1]), imgs_per_id)
    query = _render_split(people, cameras, np.random.default_rng([seed, 2]), query_per_id)
    gallery = _render_split(people, cameras, np.random.default_rng([seed, 3]), gallery_per_id, cam_offset=1)
    if occlude_query:
        lib = query_library or make_synthetic_library(seed + 10_000, 16)
        qrng = np.random.default_rng([seed, 4])
        query.images = np.stack([oia.augment_image(img, lib, qrng)[0] for img in query.images])
    meta = {"seed": seed, "n_ids": n_ids, "imgs_per_id": imgs_per_id, "n_cams": n_cams,
            "query_per_id": query_per_id, "gallery_per_id": gallery_per_id,
            "occlude_query": occlude_query}
    return ToyDataset(train, query, gallery, n_cams, meta)


# -- on-disk layout: <split>/<pid>_<cam>_<idx>.png plus splits.json -------------

NAME_RE = re.compile(r"^(\d+)_(\d+)_(\d+)\.png$")
SPLITS = ("train", "query", "gallery")


def save_dataset(ds: ToyDataset, root) -> Path:
    root = Path(root)
    manifest = {"version": 1, "n_cams": ds.n_cams, "meta": ds.meta, "splits": {}}
    for name in SPLITS:
        split: Split = getattr(ds, name)
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        files = split.names()
        for img, fn in zip(split.images, files):
            Image.fromarray(img, "RGB").save(d / fn)
        manifest["splits"][name] = files
    path = root / "splits.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_split_dir(directory) -> Split:
    """Read every ``<pid>_<cam>_<idx>.png`` in a directory (sorted by name)."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if NAME_RE.match(p.name))
    return _read_files(files)


def _read_files(files: list[Path]) -> Split:
    images, pids, cams, idx = [], [], [], []
    for f in files:
        m = NAME_RE.match(f.name)
        if not m:
            raise DataError(f"bad image name {f}")
        with Image.open(f) as im:
            images.append(np.asarray(im.convert("RGB")))
        pids.append(int(m.group(1)))
        cams.append(int(m.group(2)))
        idx.append(int(m.group(3)))
    if not images:
        raise DataError("no images found")
    return Split(np.stack(images), np.array(pids), np.array(cams), np.array(idx))


def load_dataset(root) -> ToyDataset:
    root = Path(root)
    mpath = root / "splits.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split manifest {mpath}: {exc}") from exc
    splits = {}
    for name in SPLITS:
        files = [root / name / fn for fn in manifest["splits"][name]]
        missing = [str(f) for f in files if not f.is_file()]
        if missing:
            raise DataError(f"missing images, e.g. {missing[0]}")
        splits[name] = _read_files(files)
    return ToyDataset(splits["train"], splits["query"], splits["gallery"],
                      int(manifest["n_cams"]), manifest.get("meta", {}))


# -- P x K sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class PkBatchSpec:
    P: int = 4
    K: int = 4

    def __post_init__(self):
        if self.K < 2:
            raise DataError("K must be >= 2 so every anchor has a positive")
        if self.P < 2:
            raise DataError("P must be >= 2 so every anchor has a negative")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def pk_batches(pids, spec: PkBatchSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches, each exactly P distinct identities x K images.

    Every identity's images are shuffled and cut into K-sized chunks; batches
    draw P identities that still have chunks. Identities left over at the end
    are topped up with fresh draws from others so the epoch covers every pid.
    """
    pids = np.asarray(pids)
    ids = np.unique(pids)
    if len(ids) < spec.P:
        raise DataError(f"need at least P={spec.P} identities, found {len(ids)}")
    pools = {}
    for pid in ids:
        members = np.flatnonzero(pids == pid)
        if len(members) < spec.K:
            raise DataError(f"pid {int(pid)} has {len(members)} images, fewer than K={spec.K}")
        members = rng.permutation(members)
        n_chunks = len(members) // spec.K
        pools[int(pid)] = [members[i * spec.K:(i + 1) * spec.K] for i in range(n_chunks)]

    batches = []
    while any(pools.values()):
        live = sorted(p for p, chunks in pools.items() if chunks)
        if len(live) >= spec.P:
            chosen = sorted(int(p) for p in rng.choice(live, size=spec.P, replace=False))
            batches.append(np.concatenate([pools[p].pop() for p in chosen]))
            continue
        others = sorted(int(p) for p in ids if int(p) not in live)
        extra = sorted(int(p) for p in rng.choice(others, size=spec.P - len(live), replace=False))
        parts = [pools[p].pop() for p in live]
        parts += [rng.choice(np.flatnonzero(pids == p), size=spec.K, replace=False) for p in extra]
        order = np.argsort(live + extra, kind="stable")
        batches.append(np.concatenate([parts[i] for i in order]))
    return batches


def iter_pk(pids, spec: PkBatchSpec, seed: int, epochs: int):
    """Epoch-indexed stream of (epoch, batch) pairs with per-epoch RNG substreams."""
    for epoch in range(epochs):
        for batch in pk_batches(pids, spec, np.random.default_rng([seed, 1, epoch])):
            yield epoch, batch
