"""Retrieval features and CMC / mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import oia
from .numerics import save_tensors


class EvalError(ValueError):
    pass


@dataclass
class GalleryIndex:
    features: np.ndarray  # n x D, rows L2-normalised
    pids: np.ndarray
    cams: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pids = np.asarray(self.pids)
        self.cams = np.asarray(self.cams)
        n = len(self.features)
        if self.features.ndim != 2:
            raise EvalError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.pids) != n or len(self.cams) != n:
            raise EvalError(f"misaligned index: {n} features, {len(self.pids)} pids, {len(self.cams)} cams")

    def __len__(self) -> int:
        return len(self.pids)


def build_index(model, images: np.ndarray, cams, pids, batch_size: int = 64) -> GalleryIndex:
    """Extract descriptors in batches; ``model`` must already be in eval mode."""
    cams = np.asarray(cams)
    feats = [model.extract(images[i:i + batch_size], cams[i:i + batch_size])
             for i in range(0, len(images), batch_size)]
    return GalleryIndex(np.concatenate(feats), pids, cams)


@dataclass
class RetrievalReport:
    cmc: np.ndarray            # cmc[k-1] = CMC@k
    mAP: float
    n_queries: int
    excluded_queries: int
    ap: np.ndarray = field(repr=False, default=None)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_json(self, ranks=(1, 5, 10)) -> dict:
        return {"cmc": {str(k): self.rank(k) for k in ranks},
                "cmc_curve": [float(v) for v in self.cmc],
                "mAP": float(self.mAP),
                "n_queries": self.n_queries,
                "excluded_queries": self.excluded_queries}


def cosine_distance(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return 1.0 - qn @ gn.T


def cmc_map(query: GalleryIndex, gallery: GalleryIndex) -> RetrievalReport:
    """CMC curve and mAP with the same-pid-same-camera exclusion.

    Gallery items sharing both pid and camera with the query are dropped
    from that query's ranking. Ties in distance keep gallery order. Queries
    left without any correct match are excluded and counted.
    """
    if len(gallery) == 0:
        raise EvalError("empty gallery")
    dist = cosine_distance(query.features, gallery.features)
    order = np.argsort(dist, axis=1, kind="stable")
    g_pids, g_cams = gallery.pids[order], gallery.cams[order]
    match = g_pids == query.pids[:, None]
    junk = match & (g_cams == query.cams[:, None])
    m = len(gallery)
    cmc_sum = np.zeros(m)
    aps = []
    for i in range(len(query)):
        keep = ~junk[i]
        hits = match[i][keep]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        cmc_sum[first:] += 1
        hit_pos = np.flatnonzero(hits)
        precision = np.arange(1, len(hit_pos) + 1) / (hit_pos + 1)
        aps.append(precision.mean())
    valid = len(aps)
    if valid == 0:
        raise EvalError("no query has a valid gallery match")
    return RetrievalReport(cmc_sum / valid, float(np.mean(aps)), len(query), len(query) - valid, np.array(aps))


def evaluate_dataset(model, dataset) -> RetrievalReport:
    """Query split against gallery split of a ``ToyDataset``; switches the model to eval mode."""
    model.eval()
    q = build_index(model, dataset.query.images, dataset.query.cams, dataset.query.pids)
    g = build_index(model, dataset.gallery.images, dataset.gallery.cams, dataset.gallery.pids)
    return cmc_map(q, g)


def completion_errors(model, images: np.ndarray, cams, lib, rng: np.random.Generator,
                      batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance token MSE against the holistic patch tokens, for the completed and the occluded tokens.

    Each image is occluded once with ``lib``; the model runs in eval mode.
    """
    if not model.cfg.use_fcd:
        raise EvalError("model has no completion decoder")
    model.eval()
    cams = np.asarray(cams)
    completed, occluded = [], []
    for i in range(0, len(images), batch_size):
        imgs, cb = images[i:i + batch_size], cams[i:i + batch_size]
        pairs = oia.augment_batch([(img, 0, int(c)) for img, c in zip(imgs, cb)], lib, rng)
        with nx.no_grad():
            out = model(imgs, np.stack([p.occluded for p in pairs]), cb)
        ht = out.f_ht.data
        completed.append(((out.f_cp.data - ht) ** 2).mean(axis=(1, 2)))
        occluded.append(((out.f_ot.data - ht) ** 2).mean(axis=(1, 2)))
    return np.concatenate(completed), np.concatenate(occluded)


def format_table(report: RetrievalReport, ranks=(1, 5, 10)) -> str:
    head = " ".join(f"Rank-{k}" for k in ranks) + " mAP"
    vals = " ".join(f"{report.rank(k):.4f}".rjust(len(f"Rank-{k}")) for k in ranks)
    return f"{head}\n{vals} {report.mAP:.4f}"


def dump_features(path, index: GalleryIndex, meta: dict | None = None) -> Path:
    """Write features as an FCF1 file plus a sidecar JSON with pids and cams."""
    path = Path(path)
    save_tensors(path, {"features": index.features.astype(np.float32)}, meta or {})
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"pids": index.pids.tolist(), "cams": index.cams.tolist()}))
    return path
