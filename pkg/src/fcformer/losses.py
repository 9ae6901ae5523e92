"""Identity, cross hard triplet, completion-consistency and total losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .streams import FeatureTriplet, Heads, classify

DEFAULT_MARGIN = 0.3


class LossError(ValueError):
    pass


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; ``logits`` is (..., n_ids), labels broadcast over extra axes."""
    labels = np.asarray(labels, dtype=np.int64)
    n_ids = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_ids:
        raise LossError(f"label out of range [0, {n_ids}): {sorted(set(labels.tolist()))}")
    logp = nx.log_softmax(logits, axis=-1)
    lead = logits.shape[:-1]
    lab = labels.reshape(labels.shape + (1,) * (len(lead) - labels.ndim))
    onehot = (np.arange(n_ids) == np.broadcast_to(lab, lead)[..., None]).astype(np.float32)
    return -(logp * onehot).sum() * np.float32(1.0 / int(np.prod(lead)))


def id_loss(triplet: FeatureTriplet, labels, heads: Heads) -> Tensor:
    """CE of both global features plus the part-averaged CE of each part stream."""
    h, o = triplet.holistic, triplet.occluded
    return (cross_entropy(classify(heads, o.global_bn, "global"), labels)
            + cross_entropy(classify(heads, h.global_bn, "global"), labels)
            + cross_entropy(classify(heads, h.parts_bn, "holistic"), labels)
            + cross_entropy(classify(heads, o.parts_bn, "occluded"), labels))


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """B x B squared Euclidean distances between rows of a (B x D) and b (B x D)."""
    n, d = a.shape
    diff = a.reshape(n, 1, d) - b.reshape(1, b.shape[0], d)
    return (diff * diff).sum(axis=-1)


def mine_hard(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hardest positive (largest distance, same pid) and hardest negative per row.

    Ties go to the lowest column index.
    """
    same = labels[:, None] == labels[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    return pos, neg


def check_pk(labels: np.ndarray) -> None:
    pids, counts = np.unique(labels, return_counts=True)
    lonely = pids[counts < 2]
    if lonely.size:
        raise LossError(f"pid {int(lonely[0])} has no positive partner in the batch")
    if pids.size < 2:
        raise LossError(f"pid {int(pids[0])} has no negative in the batch")


def _hard_triplet_term(anchor: Tensor, other: Tensor, labels: np.ndarray, margin: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    dist = pairwise_sq_dist(anchor, other)
    pos, neg = mine_hard(dist.data, labels)
    rows = np.arange(len(labels))
    hinge = nx.relu(dist[rows, pos] - dist[rows, neg] + np.float32(margin))
    return hinge.sum(), pos, neg


def cht_loss(triplet: FeatureTriplet, labels, margin: float = DEFAULT_MARGIN, return_indices: bool = False):
    """Holistic part vectors as anchors; hardest positive/negative mined among the
    occluded features and, separately, among the completed features. Summed over anchors."""
    labels = np.asarray(labels)
    check_pk(labels)
    b = len(labels)
    anchor = triplet.holistic.parts.reshape(b, -1)
    loss, p1, n1 = _hard_triplet_term(anchor, triplet.occluded.parts.reshape(b, -1), labels, margin)
    idx = {"p1": p1, "n1": n1}
    if triplet.completed is not None:
        term, p2, n2 = _hard_triplet_term(anchor, triplet.completed.parts.reshape(b, -1), labels, margin)
        loss = loss + term
        idx.update(p2=p2, n2=n2)
    return (loss, idx) if return_indices else loss


def kl_divergence(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """KL(softmax(p) || softmax(q)) over the last axis, averaged over all other axes; q is detached."""
    logp = nx.log_softmax(logits_p, axis=-1)
    logq = nx.log_softmax(logits_q.detach(), axis=-1)
    kl = (nx.exp(logp) * (logp - logq)).sum(axis=-1)
    return kl.mean()


def fc2_loss(completed_bn: Tensor, holistic_bn: Tensor | None, heads: Heads, target_logits=None) -> Tensor:
    """Pull the completed parts' identity distribution toward the holistic one (same head).

    ``target_logits`` replaces the (detached) holistic logits with fixed values.
    """
    if target_logits is None:
        target_logits = classify(heads, holistic_bn, "holistic")
    return kl_divergence(classify(heads, completed_bn, "completed"), nx.as_tensor(target_logits))


@dataclass
class LossReport:
    id_loss: float
    fcd_loss: float
    cht_loss: float
    fc2_loss: float
    total: float
    margin: float = DEFAULT_MARGIN

    def as_row(self) -> dict[str, float]:
        return {"id": self.id_loss, "fcd": self.fcd_loss, "cht": self.cht_loss,
                "fc2": self.fc2_loss, "total": self.total}


def total_loss(id_: Tensor, fcd: Tensor | float, cht: Tensor, fc2: Tensor | float,
               margin: float = DEFAULT_MARGIN) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the four components; aborts on the first non-finite one."""
    parts = {"id": id_, "fcd": fcd, "cht": cht, "fc2": fc2}
    values = {}
    for name, t in parts.items():
        v = float(t.data) if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            raise LossError(f"loss component '{name}' is not finite ({v})")
        values[name] = v
    total = nx.as_tensor(id_)
    for name in ("fcd", "cht", "fc2"):
        total = total + parts[name]
    report = LossReport(values["id"], values["fcd"], values["cht"], values["fc2"],
                        sum(values.values()), margin)
    return total, report
