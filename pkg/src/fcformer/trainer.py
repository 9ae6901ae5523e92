"""End-to-end training loop: per-sample occlusion, dual-stream forward, four losses, SGD."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, oia
from .data import PkBatchSpec, Split, ToyDataset, iter_pk
from .encoder import EncoderConfig
from .fcd import FcdConfig, completion_loss
from .model import FCFormer, ModelConfig
from . import numerics as nx
from .numerics import load_tensors, save_tensors
from .oil import Library, load_library, make_synthetic_library
from .streams import classify

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "lr", "id", "fcd", "cht", "fc2", "total"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.008
    P: int = 4
    K: int = 4
    seed: int = 0
    margin: float = losses.DEFAULT_MARGIN
    lambda_cm: float = 3.0
    fcd_alpha: float = 0.7
    dec_depth: int = 2
    delta_min: float = 0.1
    delta_max: float = 0.7
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    dim: int = 64
    depth: int = 4
    heads: int = 4
    patch: int = 8
    m_parts: int = 4
    flip_pad: int = 2
    oia: bool = True
    use_fcd: bool = True
    fixed_placement: bool = False
    oil_manifest: str = ""
    oil_seed: int = 1
    oil_per_prior: int = 16
    checkpoint_every: int = 10
    clip_grad: float = 5.0   # global L2 norm; <= 0 disables

    def validate(self) -> list[str]:
        errs = []
        for name in ("epochs", "P", "K", "dim", "depth", "heads", "patch", "m_parts", "dec_depth"):
            v = getattr(self, name)
            if v < (0 if name in ("depth", "dec_depth") else 1):
                errs.append(f"{name} must be positive, got {v}")
        if self.base_lr < 0:
            errs.append(f"base_lr must be >= 0, got {self.base_lr}")
        if self.margin < 0:
            errs.append(f"margin must be >= 0, got {self.margin}")
        if not 0 < self.delta_min <= self.delta_max < 1:
            errs.append(f"delta range ({self.delta_min}, {self.delta_max}) must lie inside (0, 1)")
        if not 0 <= self.warmup_frac < 1:
            errs.append(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.K < 2:
            errs.append("K must be >= 2")
        if self.P < 2:
            errs.append("P must be >= 2")
        return errs

    def model_config(self, n_ids: int, n_cams: int, img_hw: tuple[int, int]) -> ModelConfig:
        enc = EncoderConfig(img_h=img_hw[0], img_w=img_hw[1], patch=self.patch, dim=self.dim,
                            depth=self.depth, heads=self.heads, n_cameras=n_cams,
                            lambda_cm=self.lambda_cm, m_parts=self.m_parts)
        return ModelConfig(enc, FcdConfig(self.fcd_alpha, self.dec_depth), n_ids, self.use_fcd)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    return base_lr * (1 + math.cos(math.pi * step / total_steps)) / 2


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Cosine decay from ``base_lr`` to 0, scaled by a linear ramp over the first warmup steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr = cosine_lr(step, total_steps, base_lr)
    warmup = int(round(warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        lr *= (step + 1) / (warmup + 1)
    return lr


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class SGD:
    """Momentum SGD with coupled weight decay (the usual torch.optim.SGD update)."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = np.float32(momentum)
        self.weight_decay = np.float32(weight_decay)
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        lr = np.float32(lr)
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers.get(p.name)
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[p.name] = buf
            p.data = p.data - lr * buf

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"optim.momentum.{k}": v for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        prefix = "optim.momentum."
        self.buffers = {k[len(prefix):]: np.array(v, dtype=np.float32)
                        for k, v in state.items() if k.startswith(prefix)}


def prepare_pairs(images: np.ndarray, pids, cams, cfg: TrainConfig, lib: Library | None,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flip/pad each image, then occlude a copy. Both pair members share the geometry."""
    holistic = np.stack([oia.random_flip_pad(img, rng, cfg.flip_pad) if cfg.flip_pad >= 0 else img
                         for img in images])
    if not cfg.oia:
        return holistic, holistic.copy()
    batch = list(zip(holistic, pids, cams))
    pairs = oia.augment_batch(batch, lib, rng, (cfg.delta_min, cfg.delta_max), fixed=cfg.fixed_placement)
    return holistic, np.stack([p.occluded for p in pairs])


def detached_targets(model: FCFormer, holistic, occluded, cams) -> dict[str, np.ndarray]:
    """Values of the two gradient-detached targets (holistic patch tokens and holistic part logits)."""
    with nx.no_grad():
        out = model(holistic, occluded, cams)
        logits = classify(model.head, out.triplet.holistic.parts_bn, "holistic")
    return {"f_ht": out.f_ht.data, "holistic_logits": logits.data}


def compute_losses(model: FCFormer, holistic, occluded, cams, labels, margin: float,
                   frozen: dict[str, np.ndarray] | None = None):
    """Forward plus the four losses.

    ``frozen`` pins the detached targets to fixed arrays; the gradient is the
    same either way, but a finite-difference check then sees the function the
    optimizer actually differentiates.
    """
    out = model(holistic, occluded, cams)
    t = out.triplet
    id_ = losses.id_loss(t, labels, model.head)
    cht = losses.cht_loss(t, labels, margin)
    if model.cfg.use_fcd:
        if frozen is None:
            fcd = completion_loss(out.f_cp, out.f_ht)
            fc2 = losses.fc2_loss(t.completed.parts_bn, t.holistic.parts_bn, model.head)
        else:
            fcd = completion_loss(out.f_cp, frozen["f_ht"])
            fc2 = losses.fc2_loss(t.completed.parts_bn, None, model.head, frozen["holistic_logits"])
    else:
        fcd, fc2 = 0.0, 0.0
    return losses.total_loss(id_, fcd, cht, fc2, margin)


def train_step(batch: tuple[np.ndarray, np.ndarray, np.ndarray], model: FCFormer, optimizer: SGD,
               lr: float, rng: np.random.Generator, lib: Library | None, cfg: TrainConfig) -> losses.LossReport:
    """One iteration: augment, forward, losses, backward, update. ``batch`` is (images, labels, cams)."""
    images, labels, cams = batch
    holistic, occluded = prepare_pairs(images, labels, cams, cfg, lib, rng)
    model.train()
    model.zero_grad()
    total, report = compute_losses(model, holistic, occluded, cams, labels, cfg.margin)
    total.backward()
    if not math.isfinite(clip_grad_norm(optimizer.params, cfg.clip_grad)):
        raise TrainingError("non-finite gradient")
    optimizer.step(lr)
    return report


@dataclass
class FitResult:
    model: FCFormer
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    steps: int = 0


def build_library(cfg: TrainConfig) -> Library | None:
    if not cfg.oia:
        return None
    if cfg.oil_manifest:
        return load_library(cfg.oil_manifest)
    return make_synthetic_library(cfg.oil_seed, cfg.oil_per_prior)


def label_map(train: Split) -> dict[int, int]:
    return {int(p): i for i, p in enumerate(np.unique(train.pids))}


def save_checkpoint(path, model: FCFormer, optimizer: SGD, cfg: TrainConfig, step: int,
                    pid_map: dict[int, int]) -> Path:
    state = dict(model.state_dict())
    state.update(optimizer.state_dict())
    meta = {
        "step": step,
        "train_config": dataclasses.asdict(cfg),
        "model_config": {"encoder": dataclasses.asdict(model.cfg.encoder),
                         "fcd": dataclasses.asdict(model.cfg.fcd),
                         "n_ids": model.cfg.n_ids, "use_fcd": model.cfg.use_fcd},
        "pid_map": {str(k): v for k, v in pid_map.items()},
    }
    save_tensors(path, state, meta)
    return Path(path)


def load_model(path) -> tuple[FCFormer, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, meta, raw tensors)."""
    tensors, meta = load_tensors(path)
    mc = meta["model_config"]
    cfg = ModelConfig(EncoderConfig(**mc["encoder"]), FcdConfig(**mc["fcd"]), mc["n_ids"], mc["use_fcd"])
    model = FCFormer(cfg, seed=meta.get("train_config", {}).get("seed", 0))
    model.load_state_dict(tensors)
    return model, meta, tensors


def fit(cfg: TrainConfig, dataset: ToyDataset, run_dir=None, resume=None,
        max_steps: int | None = None) -> FitResult:
    """Train on ``dataset.train``. Writes ``metrics.csv`` and checkpoints into ``run_dir``.

    Every source of randomness is a substream of ``cfg.seed``: batches per
    epoch, augmentation per global step, initialisation per model. A resumed
    run therefore continues exactly where the checkpoint left off.
    """
    errs = cfg.validate()
    if errs:
        raise TrainingError("invalid config: " + "; ".join(errs))
    train = dataset.train
    pid_map = label_map(train)
    labels_all = np.array([pid_map[int(p)] for p in train.pids])
    mcfg = cfg.model_config(len(pid_map), dataset.n_cams, train.images.shape[1:3])
    model = FCFormer(mcfg, seed=cfg.seed)
    optimizer = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    lib = build_library(cfg)

    plan = list(iter_pk(labels_all, PkBatchSpec(cfg.P, cfg.K), cfg.seed, cfg.epochs))
    total_steps = len(plan)
    start = 0
    if resume is not None:
        tensors, meta = load_tensors(resume)
        model.load_state_dict(tensors)
        optimizer.load_state_dict(tensors)
        start = int(meta["step"])

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = writer = None
    if run_dir is not None:
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = run_dir / "metrics.csv"
            if resume is not None and metrics_path.exists():
                # drop rows past the checkpoint, then append
                rows = list(csv.reader(metrics_path.open()))
                keep = [r for r in rows[1:] if int(r[0]) < start]
                metrics_fh = metrics_path.open("w", newline="")
                writer = csv.writer(metrics_fh)
                writer.writerow(METRICS_HEADER)
                writer.writerows(keep)
            else:
                metrics_fh = metrics_path.open("w", newline="")
                writer = csv.writer(metrics_fh)
                writer.writerow(METRICS_HEADER)
        except OSError as exc:
            raise TrainingError(f"cannot write metrics under {run_dir}: {exc}") from exc

    result = FitResult(model)
    end = total_steps if max_steps is None else min(total_steps, start + max_steps)
    steps_per_epoch = total_steps // cfg.epochs
    try:
        for step in range(start, end):
            epoch, idx = plan[step]
            lr = lr_at(step, total_steps, cfg.base_lr, cfg.warmup_frac)
            rng = np.random.default_rng([cfg.seed, 2, step])
            batch = (train.images[idx], labels_all[idx], train.cams[idx])
            running = {k: v.copy() for k, v in model.named_buffers()}
            try:
                report = train_step(batch, model, optimizer, lr, rng, lib, cfg)
            except (losses.LossError, TrainingError) as exc:
                # both checks fire before the update, so only the BN running stats need rolling back
                model.load_state_dict({**model.state_dict(), **running})
                msg = f"step {step}: {exc}"
                if run_dir is not None:
                    good = save_checkpoint(run_dir / "last_good.fcf", model, optimizer, cfg, step, pid_map)
                    msg += f"; last good state saved to {good}"
                raise TrainingError(msg) from exc
            row = {"step": step, "lr": lr, **report.as_row()}
            result.history.append(row)
            if writer is not None:
                writer.writerow([row[k] if k == "step" else repr(float(row[k])) for k in METRICS_HEADER])
            done = step + 1
            if run_dir is not None and cfg.checkpoint_every > 0 and steps_per_epoch > 0:
                if done % (steps_per_epoch * cfg.checkpoint_every) == 0 and done < total_steps:
                    save_checkpoint(run_dir / f"ckpt_step{done}.fcf", model, optimizer, cfg, done, pid_map)
            if step % max(1, steps_per_epoch) == 0:
                log.info("step %d/%d epoch %d lr %.5f total %.4f", step, total_steps, epoch, lr, report.total)
        result.steps = end
        if run_dir is not None:
            result.checkpoint = save_checkpoint(run_dir / "model.fcf", model, optimizer, cfg, end, pid_map)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


def model_grad_check(cfg: TrainConfig, n_ids: int = 2, k: int = 2, seed: int = 0,
                     max_elements: int | None = 64, h: float = 1e-3, tol: float = 1e-2):
    """Finite-difference check of the full training loss w.r.t. every model parameter.

    Uses a fixed P x K batch of toy images and one fixed augmentation draw, so
    the loss is a deterministic function of the parameters.
    """
    from .data import generate_dataset
    from .numerics import grad_check

    ds = generate_dataset(seed, n_ids, imgs_per_id=max(k, 2), n_cams=2)
    train = ds.train
    pid_map = label_map(train)
    labels = np.array([pid_map[int(p)] for p in train.pids])
    idx = np.concatenate([np.flatnonzero(labels == c)[:k] for c in range(n_ids)])
    rng = np.random.default_rng([seed, 3])
    holistic, occluded = prepare_pairs(train.images[idx], labels[idx], train.cams[idx], cfg,
                                       build_library(cfg), rng)
    model = FCFormer(cfg.model_config(n_ids, ds.n_cams, train.images.shape[1:3]), seed=seed)
    model.train()
    cams = train.cams[idx]
    frozen = detached_targets(model, holistic, occluded, cams)

    def loss():
        return compute_losses(model, holistic, occluded, cams, labels[idx], cfg.margin, frozen)[0]

    return grad_check(loss, model.parameters(), h=h, tol=tol, max_elements=max_elements,
                      rng=np.random.default_rng([seed, 4]))
