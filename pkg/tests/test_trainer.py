import csv
import dataclasses
import math

import numpy as np
import pytest

from fcformer import trainer
from fcformer.data import generate_dataset
from fcformer.model import FCFormer
from fcformer.numerics import Tensor, load_tensors
from fcformer.numerics.nn import Parameter
from fcformer.trainer import (SGD, TrainConfig, TrainingError, build_library, clip_grad_norm, fit, load_model,
                              lr_at, save_checkpoint, train_step)

# small enough for a few seconds of training; structure is the toy model's
SMALL = TrainConfig(epochs=2, dim=16, depth=1, heads=2, dec_depth=1, checkpoint_every=1)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(0, 4, imgs_per_id=8)


def _batch_setup(cfg, ds):
    tr = ds.train
    pid_map = trainer.label_map(tr)
    labels = np.array([pid_map[int(p)] for p in tr.pids])
    model = FCFormer(cfg.model_config(len(pid_map), ds.n_cams, tr.images.shape[1:3]), seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    return model, opt, labels


def _metrics(run_dir):
    with (run_dir / "metrics.csv").open() as fh:
        return list(csv.reader(fh))


# -- schedule and optimizer -------------------------------------------------------

def test_lr_schedule_examples():
    assert lr_at(0, 100, 0.008, warmup_frac=0.0) == 0.008
    assert lr_at(50, 100, 0.008, warmup_frac=0.0) == pytest.approx(0.004)
    assert lr_at(100, 100, 0.008) == pytest.approx(0.0, abs=1e-12)
    # linear ramp over the first 5 steps
    ramp = [lr_at(s, 100, 1.0) / lr_at(s, 100, 1.0, warmup_frac=0.0) for s in range(6)]
    np.testing.assert_allclose(ramp, [1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6, 1.0])
    with pytest.raises(ValueError):
        lr_at(101, 100, 0.008)
    with pytest.raises(ValueError):
        lr_at(-1, 100, 0.008)


def test_lr_is_monotone_after_warmup():
    lrs = [lr_at(s, 200, 0.008) for s in range(10, 201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_matches_hand_update():
    w = Parameter(np.array([1.0, -2.0], np.float32), name="w")
    opt = SGD([w], momentum=0.9, weight_decay=0.1)
    w.grad = np.array([0.5, 0.5], np.float32)
    opt.step(0.1)
    v1 = np.array([0.5 + 0.1, 0.5 - 0.2], np.float32)
    w1 = np.array([1.0, -2.0], np.float32) - np.float32(0.1) * v1
    np.testing.assert_allclose(w.data, w1, rtol=1e-6)
    w.grad = np.array([0.0, 1.0], np.float32)
    opt.step(0.1)
    v2 = np.float32(0.9) * v1 + np.array([0.0, 1.0], np.float32) + np.float32(0.1) * w1
    np.testing.assert_allclose(w.data, w1 - np.float32(0.1) * v2, rtol=1e-6)
    assert set(opt.state_dict()) == {"optim.momentum.w"}


def test_clip_grad_norm():
    a = Tensor(np.zeros(2, np.float32), requires_grad=True)
    b = Tensor(np.zeros(1, np.float32), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(5.0)
    assert a.grad[0] == 3.0
    clip_grad_norm([a, b], 1.0)
    assert math.sqrt(float(a.grad @ a.grad + b.grad @ b.grad)) == pytest.approx(1.0, rel=1e-5)


def test_config_validation():
    errs = TrainConfig(delta_min=0.8, delta_max=0.5, K=1, epochs=0).validate()
    assert len(errs) >= 3


# -- steps ------------------------------------------------------------------------

def test_zero_lr_leaves_parameters_unchanged(tiny_ds):
    model, opt, labels = _batch_setup(SMALL, tiny_ds)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    idx = np.arange(16)
    train_step((tiny_ds.train.images[idx], labels[idx], tiny_ds.train.cams[idx]), model, opt, 0.0,
               np.random.default_rng(0), build_library(SMALL), SMALL)
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_single_batch_overfit():
    # toy model, one fixed batch with a fixed augmentation, constant lr
    cfg = TrainConfig()
    ds = generate_dataset(0, 4, imgs_per_id=4)
    model, opt, labels = _batch_setup(cfg, ds)
    lib = build_library(cfg)
    batch = (ds.train.images, labels, ds.train.cams)
    totals = [train_step(batch, model, opt, 0.004, np.random.default_rng([0, 9]), lib, cfg).total
              for _ in range(200)]
    assert totals[-1] <= 0.2 * totals[0], (totals[0], totals[-1])


def test_dead_parameter_audit(tiny_ds):
    cfg = dataclasses.replace(SMALL, epochs=1)
    model, opt, labels = _batch_setup(cfg, tiny_ds)
    lib = build_library(cfg)
    touched = set()
    for step, (_, idx) in enumerate(trainer.iter_pk(labels, trainer.PkBatchSpec(cfg.P, cfg.K), 0, 1)):
        batch = (tiny_ds.train.images[idx], labels[idx], tiny_ds.train.cams[idx])
        train_step(batch, model, opt, 0.001, np.random.default_rng([0, step]), lib, cfg)
        touched |= {n for n, p in model.named_parameters() if p.grad is not None and np.any(p.grad != 0)}
    dead = {n for n, _ in model.named_parameters()} - touched
    assert not dead, sorted(dead)


# -- fit --------------------------------------------------------------------------

def test_fit_is_deterministic(tmp_path, tiny_ds):
    fit(SMALL, tiny_ds, run_dir=tmp_path / "a", max_steps=4)
    fit(SMALL, tiny_ds, run_dir=tmp_path / "b", max_steps=4)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    ta, _ = load_tensors(tmp_path / "a" / "model.fcf")
    tb, _ = load_tensors(tmp_path / "b" / "model.fcf")
    assert all(np.array_equal(ta[k], tb[k]) for k in ta)


def test_metrics_rows_and_checkpoints(tmp_path, tiny_ds):
    res = fit(SMALL, tiny_ds, run_dir=tmp_path)
    rows = _metrics(tmp_path)
    assert rows[0] == trainer.METRICS_HEADER
    assert len(rows) - 1 == res.steps == len(res.history)
    assert [int(r[0]) for r in rows[1:]] == list(range(res.steps))
    per_epoch = res.steps // SMALL.epochs
    assert (tmp_path / f"ckpt_step{per_epoch}.fcf").exists()
    assert res.checkpoint == tmp_path / "model.fcf"


def test_resume_matches_uninterrupted(tmp_path, tiny_ds):
    full = fit(SMALL, tiny_ds, run_dir=tmp_path / "full")
    fit(SMALL, tiny_ds, run_dir=tmp_path / "part", max_steps=3)
    resumed = fit(SMALL, tiny_ds, run_dir=tmp_path / "part", resume=tmp_path / "part" / "model.fcf")
    assert resumed.steps == full.steps
    a, b = _metrics(tmp_path / "full"), _metrics(tmp_path / "part")
    assert len(a) == len(b)
    for ra, rb in zip(a[1:], b[1:]):
        assert ra[0] == rb[0]
        np.testing.assert_allclose([float(v) for v in rb[1:]], [float(v) for v in ra[1:]], rtol=1e-6, atol=1e-6)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_ds):
    res = fit(SMALL, tiny_ds, max_steps=2)
    opt = SGD(res.model.parameters())
    opt.buffers = {n: np.full(p.shape, 0.5, np.float32) for n, p in res.model.named_parameters()}
    path = save_checkpoint(tmp_path / "m.fcf", res.model, opt, SMALL, 2, {10: 0})
    model, meta, tensors = load_model(path)
    assert meta["step"] == 2 and meta["pid_map"] == {"10": 0}
    orig = res.model.state_dict()
    assert set(orig) <= set(model.state_dict())
    for k, v in orig.items():
        assert np.array_equal(model.state_dict()[k], v), k
    restored = SGD(model.parameters())
    restored.load_state_dict(tensors)
    assert all(np.array_equal(restored.buffers[n], opt.buffers[n]) for n in opt.buffers)


def test_non_finite_loss_saves_last_good(tmp_path, tiny_ds, monkeypatch):
    real = trainer.completion_loss
    calls = {"n": 0}

    def flaky(f_cp, f_ht):
        calls["n"] += 1
        out = real(f_cp, f_ht)
        return out * np.float32(np.nan) if calls["n"] == 3 else out

    monkeypatch.setattr(trainer, "completion_loss", flaky)
    with pytest.raises(TrainingError, match="step 2.*'fcd'.*last_good"):
        fit(SMALL, tiny_ds, run_dir=tmp_path / "bad")
    monkeypatch.setattr(trainer, "completion_loss", real)
    fit(SMALL, tiny_ds, run_dir=tmp_path / "ok", max_steps=2)
    good, meta = load_tensors(tmp_path / "bad" / "last_good.fcf")
    ref, _ = load_tensors(tmp_path / "ok" / "model.fcf")
    assert meta["step"] == 2
    assert all(np.array_equal(good[k], ref[k]) for k in ref)


def test_invalid_config_raises(tiny_ds):
    with pytest.raises(TrainingError, match="invalid config"):
        fit(dataclasses.replace(SMALL, K=1), tiny_ds)


def test_ablation_switches(tiny_ds):
    no_fcd = fit(dataclasses.replace(SMALL, use_fcd=False), tiny_ds, max_steps=1)
    assert no_fcd.history[0]["fcd"] == 0.0 and no_fcd.history[0]["fc2"] == 0.0
    no_oia = fit(dataclasses.replace(SMALL, oia=False), tiny_ds, max_steps=1)
    assert no_oia.history[0]["total"] > 0
