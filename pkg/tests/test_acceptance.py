"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The two training criteria run real trainings (several minutes each on one core).
"""

import os
import time

import numpy as np
import pytest

from fcformer import numerics as nx
from fcformer import oia
from fcformer.data import generate_dataset
from fcformer.encoder import ConfigError, Encoder, EncoderConfig, split_parts
from fcformer.evaluate import EvalError, GalleryIndex, cmc_map, completion_errors, evaluate_dataset
from fcformer.fcd import FcdConfig, completion_loss
from fcformer.losses import cht_loss, cross_entropy, fc2_loss
from fcformer.model import FCFormer
from fcformer.numerics import Tensor, load_tensors
from fcformer.oil import Prior, make_synthetic_library
from fcformer.streams import FeatureTriplet, Heads, StreamFeatures
from fcformer.trainer import TrainConfig, build_library, fit, load_model, model_grad_check

from reference import ref_cht, ref_cross_entropy, ref_kl, ref_mine, ref_mse, reference_cmc_map

SEEDS = (0, 1, 2)
# end-to-end recipe: 8 identities, 30 epochs
E2E_DATA = dict(n_ids=8, imgs_per_id=64, query_per_id=16)
E2E_TRAIN = dict(epochs=30, base_lr=0.016)
# completion recipe: 32 identities; completion keeps improving well past 30 epochs
FCD_DATA = dict(n_ids=32, imgs_per_id=16, query_per_id=4)
FCD_TRAIN = dict(epochs=60, base_lr=0.016)

def _dataset(seed, n_ids, imgs_per_id, query_per_id, occlude_query=True):
    return generate_dataset(seed, n_ids, imgs_per_id=imgs_per_id, query_per_id=query_per_id,
                            occlude_query=occlude_query)


def _train(seed, data, train, **overrides):
    ds = _dataset(seed, **data)
    cfg = TrainConfig(seed=seed, **train, **overrides)
    t0 = time.perf_counter()
    res = fit(cfg, ds)
    return res.model, ds, time.perf_counter() - t0


# -- 1 ----------------------------------------------------------------------------

def test_criterion_1_gradient_integrity(criterion):
    cfg = TrainConfig()  # dim 64, depth 4, dec_depth 2, N=32, 4 parts
    t0 = time.perf_counter()
    report = model_grad_check(cfg, max_elements=64, tol=1e-2)
    elapsed = time.perf_counter() - t0
    model = FCFormer(cfg.model_config(2, 2, (64, 32)), seed=0)
    sizes = {n: p.data.size for n, p in model.named_parameters()}
    covered = all(report.per_param.get(n, 0) >= min(64, s) for n, s in sizes.items())
    ok = report.ok and covered and elapsed < 300
    detail = (f"{report.checked} elements over {len(sizes)} parameters, max error {report.max_error:.2e}, "
              f"{elapsed:.0f}s on {os.cpu_count()} core(s)")
    if not report.ok:
        detail += f", failing: {report.failed_params[:5]}"
    assert criterion(1, "gradient integrity", ok, detail), detail


# -- 2 ----------------------------------------------------------------------------

def _feats(rng, b, m, c):
    parts = rng.normal(size=(b, m, c)).astype(np.float32)
    g = rng.normal(size=(b, c)).astype(np.float32)
    return StreamFeatures(Tensor(g), Tensor(parts), Tensor(g), Tensor(parts))


def _err(got, ref):
    # float32 results against float64 loops; values above 1 are compared relatively
    return abs(float(got) - ref) / max(1.0, abs(ref))


def test_criterion_2_loss_oracles(criterion):
    worst = {"cht": 0.0, "ce": 0.0, "fc2": 0.0, "mse": 0.0}
    index_mismatch = 0
    for seed in range(100):
        rng = np.random.default_rng([2, seed])
        labels = rng.permutation(np.repeat([0, 1], 4))
        h, o, c = (_feats(rng, 8, 4, 3) for _ in range(3))
        loss, idx = cht_loss(FeatureTriplet(h, o, c), labels, 0.3, return_indices=True)
        a = h.parts.data.reshape(8, -1)
        for other, pk, nk in ((o, "p1", "n1"), (c, "p2", "n2")):
            pos, neg = ref_mine(a, other.parts.data.reshape(8, -1), labels)
            index_mismatch += list(idx[pk]) != [p for p, _ in pos] or list(idx[nk]) != [n for n, _ in neg]
        worst["cht"] = max(worst["cht"], _err(loss.data, ref_cht(h.parts.data, o.parts.data,
                                                                   c.parts.data, labels, 0.3)))

        logits = (rng.normal(size=(8, 4, 8)) * 3).astype(np.float32)
        y = rng.integers(0, 8, size=8)
        worst["ce"] = max(worst["ce"], _err(cross_entropy(Tensor(logits), y).data, ref_cross_entropy(logits, y)))

        heads = Heads(6, 8, rng)
        heads.holistic.weight.data = rng.normal(size=(6, 8)).astype(np.float32)
        comp, hol = (rng.normal(size=(8, 4, 6)).astype(np.float32) for _ in range(2))
        w = heads.holistic.weight.data
        worst["fc2"] = max(worst["fc2"], _err(fc2_loss(Tensor(comp), Tensor(hol), heads).data,
                                              ref_kl(comp @ w, hol @ w)))

        x, t = (rng.normal(size=(4, 8, 6)).astype(np.float32) for _ in range(2))
        worst["mse"] = max(worst["mse"], _err(completion_loss(Tensor(x), Tensor(t)).data, ref_mse(x, t)))
    ok = index_mismatch == 0 and all(v <= 1e-6 for v in worst.values())
    detail = "100 batches each, max error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    detail += f", mined-index mismatches {index_mismatch}"
    assert criterion(2, "loss oracles", ok, detail), detail


# -- 3 ----------------------------------------------------------------------------

def test_criterion_3_oia_geometry(criterion):
    rng = np.random.default_rng(3)
    lib = make_synthetic_library(1, 16)
    fracs, strong_touch, strong_n, outside_ok = [], 0, 0, 0
    for _ in range(1000):
        img = rng.integers(0, 256, (64, 32, 3)).astype(np.uint8)
        occluded, mask, inst, _ = oia.augment_image(img, lib, rng)
        fracs.append(mask.mean())
        keep = mask == 0
        outside_ok += bool(np.array_equal(occluded[keep], img[keep]))
        if inst.prior is Prior.STRONG:
            strong_n += 1
            strong_touch += bool(mask[-1].any())
    ok = (min(fracs) >= 0.05 and max(fracs) <= 0.75 and strong_touch == strong_n and outside_ok == 1000)
    detail = (f"fraction in [{min(fracs):.3f}, {max(fracs):.3f}], strong touching bottom {strong_touch}/{strong_n}, "
              f"bit-exact outside mask {outside_ok}/1000")
    assert criterion(3, "augmentation geometry", ok, detail), detail


# -- 4 ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def completion_runs():
    runs = {}
    for seed in SEEDS:
        for use_fcd in (True, False):
            model, ds, elapsed = _train(seed, FCD_DATA, FCD_TRAIN, use_fcd=use_fcd)
            runs[seed, use_fcd] = (model, ds, elapsed)
    return runs


def test_criterion_4_completion_effect(criterion, completion_runs):
    gaps, maps = [], {}
    better, total = 0, 0
    lib = build_library(TrainConfig())
    for seed in SEEDS:
        full, ds, _ = completion_runs[seed, True]
        ablated, _, _ = completion_runs[seed, False]
        m_full, m_abl = evaluate_dataset(full, ds).mAP, evaluate_dataset(ablated, ds).mAP
        maps[seed] = (m_full, m_abl)
        gaps.append(m_full - m_abl)
        # held-out pairs: the gallery split never enters training
        e_cp, e_ot = completion_errors(full, ds.gallery.images, ds.gallery.cams, lib,
                                       np.random.default_rng([seed, 7]))
        better += int((e_cp < e_ot).sum())
        total += len(e_cp)
    med = float(np.median(gaps))
    frac = better / total
    ok = med > 0 and frac >= 0.9
    detail = ("mAP full/ablated " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in maps.values())
              + f", median gain {med:+.3f}; completed closer than occluded on {better}/{total} = {frac:.2f}")
    assert criterion(4, "completion effect", ok, detail), detail


# -- 5 ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e_runs():
    runs = {}
    for seed in SEEDS:
        for use_oia in (True, False):
            runs[seed, use_oia] = _train(seed, E2E_DATA, E2E_TRAIN, oia=use_oia)
    return runs


def test_criterion_5_end_to_end(criterion, e2e_runs):
    rank1, gaps, slowest = {}, [], 0.0
    for seed in SEEDS:
        full, ds, t_full = e2e_runs[seed, True]
        base, _, t_base = e2e_runs[seed, False]
        r_full, r_base = evaluate_dataset(full, ds).rank(1), evaluate_dataset(base, ds).rank(1)
        rank1[seed] = (r_full, r_base)
        gaps.append(r_full - r_base)
        slowest = max(slowest, t_full, t_base)
    med = float(np.median([v[0] for v in rank1.values()]))
    ok = med >= 0.9 and all(g > 0 for g in gaps) and slowest < 900
    detail = ("Rank-1 with/without OIA " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in rank1.values())
              + f", median {med:.3f}, slowest training {slowest:.0f}s")
    assert criterion(5, "end-to-end learning", ok, detail), detail


# -- 6 ----------------------------------------------------------------------------

def test_criterion_6_metric_correctness(criterion):
    rng = np.random.default_rng(6)
    worst, compared = 0.0, 0
    while compared < 50:
        qf, gf = rng.normal(size=(20, 8)), rng.normal(size=(30, 8))
        qp, qc = rng.integers(0, 6, 20), rng.integers(0, 3, 20)
        gp, gc = rng.integers(0, 6, 30), rng.integers(0, 3, 30)
        try:
            r = cmc_map(GalleryIndex(qf, qp, qc), GalleryIndex(gf, gp, gc))
        except EvalError:
            continue
        cmc, m_ap, excl = reference_cmc_map(qf, qp, qc, gf, gp, gc)
        worst = max(worst, float(np.max(np.abs(r.cmc - cmc))), abs(r.mAP - m_ap), abs(r.excluded_queries - excl))
        compared += 1
    g = GalleryIndex(np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]), [0, 1, 2], [1, 1, 1])
    hand = cmc_map(GalleryIndex(np.array([[1.0, 0.2]]), [1], [0]), g)
    ok = worst <= 1e-9 and hand.mAP == 0.5 and hand.rank(1) == 0.0 and hand.rank(2) == 1.0
    detail = f"50 configurations, max |diff| {worst:.1e}; hand example AP {hand.mAP}"
    assert criterion(6, "metric correctness", ok, detail), detail


# -- 7 ----------------------------------------------------------------------------

def test_criterion_7_determinism_and_persistence(criterion, tmp_path):
    ds = generate_dataset(7, 4, imgs_per_id=8)
    cfg = TrainConfig(seed=7, epochs=3, checkpoint_every=1)
    a = fit(cfg, ds, run_dir=tmp_path / "a")
    fit(cfg, ds, run_dir=tmp_path / "b")
    same_log = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    model, _, _ = load_model(a.checkpoint)
    saved = a.model.state_dict()
    round_trip = all(np.array_equal(model.state_dict()[k], v) for k, v in saved.items())

    fit(cfg, ds, run_dir=tmp_path / "c", max_steps=a.steps // 2)
    resumed = fit(cfg, ds, run_dir=tmp_path / "c", resume=tmp_path / "c" / "model.fcf")
    worst = max(abs(ra[k] - rb[k]) for ra, rb in zip(a.history[a.steps // 2:], resumed.history)
                for k in ("id", "fcd", "cht", "fc2", "total"))
    ta, _ = load_tensors(tmp_path / "a" / "model.fcf")
    tc, _ = load_tensors(tmp_path / "c" / "model.fcf")
    worst_w = max(float(np.max(np.abs(ta[k] - tc[k]))) for k in ta)
    ok = same_log and round_trip and worst <= 1e-6 and len(resumed.history) == a.steps - a.steps // 2
    detail = (f"log identical {same_log}, {len(saved)} tensors round-trip {round_trip}, "
              f"resume max loss diff {worst:.1e}, max weight diff {worst_w:.1e}")
    assert criterion(7, "determinism and persistence", ok, detail), detail


# -- 8 ----------------------------------------------------------------------------

def test_criterion_8_structural_conformance(criterion):
    tested, bad = 0, []
    for n in range(2, 257):
        for alpha in np.linspace(0.05, 0.95, 19):
            cfg = FcdConfig(float(alpha))
            k, l = cfg.split(n)
            if k < 1 or l < 1:
                if not cfg.validate(n):
                    bad.append((n, alpha))
                continue
            tested += 1
            if 1 + k + l != n + 1:
                bad.append((n, alpha))

    partitions = 0
    for m in (1, 2, 4, 8):
        for chunk in (1, 2, 3, 8, 32):
            n = m * chunk
            seq = Tensor(np.arange((n + 1) * 2, dtype=np.float32).reshape(1, n + 1, 2))
            parts = split_parts(seq, m)
            body = np.concatenate([p.data[:, 1:] for p in parts], axis=1)
            partitions += bool(np.array_equal(body, seq.data[:, 1:])
                               and all(np.array_equal(p.data[:, 0], seq.data[:, 0]) for p in parts))
    with pytest.raises(ConfigError):
        split_parts(Tensor(np.zeros((1, 33, 2), np.float32)), 3)

    enc = Encoder(EncoderConfig(lambda_cm=0.0, n_cameras=4), np.random.default_rng(8))
    imgs = np.random.default_rng(9).integers(0, 256, (4, 64, 32, 3)).astype(np.uint8)
    with nx.no_grad():
        cam_free = np.array_equal(enc(imgs, [0, 1, 2, 3]).data, enc(imgs, [3, 3, 0, 1]).data)
    ok = not bad and partitions == 20 and cam_free
    detail = (f"{tested} legal (N, alpha) pairs conserve length, {len(bad)} violations; "
              f"{partitions}/20 part splits are partitions; camera-free encoder with lambda 0: {cam_free}")
    assert criterion(8, "structural conformance", ok, detail), detail
