import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcformer.data import (DataError, PkBatchSpec, generate_dataset, load_dataset, make_cameras,
                           apply_camera, make_people, person_mask, pk_batches, iter_pk, render, render_base,
                           save_dataset)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(3, 8)


def test_sizes(ds):
    assert ds.train.images.shape == (64, 64, 32, 3)
    assert len(ds.query) == 16 and len(ds.gallery) == 32
    assert ds.train.images.dtype == np.uint8


def test_deterministic(ds):
    again = generate_dataset(3, 8)
    for name in ("train", "query", "gallery"):
        a, b = getattr(ds, name), getattr(again, name)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.pids, b.pids) and np.array_equal(a.cams, b.cams)


def test_seed_changes_images(ds):
    assert not np.array_equal(generate_dataset(4, 8).train.images, ds.train.images)


def test_pids_differ():
    people = make_people(np.random.default_rng(0), 20)
    attrs = [p.attributes() for p in people]
    assert len(set(attrs)) == 20
    cam = make_cameras(np.random.default_rng(0), 1)[0]
    a = render(people[0], cam, np.random.default_rng(1))
    b = render(people[1], cam, np.random.default_rng(1))
    assert not np.array_equal(a, b)


def test_same_pid_differs_across_cameras_only_photometrically():
    rng = np.random.default_rng(5)
    person = make_people(rng, 1)[0]
    cams = make_cameras(rng, 2)
    base = render_base(person, np.random.default_rng(9))
    assert np.array_equal(base, render_base(person, np.random.default_rng(9)))
    a, b = (apply_camera(base, c) for c in cams)
    assert not np.array_equal(a, b)
    # invert each camera's per-channel affine map; unclipped pixels land on the same scene
    for img, cam in ((a, cams[0]), (b, cams[1])):
        ok = (img > 0) & (img < 255)
        back = (img.astype(float) - cam.bias) / np.asarray(cam.gain)
        assert np.abs(back - base)[ok].max() <= 0.5 / min(cam.gain) + 1e-9
    lab = person_mask(person)
    for img in (a, b):
        # the body occupies the same pixels: every label region is one colour per camera
        for k in (1, 2, 4, 5):
            assert len(np.unique(img[lab == k], axis=0)) == 1


def test_query_is_occluded_gallery_is_not():
    occ = generate_dataset(3, 4)
    clean = generate_dataset(3, 4, occlude_query=False)
    assert np.array_equal(occ.gallery.images, clean.gallery.images)
    assert not np.array_equal(occ.query.images, clean.query.images)


def test_rejects_bad_args():
    with pytest.raises(DataError):
        generate_dataset(0, 1)
    with pytest.raises(DataError):
        generate_dataset(0, 4, n_cams=0)


def test_save_load_roundtrip(ds, tmp_path):
    save_dataset(ds, tmp_path)
    names = sorted(p.name for p in (tmp_path / "train").iterdir())
    assert names[0].count("_") == 2 and names[0].endswith(".png")
    back = load_dataset(tmp_path)
    for name in ("train", "query", "gallery"):
        a, b = getattr(ds, name), getattr(back, name)
        order_a = np.lexsort((a.idx, a.cams, a.pids))
        order_b = np.lexsort((b.idx, b.cams, b.pids))
        assert np.array_equal(a.images[order_a], b.images[order_b])
        assert np.array_equal(a.pids[order_a], b.pids[order_b])
    assert back.n_cams == ds.n_cams


def test_pk_batches_shape(ds):
    spec = PkBatchSpec(4, 4)
    batches = pk_batches(ds.train.pids, spec, np.random.default_rng(0))
    for b in batches:
        assert len(b) == 16
        pids, counts = np.unique(ds.train.pids[b], return_counts=True)
        assert len(pids) == 4 and set(counts) == {4}


def test_pk_epoch_covers_all_pids(ds):
    batches = pk_batches(ds.train.pids, PkBatchSpec(4, 4), np.random.default_rng(1))
    seen = np.unique(ds.train.pids[np.concatenate(batches)])
    assert np.array_equal(seen, np.unique(ds.train.pids))


@settings(max_examples=30, deadline=None)
@given(n_ids=st.integers(2, 9), extra=st.integers(0, 5), P=st.integers(2, 4), K=st.integers(2, 4),
       seed=st.integers(0, 2**16))
def test_pk_batches_always_have_positive_and_negative(n_ids, extra, P, K, seed):
    if n_ids < P:
        return
    rng = np.random.default_rng(seed)
    pids = np.concatenate([np.full(K + int(rng.integers(0, extra + 1)), p) for p in range(n_ids)])
    batches = pk_batches(pids, PkBatchSpec(P, K), np.random.default_rng(seed))
    assert batches
    for b in batches:
        labels = pids[b]
        _, counts = np.unique(labels, return_counts=True)
        assert len(counts) == P and counts.min() >= 2


def test_pk_minimum_k():
    PkBatchSpec(2, 2)
    with pytest.raises(DataError):
        PkBatchSpec(4, 1)


def test_pk_rejects_pid_with_too_few_images():
    pids = np.array([0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
    with pytest.raises(DataError, match="pid 1"):
        pk_batches(pids, PkBatchSpec(2, 4), np.random.default_rng(0))


def test_iter_pk_is_reproducible(ds):
    a = [b.tolist() for _, b in iter_pk(ds.train.pids, PkBatchSpec(), 7, 2)]
    b = [b.tolist() for _, b in iter_pk(ds.train.pids, PkBatchSpec(), 7, 2)]
    assert a == b
