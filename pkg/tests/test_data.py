import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textuda.data import (AugmentParams, DataError, PhantomConfig, SliceDataset, SliceSampler, Subject, augment,
                          generate_phantoms, load_manifest, normalize_slice, save_manifest, split_subjects)

SMALL = PhantomConfig(n_subjects=4, slices_per_subject=3, image_size=32)


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantoms(PhantomConfig(n_subjects=6, slices_per_subject=4, image_size=48))


def test_phantoms_deterministic():
    a, b = generate_phantoms(SMALL), generate_phantoms(SMALL)
    for da, db in zip(a, b):
        for sa, sb in zip(da.subjects, db.subjects):
            assert sa.id == sb.id
            assert sa.images.tobytes() == sb.images.tobytes() and sa.labels.tobytes() == sb.labels.tobytes()


def test_phantom_labels_and_range(phantoms):
    for ds in phantoms:
        assert ds.labeled
        for s in ds.subjects:
            assert s.labels.max() < 5 and s.images.min() >= -1 and s.images.max() <= 1
    present = set(np.unique(np.concatenate([s.labels.ravel() for s in phantoms[0].subjects])).tolist())
    assert present == {0, 1, 2, 3, 4}


def test_phantom_domains_unpaired(phantoms):
    src, tgt = phantoms
    assert not set(s.id for s in src.subjects) & set(s.id for s in tgt.subjects)
    assert not any(np.array_equal(a.labels, b.labels) for a in src.subjects for b in tgt.subjects)


def _class_hists(ds, C=5, bins=64):
    h = np.zeros((C, bins))
    for s in ds.subjects:
        for c in range(C):
            h[c] += np.histogram(s.images[s.labels == c], bins=bins, range=(-1, 1))[0]
    return h / np.maximum(h.sum(1, keepdims=True), 1)


def test_domain_shift_exceeds_within_domain_variation():
    src, tgt = generate_phantoms(PhantomConfig(n_subjects=8, slices_per_subject=4, image_size=48))
    half = lambda ds, part: SliceDataset(ds.modality, ds.spacing, ds.subjects[part], 5)
    within = np.abs(_class_hists(half(src, slice(0, 4))) - _class_hists(half(src, slice(4, 8)))).sum(1).mean()
    within_t = np.abs(_class_hists(half(tgt, slice(0, 4))) - _class_hists(half(tgt, slice(4, 8)))).sum(1).mean()
    between = np.abs(_class_hists(src) - _class_hists(tgt)).sum(1).mean()
    assert between > max(within, within_t)


def test_augment_identity():
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    lab = (img > 0.5).astype(np.uint8)
    a, b = augment(img, lab, params=AugmentParams())
    assert np.array_equal(a, img) and np.array_equal(b, lab)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_label_subset_and_determinism(seed):
    src, _ = generate_phantoms(SMALL)
    img, lab = src.subjects[0].images[1], src.subjects[0].labels[1]
    a1, l1 = augment(img, lab, seed)
    a2, l2 = augment(img, lab, seed)
    assert np.array_equal(a1, a2) and np.array_equal(l1, l2)
    assert set(np.unique(l1)) <= set(np.unique(lab))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.8, 1.2), st.floats(-15, 15))
def test_augment_image_label_agreement(scale, angle):
    yy, xx = np.mgrid[0:48, 0:48]
    disk = ((yy - 22) ** 2 / 120 + (xx - 25) ** 2 / 60) <= 1
    p = AugmentParams(scale=scale, angle_deg=angle)
    img, lab = augment(disk.astype(np.float32), disk.astype(np.uint8), params=p)
    warped = img > 0.5
    inter, union = np.logical_and(warped, lab).sum(), np.logical_or(warped, lab).sum()
    assert inter / union >= 0.95


def test_normalize_slice_range():
    x = np.random.default_rng(1).normal(size=(20, 20)) * 50 + 7
    y = normalize_slice(x)
    assert y.min() == -1 and y.max() == 1
    assert np.all(normalize_slice(np.ones((4, 4))) == 0)  # flat slice maps to mid-range


def test_split_80_20_reproducible():
    ids = [f"s{i}" for i in range(10)]
    (train, test), again = split_subjects(ids), split_subjects(ids)
    assert (train, test) == again and len(train) == 8 and len(test) == 2
    assert not set(train) & set(test) and set(train) | set(test) == set(ids)


def _fixture(tmp_path, compress=False):
    rng = np.random.default_rng(0)
    subs = [Subject(f"p{i}", rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32),
                    rng.integers(0, 5, (3, 8, 8)).astype(np.uint8)) for i in range(2)]
    ds = SliceDataset("CT", (1.0, 1.0), subs, 5)
    return ds, save_manifest(ds, tmp_path / "ds", compress=compress)


@pytest.mark.parametrize("compress", [False, True])
def test_manifest_roundtrip(tmp_path, compress):
    ds, path = _fixture(tmp_path, compress)
    back = load_manifest(path.parent)
    assert back.num_slices == 6 and len(back.subjects) == 2
    for a, b in zip(ds.subjects, back.subjects):
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert set(back.split["train"]) | set(back.split["test"]) == {"p0", "p1"}


def test_manifest_errors(tmp_path):
    _, path = _fixture(tmp_path)
    slice_file = tmp_path / "ds" / "slices" / "p0_001_img.bin"
    slice_file.write_bytes(b"\x00" * 7)
    with pytest.raises(DataError, match="p0_001_img.bin"):
        load_manifest(path)
    slice_file.unlink()
    with pytest.raises(DataError, match="missing slice file"):
        load_manifest(path)
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nowhere")


def test_manifest_bad_class_index(tmp_path):
    _, path = _fixture(tmp_path)
    with pytest.raises(DataError, match="class index"):
        load_manifest(path, num_classes=3)


def test_manifest_without_normalization(tmp_path):
    ds, path = _fixture(tmp_path)
    m = json.loads(path.read_text())
    m["normalized"] = False
    path.write_text(json.dumps(m))
    back = load_manifest(path)
    for s in back.subjects:
        assert s.images.min() >= -1 and s.images.max() <= 1


def test_sampler_draws_train_subjects_only(phantoms):
    src = phantoms[0]
    train = src.subset("train")
    test_ids = set(src.split["test"])
    assert not test_ids & {s.id for s in train.subjects}
    sampler = SliceSampler(train, seed=3)
    x, y = sampler.sample(4)
    assert x.shape == (4, 1, 48, 48) and y.shape == (4, 48, 48)
    state = sampler.state_dict()
    again = sampler.sample(2)
    sampler.load_state_dict(state)
    assert all(np.array_equal(a, b) for a, b in zip(sampler.sample(2), again))
