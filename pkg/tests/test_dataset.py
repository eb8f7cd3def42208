import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uad.data import CaseMetadata, Slice2D, Volume
from uad.dataset import (
    AugmentationPolicy, SplitSpec, augment, augment_pixels, clahe, expand_training_set, extract_slices,
    hflip, make_batches, split_patients, stack_slices, vflip,
)
from uad.errors import ShapeError, ValidationError


def _cases(keys):
    return [{"patient_key": k, "i": i} for i, k in enumerate(keys)]


def test_split_counts_and_determinism():
    cases = _cases([f"p{i}" for i in range(10)])
    tr, va = split_patients(cases, SplitSpec(seed=3))
    assert len(tr) == 8 and len(va) == 2
    tr2, va2 = split_patients(cases, SplitSpec(seed=3))
    assert tr == tr2 and va == va2


def test_split_keeps_patient_volumes_together():
    cases = _cases(["a", "a", "b", "c", "d", "e"])
    for seed in range(20):
        tr, va = split_patients(cases, SplitSpec(seed=seed))
        assert ({c["i"] for c in tr} >= {0, 1}) or ({c["i"] for c in va} >= {0, 1})


def test_split_accepts_case_records():
    from types import SimpleNamespace

    cases = [SimpleNamespace(metadata=CaseMetadata(f"p{i}")) for i in range(5)]
    tr, va = split_patients(cases)
    assert len(tr) == 4 and len(va) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("abcdefgh"), min_size=2, max_size=30), st.integers(0, 1000),
       st.floats(0.05, 0.95))
def test_split_never_leaks_patients(keys, seed, frac):
    if len(set(keys)) < 2:
        with pytest.raises(ValidationError):
            split_patients(_cases(keys), SplitSpec(frac, seed))
        return
    tr, va = split_patients(_cases(keys), SplitSpec(frac, seed))
    assert tr and va
    assert not {c["patient_key"] for c in tr} & {c["patient_key"] for c in va}
    assert len(tr) + len(va) == len(keys)


def test_extract_and_stack(rng):
    v = Volume(rng.random((96, 96, 12)), (0.5, 0.5, 1), "c1")
    sl = extract_slices(v)
    assert len(sl) == 12 and sl[3].source == ("c1", 3)
    np.testing.assert_array_equal(stack_slices(sl), v.voxels)
    with pytest.raises(ShapeError):
        extract_slices(Volume(np.zeros((100, 96, 12)), (1, 1, 1)))


def test_augment_identity_policy(rng):
    s = Slice2D(rng.random((96, 96)).astype(np.float32))
    policy = AugmentationPolicy(p_hflip=0, p_vflip=0, p_clahe=0)
    out = augment(s, policy, np.random.default_rng(0))
    assert len(out) == 3
    assert all(np.array_equal(o.pixels, s.pixels) for o in out)


def test_flip_involution_and_clahe_constant(rng):
    p = rng.random((16, 16))
    np.testing.assert_array_equal(hflip(hflip(p)), p)
    np.testing.assert_array_equal(vflip(vflip(p)), p)
    assert not np.array_equal(hflip(p), p)
    c = np.full((96, 96), 0.4)
    np.testing.assert_array_equal(clahe(c), c)


def test_clahe_changes_contrast(rng):
    p = 0.4 + 0.1 * rng.random((96, 96))
    q = clahe(p)
    assert q.shape == p.shape and np.ptp(q) > np.ptp(p)


def test_hflip_rate_monte_carlo():
    p = np.arange(4, dtype=np.float64).reshape(2, 2) / 4
    policy = AugmentationPolicy(p_vflip=0, p_clahe=0, copies_per_slice=10_000)
    copies = augment_pixels(p, policy, np.random.default_rng(7))
    rate = np.mean([not np.array_equal(c, p) for c in copies])
    assert abs(rate - 0.9) <= 0.02


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augmentation_stays_in_unit_range(seed):
    g = np.random.default_rng(seed)
    p = g.random((32, 32)) ** 3
    for q in augment_pixels(p, AugmentationPolicy(), g):
        assert q.min() >= 0 and q.max() <= 1


def test_expand_training_set(rng):
    x = rng.random((5, 16, 16)).astype(np.float32)
    y = expand_training_set(x, AugmentationPolicy(), seed=1)
    assert y.shape == (20, 16, 16)
    np.testing.assert_array_equal(y[:5], x)
    np.testing.assert_array_equal(y, expand_training_set(x, AugmentationPolicy(), seed=1))


def test_batches():
    sizes = [len(b) for b in make_batches(100, 32, seed=0)]
    assert sizes == [32, 32, 32, 4]
    a = [b.tolist() for b in make_batches(100, 32, seed=4)]
    b = [b.tolist() for b in make_batches(100, 32, seed=4)]
    assert a == b
    items = list("aabbbcdefg")
    out = [x for batch in make_batches(items, 3, seed=2) for x in batch]
    assert sorted(out) == sorted(items)
    arr = np.arange(10)
    assert sorted(np.concatenate(list(make_batches(arr, 4, seed=1))).tolist()) == list(range(10))
