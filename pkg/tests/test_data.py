import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uad.data import (
    AnnotatedCase, CaseMetadata, SegmentationMask, Slice2D, Volume, check_pair, load_mask,
    load_metadata, load_volume, save_mask, save_metadata, save_volume,
)
from uad.errors import NonFiniteError, ShapeError, UnknownLabelError, ValidationError, VolumeReadError

NAMES = {1: "uterus", 2: "myoma"}


def test_volume_rejects_non_finite_and_bad_spacing():
    v = np.zeros((2, 2, 2))
    v[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        Volume(v, (1, 1, 1))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2)), (1, 1, 1))


def test_volume_is_float32_and_read_only():
    v = Volume(np.arange(8, dtype=np.int16).reshape(2, 2, 2), (1, 1, 2))
    assert v.voxels.dtype == np.float32
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 5


def test_load_small_file(tmp_path):
    v = Volume(np.arange(32, dtype=np.float32).reshape(4, 4, 2), (1, 1, 3))
    save_volume(v, tmp_path / "v.nii.gz")
    w = load_volume(tmp_path / "v.nii.gz")
    assert w.shape == (4, 4, 2)
    assert w.spacing == (1.0, 1.0, 3.0)


def test_load_nan_file_rejected(tmp_path):
    import nibabel as nib

    a = np.zeros((3, 3, 3), np.float32)
    a[1, 1, 1] = np.nan
    nib.save(nib.Nifti1Image(a, np.eye(4)), str(tmp_path / "nan.nii.gz"))
    with pytest.raises(NonFiniteError):
        load_volume(tmp_path / "nan.nii.gz")


def test_missing_and_garbage_files(tmp_path):
    with pytest.raises(VolumeReadError):
        load_volume(tmp_path / "absent.nii.gz")
    (tmp_path / "junk.nii.gz").write_bytes(b"not a nifti")
    with pytest.raises(VolumeReadError):
        load_volume(tmp_path / "junk.nii.gz")


def test_overwrite_replaces_content(tmp_path):
    p = tmp_path / "v.nii.gz"
    save_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), p)
    save_volume(Volume(np.ones((3, 2, 2)), (1, 1, 1)), p)
    w = load_volume(p)
    assert w.shape == (3, 2, 2) and np.all(w.voxels == 1)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), d / "v.nii.gz")


def test_missing_directory_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), tmp_path / "no" / "such" / "v.nii.gz")


@settings(max_examples=25, deadline=None)
@given(
    vox=arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)),
               elements=st.floats(-1e6, 1e6, width=32)),
    spacing=st.tuples(*[st.floats(0.01, 10.0)] * 3),
)
def test_save_load_roundtrip(tmp_path_factory, vox, spacing):
    p = tmp_path_factory.mktemp("rt") / "v.nii.gz"
    v = Volume(vox, spacing)
    save_volume(v, p)
    w = load_volume(p)
    assert w.shape == v.shape
    assert w.spacing == v.spacing
    np.testing.assert_array_equal(w.voxels, v.voxels)


def test_mask_rules(tmp_path):
    m = SegmentationMask(np.zeros((2, 2, 2), int), NAMES)
    assert not m.labels.any()
    with pytest.raises(UnknownLabelError) as exc:
        SegmentationMask(np.full((2, 2, 2), 7), NAMES)
    assert list(exc.value.ids) == [7]
    with pytest.raises(ValidationError):
        SegmentationMask(np.zeros((2, 2, 2), int), {0: "bg"})


def test_load_mask_unknown_label_and_annotators(tmp_path):
    lab = np.zeros((3, 3, 2), np.int32)
    lab[1, 1, 1] = 7
    save_mask(SegmentationMask(lab, {7: "x"}), (1, 1, 1), tmp_path / "m.nii.gz")
    with pytest.raises(UnknownLabelError):
        load_mask(tmp_path / "m.nii.gz", NAMES)
    lab[1, 1, 1] = 2
    save_mask(SegmentationMask(lab, NAMES), (1, 1, 1), tmp_path / "a.nii.gz")
    save_mask(SegmentationMask(lab, NAMES), (1, 1, 1), tmp_path / "b.nii.gz")
    a = load_mask(tmp_path / "a.nii.gz", NAMES, "rater_a")
    b = load_mask(tmp_path / "b.nii.gz", NAMES, "rater_b")
    assert a.annotator != b.annotator
    np.testing.assert_array_equal(a.labels, lab)


def test_pairing_shape_check():
    v = Volume(np.zeros((4, 4, 2)), (1, 1, 1))
    check_pair(v, SegmentationMask(np.zeros((4, 4, 2), int), NAMES))
    with pytest.raises(ShapeError):
        check_pair(v, SegmentationMask(np.zeros((4, 4, 3), int), NAMES))
    with pytest.raises(ShapeError):
        AnnotatedCase(v, (SegmentationMask(np.zeros((4, 3, 2), int), NAMES),), CaseMetadata("p"))


def test_metadata_validation_and_sidecar(tmp_path):
    md = CaseMetadata("p1", 1.5, "retroverted", "anteflexed", "unhealthy_umd")
    assert md.position == "AF, RV"
    save_metadata(md, tmp_path / "md.json")
    assert load_metadata(tmp_path / "md.json") == md
    with pytest.raises(ValidationError):
        CaseMetadata("p1", -1.0)
    with pytest.raises(ValidationError):
        CaseMetadata("p1", uterine_version="sideways")
    (tmp_path / "bad.json").write_text(json.dumps({"patient_key": "p", "extra": 1}))
    with pytest.raises(ValidationError):
        load_metadata(tmp_path / "bad.json")


def test_slice_range_and_shape():
    Slice2D(np.zeros((96, 96)))
    with pytest.raises(ShapeError):
        Slice2D(np.zeros((90, 96)))
    with pytest.raises(ValidationError):
        Slice2D(np.full((96, 96), 1.5))
