"""Containers for volumes, masks, slices and case metadata, plus NIfTI I/O.

Volumes are indexed ``(x, y, z)``; 2D slices are taken along ``z``.
Everything here is immutable once built: arrays are flagged read-only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import nibabel as nib
import numpy as np

from .errors import NonFiniteError, ShapeError, UnknownLabelError, ValidationError, VolumeReadError

logger = logging.getLogger(__name__)

UTERINE_VERSIONS = ("anteverted", "retroverted", "unknown")
UTERINE_FLEXIONS = ("anteflexed", "retroflexed", "unknown")
COHORTS = ("healthy", "unhealthy_umd", "unhealthy_inhouse", "synthetic")
METADATA_KEYS = ("patient_key", "field_strength_tesla", "uterine_version", "uterine_flexion", "cohort")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    identifier: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise ShapeError(f"volume has an empty axis: {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise NonFiniteError(f"volume {self.identifier!r} contains non-finite voxels")
        # float32 precision, as stored in NIfTI headers, so save/load round-trips exactly
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "voxels", _frozen(vox.astype(np.float32)))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class SegmentationMask:
    labels: np.ndarray
    label_names: Mapping[int, str]
    annotator: str = "default"

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ShapeError(f"mask must be 3D, got shape {lab.shape}")
        if lab.size and not np.issubdtype(lab.dtype, np.integer):
            if not np.all(np.isfinite(lab)) or np.any(lab != np.round(lab)):
                raise ValidationError("mask holds non-integer values")
        lab = lab.astype(np.int32)
        if np.any(lab < 0):
            raise ValidationError("mask holds negative label ids")
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        if 0 in names:
            raise ValidationError("label id 0 is reserved for background")
        present = set(np.unique(lab).tolist()) - {0}
        missing = present - set(names)
        if missing:
            raise UnknownLabelError(missing)
        object.__setattr__(self, "labels", _frozen(lab))
        object.__setattr__(self, "label_names", names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def ids_named(self, names) -> set[int]:
        """Label ids whose name is in ``names``."""
        names = set(names)
        return {i for i, n in self.label_names.items() if n in names}

    def binary(self, ids) -> np.ndarray:
        return np.isin(self.labels, list(ids))

    def with_labels(self, labels: np.ndarray) -> "SegmentationMask":
        return SegmentationMask(labels, self.label_names, self.annotator)


@dataclass(frozen=True)
class CaseMetadata:
    patient_key: str
    field_strength_tesla: float | None = None
    uterine_version: str = "unknown"
    uterine_flexion: str = "unknown"
    cohort: str = "healthy"

    def __post_init__(self):
        if not str(self.patient_key):
            raise ValidationError("patient_key must be nonempty")
        fs = self.field_strength_tesla
        if fs is not None and not (np.isfinite(fs) and fs > 0):
            raise ValidationError(f"field_strength_tesla must be > 0 or unknown, got {fs}")
        if self.uterine_version not in UTERINE_VERSIONS:
            raise ValidationError(f"uterine_version must be one of {UTERINE_VERSIONS}")
        if self.uterine_flexion not in UTERINE_FLEXIONS:
            raise ValidationError(f"uterine_flexion must be one of {UTERINE_FLEXIONS}")
        if self.cohort not in COHORTS:
            raise ValidationError(f"cohort must be one of {COHORTS}")

    @property
    def position(self) -> str:
        """Position stratum key such as ``"AF, AV"``."""
        flex = {"anteflexed": "AF", "retroflexed": "RF"}.get(self.uterine_flexion, "?F")
        ver = {"anteverted": "AV", "retroverted": "RV"}.get(self.uterine_version, "?V")
        return f"{flex}, {ver}"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METADATA_KEYS}


@dataclass(frozen=True)
class Slice2D:
    pixels: np.ndarray
    source: tuple[str, int] = ("", -1)
    size: int | None = 96

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ShapeError(f"slice must be 2D, got shape {px.shape}")
        if self.size is not None and px.shape != (self.size, self.size):
            raise ShapeError(f"slice must be {self.size}x{self.size}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise NonFiniteError("slice contains non-finite pixels")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError(f"slice pixels must lie in [0, 1], got [{px.min()}, {px.max()}]")
        object.__setattr__(self, "pixels", _frozen(px))


@dataclass(frozen=True)
class AnnotatedCase:
    volume: Volume
    masks: tuple[SegmentationMask, ...]
    metadata: CaseMetadata
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        masks = tuple(self.masks)
        for m in masks:
            check_pair(self.volume, m)
        object.__setattr__(self, "masks", masks)

    @property
    def case_id(self) -> str:
        return self.volume.identifier

    def mask(self, annotator: str | None = None) -> SegmentationMask:
        if annotator is None:
            return self.masks[0]
        for m in self.masks:
            if m.annotator == annotator:
                return m
        raise KeyError(f"case {self.case_id!r} has no mask from annotator {annotator!r}")


def check_pair(v: Volume, m: SegmentationMask) -> None:
    if v.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match volume shape {v.shape}")


def _read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    path = Path(path)
    if not path.is_file():
        raise VolumeReadError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise VolumeReadError(f"{path}: unreadable NIfTI file ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeReadError(f"{path}: expected a 3D single-channel volume, got shape {data.shape}")
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, zooms


def load_volume(path, identifier: str | None = None) -> Volume:
    data, zooms = _read_nifti(path)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: volume contains non-finite voxels")
    return Volume(data, zooms, identifier if identifier is not None else Path(path).name.split(".")[0])


def _write_nifti(data: np.ndarray, spacing, path) -> None:
    path = Path(path)
    affine = np.diag([*spacing, 1.0])
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(tuple(spacing))
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_volume(v: Volume, path) -> None:
    _write_nifti(np.asarray(v.voxels, dtype=np.float32), v.spacing, path)


def save_mask(m: SegmentationMask, spacing, path) -> None:
    _write_nifti(np.asarray(m.labels, dtype=np.int16 if m.labels.max(initial=0) < 2**15 else np.int32), spacing, path)


def load_mask(path, label_names: Mapping[int, str], annotator: str = "default") -> SegmentationMask:
    data, _ = _read_nifti(path)
    if not np.issubdtype(data.dtype, np.integer):
        if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
            raise VolumeReadError(f"{path}: mask must hold integer labels")
    return SegmentationMask(data.astype(np.int32), label_names, annotator)


def load_metadata(path) -> CaseMetadata:
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(METADATA_KEYS)
    if unknown:
        raise ValidationError(f"{path}: unknown metadata keys {sorted(unknown)}")
    return CaseMetadata(**raw)


def save_metadata(md: CaseMetadata, path) -> None:
    Path(path).write_text(json.dumps(md.to_dict(), indent=2, sort_keys=True) + "\n")
