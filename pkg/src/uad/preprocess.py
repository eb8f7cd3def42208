"""Resampling, resizing, normalization, component filtering and uterus-centred cropping.

The fixed pipeline order is resample -> resize -> normalize -> (mask LCC) -> bbox -> crop.
Intensities are interpolated trilinearly, labels with nearest neighbour.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import SegmentationMask, Volume, check_pair
from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_SPACING = (0.5, 0.5, 1.0)
DEFAULT_SHAPE = (256, 256, 30)
DEFAULT_CROP = 96


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    width: int
    height: int
    z_range: tuple[int, int]
    truncated: bool = False  # uterus extends beyond the in-plane box

    def __post_init__(self):
        z_lo, z_hi = self.z_range
        if z_lo > z_hi:
            raise ValidationError(f"empty z range {self.z_range}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("box width and height must be positive")

    def validate_for(self, shape) -> None:
        nx, ny, nz = shape
        z_lo, z_hi = self.z_range
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.width > nx or self.y0 + self.height > ny:
            raise ValidationError(f"box {self} exceeds in-plane bounds {shape[:2]}")
        if z_lo < 0 or z_hi >= nz:
            raise ValidationError(f"box z range {self.z_range} exceeds {nz} slices")


def _zoom_to(arr: np.ndarray, out_shape, order: int) -> np.ndarray:
    out_shape = tuple(int(s) for s in out_shape)
    if tuple(arr.shape) == out_shape:
        return np.array(arr, copy=True)
    # corner-aligned sampling grid: input index i_in = i_out * (n_in - 1) / (n_out - 1)
    coords = []
    for n_in, n_out in zip(arr.shape, out_shape):
        if n_out == 1:
            coords.append(np.array([(n_in - 1) / 2.0]))
        else:
            coords.append(np.linspace(0.0, n_in - 1, n_out))
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(arr, grid, order=order, mode="nearest", prefilter=False)


def resample(v: Volume, target_spacing=DEFAULT_SPACING, order: int = 1) -> Volume:
    """Resample to ``target_spacing`` mm.

    The output shape is ``round(shape * spacing / target_spacing)``. Use
    ``order=0`` for label volumes.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(v.shape, v.spacing, target))
    if min(out_shape) < 1:
        raise ShapeError(f"resampling {v.shape} at {v.spacing} to {target} gives degenerate shape {out_shape}")
    return Volume(_zoom_to(v.voxels, out_shape, order), target, v.identifier)


def resample_mask(m: SegmentationMask, spacing, target_spacing=DEFAULT_SPACING) -> SegmentationMask:
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(m.shape, spacing, target_spacing))
    if min(out_shape) < 1:
        raise ShapeError(f"resampling mask {m.shape} gives degenerate shape {out_shape}")
    return m.with_labels(_zoom_to(m.labels, out_shape, order=0))


def resize_to(v: Volume, shape=DEFAULT_SHAPE, order: int = 1) -> Volume:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"invalid target shape {shape}")
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.shape, shape))
    return Volume(_zoom_to(v.voxels, shape, order), spacing, v.identifier)


def resize_mask(m: SegmentationMask, shape=DEFAULT_SHAPE) -> SegmentationMask:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"invalid target shape {shape}")
    return m.with_labels(_zoom_to(m.labels, shape, order=0))


def normalize_intensity(v: Volume) -> Volume:
    """Min-max scale to [0, 1]; constant volumes map to zeros."""
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        out = np.zeros_like(x)
    else:
        out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out, v.spacing, v.identifier)


def largest_connected_component(m: SegmentationMask, label: int) -> tuple[SegmentationMask, bool]:
    """Keep only the largest 26-connected component of ``label``.

    Returns ``(mask, label_found)``. Equal-sized components are resolved in
    favour of the one whose lexicographically smallest voxel comes first.
    """
    label = int(label)
    if label not in m.label_names:
        raise ValidationError(f"label {label} not in label_names")
    binary = m.labels == label
    if not binary.any():
        warnings.warn(f"label {label} absent from mask; returned unchanged", stacklevel=2)
        return m, False
    keep = _largest_component(binary)
    if keep.sum() == binary.sum():
        return m, True
    out = np.array(m.labels, copy=True)
    out[binary & ~keep] = 0
    return m.with_labels(out), True


def _largest_component(binary: np.ndarray) -> np.ndarray:
    comps, n = ndimage.label(binary, structure=np.ones((3, 3, 3), dtype=bool))
    if n <= 1:
        return binary.copy()
    sizes = np.bincount(comps.ravel())[1:]
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if len(best) > 1:
        # C-order first occurrence is the lexicographically smallest voxel of each component
        flat = comps.ravel()
        keep = min(best, key=lambda c: int(np.argmax(flat == c)))
    else:
        keep = best[0]
    return comps == keep


def compute_bbox(m: SegmentationMask, uterus_labels, crop: int = DEFAULT_CROP) -> BoundingBox:
    ids = [int(i) for i in uterus_labels]
    where = np.argwhere(np.isin(m.labels, ids))
    if len(where) == 0:
        raise ValidationError(f"mask has no voxels with uterus labels {ids}")
    nx, ny, _ = m.shape
    if nx < crop or ny < crop:
        raise ShapeError(f"in-plane size {(nx, ny)} smaller than crop {crop}")
    cx, cy = where[:, 0].mean(), where[:, 1].mean()
    x0 = int(np.clip(int(round(cx)) - crop // 2, 0, nx - crop))
    y0 = int(np.clip(int(round(cy)) - crop // 2, 0, ny - crop))
    z_lo, z_hi = int(where[:, 2].min()), int(where[:, 2].max())
    truncated = bool(
        where[:, 0].min() < x0 or where[:, 0].max() >= x0 + crop
        or where[:, 1].min() < y0 or where[:, 1].max() >= y0 + crop
    )
    if truncated:
        logger.warning("uterus extent exceeds the %dx%d crop; periphery truncated", crop, crop)
    return BoundingBox(x0, y0, crop, crop, (z_lo, z_hi), truncated)


def crop(v: Volume, m: SegmentationMask, b: BoundingBox) -> tuple[Volume, SegmentationMask]:
    check_pair(v, m)
    b.validate_for(v.shape)
    sl = (slice(b.x0, b.x0 + b.width), slice(b.y0, b.y0 + b.height), slice(b.z_range[0], b.z_range[1] + 1))
    return Volume(v.voxels[sl], v.spacing, v.identifier), m.with_labels(m.labels[sl])


def crop_mask(m: SegmentationMask, b: BoundingBox) -> SegmentationMask:
    b.validate_for(m.shape)
    sl = (slice(b.x0, b.x0 + b.width), slice(b.y0, b.y0 + b.height), slice(b.z_range[0], b.z_range[1] + 1))
    return m.with_labels(m.labels[sl])


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = DEFAULT_SPACING
    resize_shape: tuple[int, int, int] = DEFAULT_SHAPE
    crop: int = DEFAULT_CROP
    uterus_labels: tuple[str, ...] = ("uterus", "endometrium", "junctional_zone", "myometrium")
    lcc: bool = True

    def __post_init__(self):
        if len(self.target_spacing) != 3 or not all(s > 0 for s in self.target_spacing):
            raise ValidationError("preprocess.target_spacing must be three positive reals")
        if len(self.resize_shape) != 3 or not all(int(s) >= 1 for s in self.resize_shape):
            raise ValidationError("preprocess.resize_shape must be three positive integers")
        if self.crop < 1:
            raise ValidationError("preprocess.crop must be positive")


def preprocess_case(
    v: Volume, masks: list[SegmentationMask], cfg: PreprocessConfig = PreprocessConfig()
) -> tuple[Volume, list[SegmentationMask], BoundingBox]:
    """Run the full chain on one case.

    The bounding box comes from the first mask (the structure segmentation);
    every mask is cropped with it.
    """
    for m in masks:
        check_pair(v, m)
    spacing0 = v.spacing
    v = resample(v, cfg.target_spacing)
    masks = [resample_mask(m, spacing0, cfg.target_spacing) for m in masks]
    v = resize_to(v, cfg.resize_shape)
    masks = [resize_mask(m, cfg.resize_shape) for m in masks]
    v = normalize_intensity(v)
    ref = masks[0]
    uterus_ids = ref.ids_named(cfg.uterus_labels)
    if cfg.lcc:
        # component filtering applies to the union of uterus labels
        union = np.isin(ref.labels, list(uterus_ids))
        if union.any():
            lab = np.array(ref.labels, copy=True)
            lab[union & ~_largest_component(union)] = 0
            ref = masks[0] = ref.with_labels(lab)
    box = compute_bbox(ref, uterus_ids, cfg.crop)
    v_c, ref_c = crop(v, ref, box)
    out = [ref_c] + [crop_mask(m, box) for m in masks[1:]]
    return v_c, out, box
