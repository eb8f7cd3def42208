"""Residual maps to anomaly heatmaps.

Stage order: |x - recon| -> percentile threshold -> radial Gaussian weight
-> square -> median filter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class PostprocessConfig:
    percentile: float = 20.0
    radius_px: float = 30.0
    median_kernel: int = 5
    center: tuple[float, float] | None = None  # None: slice centre

    def __post_init__(self):
        if not 0.0 <= self.percentile <= 100.0:
            raise ValidationError("postprocess.percentile must lie in [0, 100]")
        if not self.radius_px > 0:
            raise ValidationError("postprocess.radius_px must be positive")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValidationError("postprocess.median_kernel must be odd and >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class AnomalyMap:
    values: np.ndarray
    provenance: dict | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("anomaly map values must be finite and nonnegative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def _arr(a) -> np.ndarray:
    return np.asarray(getattr(a, "pixels", getattr(a, "values", a)), dtype=np.float64)


def residual(x, recon) -> AnomalyMap:
    x, r = _arr(x), _arr(recon)
    if x.shape != r.shape:
        raise ShapeError(f"residual inputs differ in shape: {x.shape} vs {r.shape}")
    return AnomalyMap(np.abs(x - r))


def percentile_threshold(m, p: float = 20.0) -> AnomalyMap:
    """Zero every value strictly below the slice's ``p``-th percentile."""
    v = _arr(m)
    cut = np.percentile(v, p)
    return AnomalyMap(np.where(v < cut, 0.0, v))


def radial_mask(shape, cfg: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    """``exp(-d^2 / (2 r^2))`` with ``d`` the distance to the mask centre.

    The default centre of an ``(h, w)`` grid is the pixel ``(h // 2, w // 2)``.
    """
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise ShapeError(f"invalid mask shape {shape}")
    cx, cy = cfg.center if cfg.center is not None else (h // 2, w // 2)
    xx, yy = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return np.exp(-d2 / (2.0 * cfg.radius_px**2))


def median_smooth(v: np.ndarray, kernel: int = 5) -> np.ndarray:
    if kernel == 1:
        return np.array(v, dtype=np.float64, copy=True)
    return ndimage.median_filter(np.asarray(v, dtype=np.float64), size=kernel, mode="reflect")


def apply_pipeline(x, recon, cfg: PostprocessConfig = PostprocessConfig(), provenance: dict | None = None) -> AnomalyMap:
    m = residual(x, recon).values
    m = percentile_threshold(m, cfg.percentile).values
    m = m * radial_mask(m.shape, cfg)
    m = m * m
    return AnomalyMap(median_smooth(m, cfg.median_kernel), provenance)


def heatmap_stack(x: np.ndarray, recon: np.ndarray, cfg: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    """Apply the pipeline slice-wise to ``(n, h, w)`` stacks."""
    return np.stack([apply_pipeline(a, b, cfg).values for a, b in zip(x, recon)])


def overlay_rgb(slice_pixels: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """8-bit RGB: the heatmap (jet colormap) blended at ``alpha`` over the grayscale slice."""
    from matplotlib import colormaps

    gray = np.clip(np.asarray(slice_pixels, dtype=np.float64), 0, 1)
    h = np.asarray(heat, dtype=np.float64)
    h = h / h.max() if h.max() > 0 else h
    colored = colormaps["jet"](h)[..., :3]
    base = np.repeat(gray[..., None], 3, axis=-1)
    return np.round(255 * ((1 - alpha) * base + alpha * colored)).astype(np.uint8)
