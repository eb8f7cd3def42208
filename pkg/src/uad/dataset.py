"""Patient-level splitting, slice extraction, augmentation and batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from skimage import exposure

from .data import Slice2D, Volume
from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("split.train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class AugmentationPolicy:
    p_hflip: float = 0.9
    p_vflip: float = 0.7
    p_clahe: float = 0.7
    clahe_clip: float = 0.03
    clahe_tiles: int = 8
    clahe_bins: int = 256
    copies_per_slice: int = 3

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_clahe"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"augment.{name} must lie in [0, 1]")
        if self.copies_per_slice < 0:
            raise ValidationError("augment.copies_per_slice must be >= 0")
        if self.clahe_clip <= 0 or self.clahe_tiles < 1 or self.clahe_bins < 2:
            raise ValidationError("invalid CLAHE parameters")


def _patient_key(case) -> str:
    md = getattr(case, "metadata", None)
    return md.patient_key if md is not None else case["patient_key"]


def split_patients(cases: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list]:
    """Partition cases so that every patient lands wholly in train or val.

    ``round(train_fraction * n_patients)`` patients go to train, clamped so
    that both partitions keep at least one patient.
    """
    keys = list(dict.fromkeys(_patient_key(c) for c in cases))
    if len(keys) < 2:
        raise ValidationError(f"need at least 2 distinct patients to split, got {len(keys)}")
    order = np.random.default_rng(spec.seed).permutation(len(keys))
    n_train = min(max(int(round(spec.train_fraction * len(keys))), 1), len(keys) - 1)
    train_keys = {keys[i] for i in order[:n_train]}
    train = [c for c in cases if _patient_key(c) in train_keys]
    val = [c for c in cases if _patient_key(c) not in train_keys]
    return train, val


def extract_slices(v: Volume, size: int = 96) -> list[Slice2D]:
    nx, ny, nz = v.shape
    if (nx, ny) != (size, size):
        raise ShapeError(f"expected in-plane shape ({size}, {size}), got {(nx, ny)}")
    return [Slice2D(v.voxels[:, :, k], (v.identifier, k), size=size) for k in range(nz)]


def stack_slices(slices: Sequence[Slice2D]) -> np.ndarray:
    """Inverse of :func:`extract_slices` on the voxel grid: ``(nx, ny, nz)``."""
    return np.stack([s.pixels for s in slices], axis=-1)


def hflip(p: np.ndarray) -> np.ndarray:
    return p[:, ::-1].copy()


def vflip(p: np.ndarray) -> np.ndarray:
    return p[::-1, :].copy()


def clahe(p: np.ndarray, clip: float = 0.03, tiles: int = 8, bins: int = 256) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.ptp(p) == 0:
        return p.copy()
    kernel = (max(p.shape[0] // tiles, 1), max(p.shape[1] // tiles, 1))
    out = exposure.equalize_adapthist(p, kernel_size=kernel, clip_limit=clip, nbins=bins)
    return np.clip(out, 0.0, 1.0)


def augment_pixels(p: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> list[np.ndarray]:
    copies = []
    for _ in range(policy.copies_per_slice):
        # draw all three decisions up front so the stream is independent of outcomes
        do_h, do_v, do_c = rng.random(3) < (policy.p_hflip, policy.p_vflip, policy.p_clahe)
        q = np.asarray(p, dtype=np.float64)
        if do_h:
            q = hflip(q)
        if do_v:
            q = vflip(q)
        if do_c:
            q = clahe(q, policy.clahe_clip, policy.clahe_tiles, policy.clahe_bins)
        copies.append(q.astype(np.float32))
    return copies


def augment(s: Slice2D, policy: AugmentationPolicy, rng: np.random.Generator) -> list[Slice2D]:
    """Augmented copies of ``s`` (the original itself is not included)."""
    return [Slice2D(q, s.source, size=s.size) for q in augment_pixels(s.pixels, policy, rng)]


def expand_training_set(stack: np.ndarray, policy: AugmentationPolicy, seed: int) -> np.ndarray:
    """Originals followed by their augmented copies, fixed once per run."""
    rng = np.random.default_rng(seed)
    out = [np.asarray(stack, dtype=np.float32)]
    extra = [q for p in stack for q in augment_pixels(p, policy, rng)]
    if extra:
        out.append(np.stack(extra))
    return np.concatenate(out)


def make_batches(items, batch_size: int = 32, seed: int = 0) -> Iterator:
    """Yield one shuffled epoch of batches; the last batch may be partial.

    ``items`` may be an int (yields index arrays), an ndarray (yields
    sub-arrays) or any sequence (yields lists).
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = items if isinstance(items, (int, np.integer)) else len(items)
    if n < 1:
        raise ValidationError("make_batches needs a nonempty input")
    order = np.random.default_rng(seed).permutation(int(n))
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if isinstance(items, (int, np.integer)):
            yield idx
        elif isinstance(items, np.ndarray):
            yield items[idx]
        else:
            yield [items[j] for j in idx]
