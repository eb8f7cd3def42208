"""Synthetic uterus phantoms for desk-scale runs.

Each case is a 96x96x8 crop holding a rotated ellipse with three bands
(bright endometrium, dark junctional zone, mid-gray myometrium) on a dim,
smoothly varying background. Optional lesions:

* ``disc``: a hyperintense circle inside the myometrium on a few central
  slices, labelled ``nabothian_cyst``.
* ``diffuse``: a low-contrast textured perturbation over a broad myometrial
  sector, labelled ``adenomyosis``.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import AnnotatedCase, CaseMetadata, SegmentationMask, Volume
from .errors import ValidationError

SHAPE = (96, 96, 8)
SPACING = (0.5, 0.5, 1.0)
LABEL_NAMES = {
    1: "endometrium",
    2: "junctional_zone",
    3: "myometrium",
    4: "nabothian_cyst",
    5: "adenomyosis",
}
STRUCTURE_LABELS = ("endometrium", "junctional_zone", "myometrium")
PATHOLOGY_LABELS = ("nabothian_cyst", "adenomyosis")
LESIONS = ("none", "disc", "diffuse")


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-12)


def _phantom(rng: np.random.Generator, lesion: str):
    nx, ny, nz = SHAPE
    xx, yy = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64), indexing="ij")
    cx, cy = 48 + rng.uniform(-4, 4), 48 + rng.uniform(-4, 4)
    a, b = rng.uniform(24, 31), rng.uniform(14, 19)
    version = rng.choice(["anteverted", "retroverted"], p=[0.7, 0.3])
    flexion = rng.choice(["anteflexed", "retroflexed"], p=[0.85, 0.15])
    theta = rng.uniform(-0.5, 0.5) + (0.35 if version == "retroverted" else 0.0)
    i_endo = rng.uniform(0.78, 0.88)
    i_jz = rng.uniform(0.22, 0.32)
    i_myo = rng.uniform(0.48, 0.58)
    bg_level = rng.uniform(0.08, 0.16)

    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    w = -(xx - cx) * st + (yy - cy) * ct
    background = bg_level + 0.04 * _smooth_noise(rng, (nx, ny), 12)

    vox = np.zeros(SHAPE)
    lab = np.zeros(SHAPE, dtype=np.int32)
    zc = (nz - 1) / 2.0
    for z in range(nz):
        scale = np.sqrt(max(1.0 - ((z - zc) / (nz / 2.0 + 1.0)) ** 2, 0.05))
        rho = np.sqrt((u / (a * scale)) ** 2 + (w / (b * scale)) ** 2)

        def step(edge, width=0.035):
            return 1.0 / (1.0 + np.exp((rho - edge) / width))

        inside, jz_in, endo_in = step(1.0), step(0.5), step(0.3)
        img = background * (1 - inside) + i_myo * (inside - jz_in) + i_jz * (jz_in - endo_in) + i_endo * endo_in
        vox[..., z] = img
        lab[..., z] = np.where(rho < 0.3, 1, np.where(rho < 0.5, 2, np.where(rho < 1.0, 3, 0)))

    if lesion == "disc":
        r = rng.uniform(4.5, 6.5)
        ang = rng.uniform(0, 2 * np.pi)
        rho_c = rng.uniform(0.66, 0.76)
        du, dw = rho_c * a * np.cos(ang) * 0.9, rho_c * b * np.sin(ang) * 0.9
        px, py = cx + du * ct - dw * st, cy + du * st + dw * ct
        disc = (xx - px) ** 2 + (yy - py) ** 2 <= r**2
        soft = 1.0 / (1.0 + np.exp((np.sqrt((xx - px) ** 2 + (yy - py) ** 2) - r) / 0.6))
        i_les = rng.uniform(0.9, 0.98)
        z_lo = int(rng.integers(2, 4))
        for z in range(z_lo, z_lo + 3):
            vox[..., z] = vox[..., z] * (1 - soft) + i_les * soft
            lab[..., z][disc] = 4
    elif lesion == "diffuse":
        ang0 = rng.uniform(0, 2 * np.pi)
        phi = np.arctan2(w / b, u / a)
        sector = np.cos(phi - ang0) > 0.0
        texture = _smooth_noise(rng, (nx, ny), 1.5)
        for z in range(1, nz - 1):
            region = (lab[..., z] == 3) & sector
            vox[..., z] = np.where(region, vox[..., z] + 0.05 * texture + 0.03, vox[..., z])
            lab[..., z][region] = 5
    vox = vox + 0.015 * rng.standard_normal(SHAPE)
    vox = np.clip(vox, 0.0, 1.0)
    return vox, lab, str(version), str(flexion)


def make_phantom_corpus(n_cases: int, seed: int, lesion: str = "none", start: int = 0,
                        annotators: tuple[str, ...] = ("phantom",)) -> list[AnnotatedCase]:
    """Generate ``n_cases`` phantoms; identical ``(seed, start)`` give identical cases.

    Extra annotators beyond the first receive pathology masks dilated by
    one more pixel each (in-plane), mimicking broader delineations.
    """
    if n_cases < 1:
        raise ValidationError("n_cases must be >= 1")
    if lesion not in LESIONS:
        raise ValidationError(f"lesion must be one of {LESIONS}")
    out = []
    lesion_tag = {"none": 0, "disc": 1, "diffuse": 2}[lesion]
    for i in range(start, start + n_cases):
        rng = np.random.default_rng([seed, lesion_tag, i])
        vox, lab, version, flexion = _phantom(rng, lesion)
        cid = f"phantom_{lesion}_{i:04d}"
        masks = []
        for k, ann in enumerate(annotators):
            m = lab
            if k > 0 and lesion != "none":
                m = lab.copy()
                path = np.isin(lab, [4, 5])
                grown = ndimage.binary_dilation(path, structure=np.ones((3, 3, 1), bool), iterations=k)
                m[grown & ~path] = 4 if lesion == "disc" else 5
            masks.append(SegmentationMask(m, LABEL_NAMES, ann))
        md = CaseMetadata(
            patient_key=f"P_{lesion}_{i:04d}",
            field_strength_tesla=float(rng.choice([0.55, 1.5, 3.0])),
            uterine_version=version,
            uterine_flexion=flexion,
            cohort="healthy" if lesion == "none" else "unhealthy_inhouse",
        )
        out.append(AnnotatedCase(Volume(vox, SPACING, cid), tuple(masks), md))
    return out
