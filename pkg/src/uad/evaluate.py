"""Pixel-level ROC/AUC, confusion-matrix metrics, stratified reports, volumetry and latency."""

from __future__ import annotations

import logging
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import CaseMetadata, SegmentationMask
from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("accuracy", "precision", "sensitivity", "specificity", "auc", "threshold", "tp", "fp", "tn", "fn")

# Published single-slice reconstruction latency (Apple M3 GPU), printed for comparison only.
REFERENCE_MS_PER_SLICE = 10.8
REFERENCE_FPS = 92.6
REFERENCE_S_PER_VOLUME = 0.324


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def roc_auc(scores, labels) -> RocCurve:
    """ROC over all distinct score thresholds (predict positive when score >= threshold).

    Equal scores form a single step, so the trapezoidal AUC equals the
    Mann-Whitney statistic with ties counted as one half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thr = np.concatenate([[np.inf], s[ends]])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thr, auc)


def choose_threshold(c: RocCurve) -> float:
    """Threshold maximizing Youden's J = TPR - FPR.

    Ties go to the lower FPR (higher specificity). The +inf starting point
    is only chosen when it is the only point.
    """
    fpr, tpr, thr = np.asarray(c.fpr), np.asarray(c.tpr), np.asarray(c.thresholds)
    cand = np.flatnonzero(np.isfinite(thr))
    if cand.size == 0:
        return float(thr[0])
    j = tpr[cand] - fpr[cand]
    best = cand[j == j.max()]
    best = best[fpr[best] == fpr[best].min()]
    return float(thr[best[0]])


@dataclass
class MetricsReport:
    stratum: str
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    auc: float | None
    n_cases: int = 0
    curve: RocCurve | None = field(default=None, repr=False)

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def sensitivity(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in TABLE_COLUMNS}


@dataclass
class AveragedMetrics:
    """Mean of metric values over several reports; carries no counts."""

    stratum: str
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    auc: float | None
    threshold: float | None = None
    members: tuple[str, ...] = ()

    def row(self) -> dict:
        out = {k: getattr(self, k, None) for k in TABLE_COLUMNS}
        return out


def _ratio(a: int, b: int) -> float:
    return a / b if b > 0 else 0.0


def confusion_counts(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    pred = np.asarray(scores).ravel() >= threshold
    y = np.asarray(labels).astype(bool).ravel()
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(y.size - tp - fp - fn)
    return tp, fp, tn, fn


def metrics_from_scores(scores, labels, threshold: float | None = None, stratum: str = "overall",
                        n_cases: int = 0) -> MetricsReport:
    """Confusion-matrix metrics at ``threshold`` (Youden's J when None) plus AUC."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    curve = None
    if labels.any() and not labels.all():
        curve = roc_auc(scores, labels)
    if threshold is None:
        if curve is None:
            raise ValidationError(f"stratum {stratum!r}: cannot choose a threshold from a single-class ROC")
        threshold = choose_threshold(curve)
    tp, fp, tn, fn = confusion_counts(scores, labels, threshold)
    return MetricsReport(stratum, tp, fp, tn, fn, float(threshold), curve.auc if curve else None, n_cases, curve)


def pixel_metrics(maps, gt: SegmentationMask, pathology: Iterable[int], threshold: float | None = None,
                  stratum: str = "overall") -> MetricsReport | None:
    """Score a heatmap stack against a mask; positives are voxels with a pathology id.

    Returns None (with a warning) when the mask has no positive voxels.
    """
    v = np.asarray(getattr(maps, "values", maps), dtype=np.float64)
    if v.shape != gt.shape:
        raise ShapeError(f"heatmap shape {v.shape} does not match mask shape {gt.shape}")
    pos = gt.binary(pathology)
    if not pos.any():
        warnings.warn(f"{stratum}: no positive voxels; skipped", stacklevel=2)
        return None
    return metrics_from_scores(v, pos, threshold, stratum, n_cases=1)


@dataclass
class EvalCase:
    case_id: str
    heatmap: np.ndarray
    masks: dict[str, SegmentationMask]
    metadata: CaseMetadata

    def __post_init__(self):
        for a, m in self.masks.items():
            if m.shape != tuple(self.heatmap.shape):
                raise ShapeError(f"case {self.case_id}: mask {a!r} shape {m.shape} != heatmap {self.heatmap.shape}")

    def primary_mask(self) -> SegmentationMask:
        return self.masks[sorted(self.masks)[0]]


def _pool(cases: Sequence[EvalCase], positive) -> tuple[np.ndarray, np.ndarray, int]:
    scores, labels = [], []
    n = 0
    for c in cases:
        pos = positive(c)
        if pos is None:
            continue
        scores.append(np.asarray(c.heatmap, dtype=np.float64).ravel())
        labels.append(pos.ravel())
        n += 1
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=bool), 0
    return np.concatenate(scores), np.concatenate(labels), n


def _report(stratum, cases, positive, threshold, notes) -> MetricsReport | None:
    s, y, n = _pool(cases, positive)
    if n == 0 or not y.any():
        notes.append(f"{stratum}: no positive voxels; skipped")
        return None
    if y.all():
        notes.append(f"{stratum}: no negative voxels; skipped")
        return None
    return metrics_from_scores(s, y, threshold, stratum, n)


def average_reports(reports: Sequence[MetricsReport], stratum: str, weighted: bool = False) -> AveragedMetrics | None:
    """Mean of per-stratum metrics; ``weighted`` uses case counts as weights."""
    reports = [r for r in reports if r is not None]
    if not reports:
        return None
    w = np.array([r.n_cases if weighted else 1.0 for r in reports], dtype=np.float64)
    if w.sum() == 0:
        w = np.ones_like(w)

    def mean(key):
        vals = [getattr(r, key) for r in reports]
        if any(v is None for v in vals):
            return None
        return float(np.dot(w, vals) / w.sum())

    return AveragedMetrics(stratum, mean("accuracy"), mean("precision"), mean("sensitivity"), mean("specificity"),
                           mean("auc"), None, tuple(r.stratum for r in reports))


@dataclass
class StratifiedResult:
    reports: list[MetricsReport]
    averages: list[AveragedMetrics]
    notes: list[str]


def stratify(
    cases: Sequence[EvalCase],
    by: str,
    pathology_names: Sequence[str],
    threshold: float | None = None,
    experts: Sequence[str] = (),
    weighted: bool = False,
) -> StratifiedResult:
    """Per-stratum reports plus averages.

    ``by`` is one of ``overall``, ``pathology``, ``position``, ``annotator``
    or ``annotator_pathology``. Unless stated, the case's first annotator
    (alphabetical) supplies ground truth. Strata are emitted in sorted order.
    """
    cases = sorted(cases, key=lambda c: c.case_id)
    path_names = set(pathology_names)
    notes: list[str] = []
    reports: list[MetricsReport] = []
    averages: list[AveragedMetrics] = []

    def any_pathology(annotator=None):
        def f(c):
            m = c.masks.get(annotator) if annotator else c.primary_mask()
            return None if m is None else m.binary(m.ids_named(path_names))
        return f

    def one_pathology(name, annotator=None):
        def f(c):
            m = c.masks.get(annotator) if annotator else c.primary_mask()
            if m is None:
                return None
            ids = m.ids_named([name])
            pos = m.binary(ids)
            return pos if pos.any() else None
        return f

    def add(stratum, subset, positive):
        r = _report(stratum, subset, positive, threshold, notes)
        if r is not None:
            reports.append(r)
        return r

    if by == "overall":
        add("overall", cases, any_pathology())
    elif by == "pathology":
        for name in sorted(path_names):
            add(f"pathology:{name}", cases, one_pathology(name))
        avg = average_reports(reports, "pathology:average", weighted)
        if avg:
            averages.append(avg)
    elif by == "position":
        groups: dict[str, list] = {}
        for c in cases:
            groups.setdefault(c.metadata.position, []).append(c)
        for pos in sorted(groups):
            add(f"position:{pos}", groups[pos], any_pathology())
        avg = average_reports(reports, "position:average", weighted)
        if avg:
            averages.append(avg)
    elif by == "annotator":
        annotators = sorted({a for c in cases for a in c.masks})
        per = {}
        for a in annotators:
            per[a] = add(f"annotator:{a}", [c for c in cases if a in c.masks], any_pathology(a))
        expert_reports = [per[a] for a in experts if per.get(a) is not None]
        if expert_reports:
            averages.append(average_reports(expert_reports, "annotator:experienced_mean"))
    elif by == "annotator_pathology":
        annotators = sorted({a for c in cases for a in c.masks})
        for a in annotators:
            sub = [c for c in cases if a in c.masks]
            mine = []
            for name in sorted(path_names):
                r = add(f"annotator:{a}|pathology:{name}", sub, one_pathology(name, a))
                if r is not None:
                    mine.append(r)
            avg = average_reports(mine, f"annotator:{a}|pathology:average", weighted)
            if avg:
                averages.append(avg)
    else:
        raise ValidationError(f"unknown stratification {by!r}")
    for n in notes:
        logger.info(n)
    return StratifiedResult(reports, averages, notes)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{float(v):.10g}"


def format_metrics_table(rows: Sequence, header: dict | None = None) -> str:
    """Tab-separated table: a ``stratum`` key followed by :data:`TABLE_COLUMNS`."""
    lines = []
    for k, v in (header or {}).items():
        lines.append(f"# {k}={v}")
    lines.append("\t".join(("stratum",) + TABLE_COLUMNS))
    for r in rows:
        row = r.row()
        lines.append("\t".join([r.stratum] + [_fmt(row[k]) for k in TABLE_COLUMNS]))
    return "\n".join(lines) + "\n"


def format_roc_points(reports: Sequence[MetricsReport], max_points: int = 2000) -> str:
    """ROC dump; long curves are thinned to ``max_points`` evenly spaced points (ends kept)."""
    lines = ["stratum\tfpr\ttpr\tthreshold"]
    for r in reports:
        if r.curve is None:
            continue
        n = len(r.curve.fpr)
        idx = np.unique(np.linspace(0, n - 1, min(n, max_points)).round().astype(int))
        for i in idx:
            lines.append(f"{r.stratum}\t{_fmt(r.curve.fpr[i])}\t{_fmt(r.curve.tpr[i])}\t{_fmt(r.curve.thresholds[i])}")
    return "\n".join(lines) + "\n"


def plot_roc(reports: Sequence[MetricsReport], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for r in reports:
        if r.curve is not None:
            ax.plot(r.curve.fpr, r.curve.tpr, label=f"{r.stratum} (AUC {r.auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def lesion_volume(m: SegmentationMask, label: int, spacing) -> float:
    """Lesion volume in mL (voxel count times voxel volume in mm^3, / 1000)."""
    n = int(np.count_nonzero(np.asarray(m.labels) == int(label)))
    sx, sy, sz = (float(s) for s in spacing)
    return n * (sx * sy * sz) / 1000.0


@dataclass(frozen=True)
class LatencyReport:
    ms_per_slice: float
    n_slices: int
    warmup: int

    @property
    def fps(self) -> float:
        return 1000.0 / self.ms_per_slice

    @property
    def s_per_volume(self) -> float:
        return 30 * self.ms_per_slice / 1000.0

    def lines(self) -> list[str]:
        return [
            f"ms_per_slice\t{self.ms_per_slice:.4f}",
            f"fps\t{self.fps:.4f}",
            f"s_per_30_slice_volume\t{self.s_per_volume:.4f}",
            f"reference\t{REFERENCE_MS_PER_SLICE} ms/slice, {REFERENCE_FPS} FPS, "
            f"{REFERENCE_S_PER_VOLUME} s/volume (published, Apple M3 GPU; not a local target)",
        ]


@torch.no_grad()
def latency_bench(model, n_slices: int = 100, warmup: int = 10, size: int | None = None, seed: int = 0) -> LatencyReport:
    """Median wall-clock time of single-slice mean reconstructions."""
    if n_slices < 1 or warmup < 0:
        raise ValidationError("latency_bench needs n_slices >= 1 and warmup >= 0")
    model.eval()
    size = size or model.cfg.input_size
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand((n_slices + warmup, 1, size, size), generator=gen)
    times = []
    for i in range(n_slices + warmup):
        t0 = time.perf_counter()
        model(x[i:i + 1])
        dt = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            times.append(dt)
    return LatencyReport(statistics.median(times), n_slices, warmup)
