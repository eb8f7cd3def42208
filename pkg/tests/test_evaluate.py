import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uad.data import CaseMetadata, SegmentationMask
from uad.errors import ValidationError
from uad.evaluate import (
    REFERENCE_FPS, REFERENCE_MS_PER_SLICE, EvalCase, LatencyReport, MetricsReport, average_reports,
    choose_threshold, confusion_counts, format_metrics_table, latency_bench, lesion_volume, metrics_from_scores,
    pixel_metrics, roc_auc, stratify,
)
from uad.resvae import ResVAE, ResVaeConfig

NAMES = {1: "uterus", 2: "myoma", 3: "adenomyosis"}


def mann_whitney(scores, labels):
    pos = scores[labels.astype(bool)]
    neg = scores[~labels.astype(bool)]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def random_instance(g):
    n = int(g.integers(2, 501))
    labels = g.random(n) < g.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    scores = np.round(g.normal(size=n) + labels * g.uniform(0, 2), int(g.integers(0, 3)))
    return scores, labels


def test_auc_matches_mann_whitney():
    g = np.random.default_rng(0)
    for _ in range(200):
        s, y = random_instance(g)
        assert roc_auc(s, y).auc == pytest.approx(mann_whitney(s, y), abs=1e-9)


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    g = np.random.default_rng(1)
    s, y = random_instance(g)
    assert roc_auc(s, ~y).auc == pytest.approx(1 - roc_auc(s, y).auc, abs=1e-12)
    with pytest.raises(ValidationError):
        roc_auc([1, 2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_transform(seed):
    s, y = random_instance(np.random.default_rng(seed))
    s = s / (np.abs(s).max() + 1)
    assert roc_auc(np.exp(s), y).auc == pytest.approx(roc_auc(s, y).auc, abs=1e-12)


def test_threshold_choice():
    c = roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    t = choose_threshold(c)
    assert 0.2 < t <= 0.8
    tp, fp, tn, fn = confusion_counts([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], t)
    assert (tp, fp, tn, fn) == (2, 0, 2, 0)
    one = roc_auc([0.5, 0.5], [1, 0])
    assert choose_threshold(one) == 0.5


def test_threshold_on_symmetric_random_scores():
    g = np.random.default_rng(3)
    s = g.random(20000)
    y = g.random(20000) < 0.5
    c = roc_auc(s, y)
    t = choose_threshold(c)
    i = int(np.flatnonzero(c.thresholds == t)[0])
    j = c.tpr[i] - c.fpr[i]
    assert j == pytest.approx((c.tpr - c.fpr)[np.isfinite(c.thresholds)].max())
    assert j < 0.05


def test_confusion_arithmetic():
    r = MetricsReport("x", tp=8, fp=2, tn=88, fn=2, threshold=0.5, auc=None)
    assert r.sensitivity == pytest.approx(0.8)
    assert r.specificity == pytest.approx(88 / 90)
    assert r.precision == pytest.approx(0.8)
    assert r.accuracy == pytest.approx(0.96)


def _mask(lab, annotator="a"):
    return SegmentationMask(lab, NAMES, annotator)


def test_pixel_metrics_examples(rng):
    lab = np.zeros((8, 8, 2), int)
    lab[2:4, 2:4, 1] = 2
    heat = (lab == 2).astype(float)
    r = pixel_metrics(heat, _mask(lab), {2}, threshold=0.5)
    assert r.accuracy == r.precision == r.sensitivity == r.specificity == 1.0
    r = pixel_metrics(np.zeros_like(heat), _mask(lab), {2}, threshold=0.5)
    assert r.sensitivity == 0 and r.specificity == 1
    with pytest.warns(UserWarning):
        assert pixel_metrics(heat, _mask(np.zeros_like(lab)), {2}) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_consistent_with_counts(seed):
    s, y = random_instance(np.random.default_rng(seed))
    r = metrics_from_scores(s, y)
    tp, fp, tn, fn = r.tp, r.fp, r.tn, r.fn
    assert r.accuracy == pytest.approx((tp + tn) / (tp + fp + tn + fn), abs=1e-12)
    assert r.sensitivity == pytest.approx(tp / (tp + fn), abs=1e-12)
    assert r.specificity == pytest.approx(tn / (tn + fp), abs=1e-12)
    assert r.precision == pytest.approx(tp / (tp + fp) if tp + fp else 0.0, abs=1e-12)


def _case(cid, heat, labs, version="anteverted", flexion="anteflexed"):
    masks = {a: _mask(l, a) for a, l in labs.items()}
    md = CaseMetadata(cid, 1.5, version, flexion, "unhealthy_inhouse")
    return EvalCase(cid, heat, masks, md)


def _lesion_cases(rng):
    cases = []
    for i in range(6):
        lab = np.zeros((12, 12, 2), int)
        lab[4:8, 4:8, :] = 2 if i % 2 == 0 else 3
        heat = rng.random(lab.shape) + 0.8 * (lab > 0)
        version = "anteverted" if i < 3 else "retroverted"
        cases.append(_case(f"c{i}", heat, {"a": lab}, version=version))
    return cases


def test_stratify_position_average_and_single_annotator(rng):
    cases = _lesion_cases(rng)
    res = stratify(cases, "position", ["myoma", "adenomyosis"])
    a, b = (r.auc for r in res.reports)
    assert res.averages[0].auc == pytest.approx((a + b) / 2)
    overall = stratify(cases, "overall", ["myoma", "adenomyosis"]).reports[0]
    by_ann = stratify(cases, "annotator", ["myoma", "adenomyosis"]).reports[0]
    assert (by_ann.tp, by_ann.fp, by_ann.tn, by_ann.fn, by_ann.auc) == (
        overall.tp, overall.fp, overall.tn, overall.fn, overall.auc)


def test_weighted_average():
    r1 = MetricsReport("a", 1, 1, 1, 1, 0.5, 0.6, n_cases=1)
    r2 = MetricsReport("b", 1, 1, 1, 1, 0.5, 0.9, n_cases=3)
    assert average_reports([r1, r2], "avg").auc == pytest.approx(0.75)
    assert average_reports([r1, r2], "avg", weighted=True).auc == pytest.approx(0.825)


def test_nested_annotations_sensitivity(rng):
    cases = []
    for i in range(4):
        narrow = np.zeros((16, 16, 2), int)
        narrow[6:9, 6:9, :] = 2
        broad = narrow.copy()
        broad[5:11, 5:11, :] = 2
        heat = rng.random(narrow.shape) + 0.5 * (broad > 0) + 0.5 * (narrow > 0)
        cases.append(_case(f"n{i}", heat, {"broad": broad, "narrow": narrow}))
    for t in np.linspace(0.2, 1.8, 9):
        reps = {r.stratum: r for r in stratify(cases, "annotator", ["myoma"], threshold=t).reports}
        # every narrow positive is a broad positive, so broad catches at least as many
        assert reps["annotator:broad"].tp >= reps["annotator:narrow"].tp


def test_experienced_mean_and_table(rng):
    cases = []
    for i in range(3):
        lab = np.zeros((10, 10, 2), int)
        lab[3:6, 3:6, 0] = 2
        heat = rng.random(lab.shape) + (lab > 0)
        cases.append(_case(f"e{i}", heat, {"r1": lab, "r2": lab, "r3": lab}))
    res = stratify(cases, "annotator", ["myoma"], experts=("r1", "r2"))
    assert res.averages[0].stratum == "annotator:experienced_mean"
    table = format_metrics_table(res.reports + res.averages, {"config_hash": "abc"})
    lines = table.splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1].split("\t")[:3] == ["stratum", "accuracy", "precision"]
    assert len(lines) == 2 + 4
    with pytest.raises(ValidationError):
        stratify(cases, "colour", ["myoma"])


def test_lesion_volume():
    lab = np.zeros((40, 40, 10), int)
    lab[:, :20, :] = 2
    assert (lab == 2).sum() == 8000
    m = _mask(lab)
    assert lesion_volume(m, 2, (0.5, 0.5, 1.0)) == pytest.approx(2.0, abs=1e-9)
    assert lesion_volume(m, 3, (0.5, 0.5, 1.0)) == 0.0
    assert lesion_volume(m, 2, (1.0, 0.5, 1.0)) == pytest.approx(4.0, abs=1e-12)


def test_latency_report_and_stability():
    torch.manual_seed(0)
    m = ResVAE(ResVaeConfig())
    r1 = latency_bench(m, n_slices=20, warmup=5)
    assert r1.fps * r1.ms_per_slice == pytest.approx(1000.0, rel=0.01)
    assert r1.s_per_volume == pytest.approx(0.03 * r1.ms_per_slice)
    assert any(line.startswith("reference") for line in r1.lines())
    # wall-clock medians on a shared CPU are noisy; allow a few measurement attempts
    ratios = []
    for _ in range(3):
        a = latency_bench(m, n_slices=50, warmup=10).ms_per_slice
        b = latency_bench(m, n_slices=100, warmup=10).ms_per_slice
        ratios.append(b / a)
        if abs(b / a - 1) <= 0.2:
            break
    assert abs(ratios[-1] - 1) <= 0.2, ratios


def test_reference_point_arithmetic():
    ref = LatencyReport(REFERENCE_MS_PER_SLICE, 1, 0)
    assert ref.fps == pytest.approx(REFERENCE_FPS, abs=0.05)
    assert ref.s_per_volume == pytest.approx(0.324)
