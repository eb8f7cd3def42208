"""Stage orchestration over an output directory.

Layout under ``<out>``::

    preprocessed/manifest.json   crops from `preprocess` or `phantom`
    synth/                       ddpm.pt, samples.nii.gz, filter_report.tsv, kept.nii.gz
    train/                       checkpoint.pt, history.jsonl, split.json
    infer/                       heatmaps/*.nii.gz, manifest.json
    evaluate/                    metrics.tsv, roc_points.tsv, roc.png
    bench/                       latency.tsv

Every stage writes ``stamp.json`` recording the digest of its inputs and
the hashes of its outputs; an unchanged stage whose outputs are intact is
skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .data import (
    CaseMetadata, SegmentationMask, Slice2D, Volume, load_mask, load_metadata, load_volume, save_mask, save_volume,
)
from .dataset import SplitSpec, expand_training_set, split_patients
from .errors import DependencyError, ValidationError
from .evaluate import (
    EvalCase, format_metrics_table, format_roc_points, latency_bench, plot_roc, stratify,
)
from .phantom import LABEL_NAMES as PHANTOM_LABELS
from .phantom import PATHOLOGY_LABELS as PHANTOM_PATHOLOGIES
from .phantom import STRUCTURE_LABELS as PHANTOM_STRUCTURES
from .phantom import make_phantom_corpus
from .postprocess import heatmap_stack, overlay_rgb
from .preprocess import preprocess_case
from .resvae import ResVAE, load_checkpoint, reconstruct, save_checkpoint
from .synthgen import DenoiserConfig, DiffusionModelParams, ddpm_sample, ddpm_train, memorization_filter
from .training import IdentityExtractor, RandomResNetExtractor, ResNet50Extractor, train

logger = logging.getLogger(__name__)

STAGES = ("preprocess", "synth", "train", "infer", "evaluate", "bench")
HEALTHY_COHORTS = ("healthy",)
EVAL_COHORTS = ("unhealthy_umd", "unhealthy_inhouse")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def _fresh(stage_dir: Path, digest: str) -> bool:
    stamp = stage_dir / "stamp.json"
    if not stamp.is_file():
        return False
    s = _read_json(stamp)
    if s.get("input_digest") != digest:
        return False
    for rel, sha in s.get("outputs", {}).items():
        p = stage_dir / rel
        if not p.is_file() or _sha(p) != sha:
            return False
    return True


def _stamp(stage_dir: Path, digest: str, outputs) -> None:
    files = {str(Path(o).relative_to(stage_dir)): _sha(o) for o in outputs}
    _write_json(stage_dir / "stamp.json", {"input_digest": digest, "outputs": files, "version": __version__})


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DependencyError(f"missing {what}: {path} (run the producing stage first)")
    return path


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.paths.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _checkpoint_path(cfg: RunConfig) -> Path:
    if cfg.paths.checkpoint:
        return Path(cfg.paths.checkpoint)
    return Path(cfg.paths.out) / "train" / "checkpoint.pt"


def _names(d: dict) -> dict[int, str]:
    return {int(k): v for k, v in d.items()}


def _load_preprocessed(cfg: RunConfig) -> tuple[dict, Path]:
    path = _require(Path(cfg.paths.out) / "preprocessed" / "manifest.json", "preprocess manifest")
    return _read_json(path), path


def _case_volume(root: Path, entry: dict) -> Volume:
    return load_volume(root / entry["volume"], entry["case_id"])


def _slices_of(v: Volume) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(v.voxels), -1, 0))


# ---------------------------------------------------------------------------
# preprocess / phantom
# ---------------------------------------------------------------------------

def _write_case(dest: Path, case_id: str, v: Volume, structure: SegmentationMask,
                annotations: dict[str, SegmentationMask], md: CaseMetadata, extra: dict | None = None) -> dict:
    save_volume(v, dest / f"{case_id}_img.nii.gz")
    save_mask(structure, v.spacing, dest / f"{case_id}_structure.nii.gz")
    ann = {}
    for a, m in annotations.items():
        save_mask(m, v.spacing, dest / f"{case_id}_ann-{a}.nii.gz")
        ann[a] = f"{case_id}_ann-{a}.nii.gz"
    entry = {
        "case_id": case_id,
        "volume": f"{case_id}_img.nii.gz",
        "structure": f"{case_id}_structure.nii.gz",
        "annotations": ann,
        "metadata": md.to_dict(),
    }
    entry.update(extra or {})
    return entry


def stage_preprocess(cfg: RunConfig) -> Path:
    """Crop every case of the input case manifest.

    Case manifest (JSON)::

        {"label_names": {"1": "uterus", ...},
         "cases": [{"case_id": ..., "volume": ..., "structure": ...,
                    "annotations": {"rater1": ...}, "metadata": ...}]}

    Paths are relative to the manifest; ``metadata`` points to a JSON
    sidecar with the :class:`CaseMetadata` keys.
    """
    if not cfg.paths.cases:
        raise DependencyError("preprocess needs paths.cases (an input case manifest)")
    src = _require(Path(cfg.paths.cases), "case manifest")
    dest = _out(cfg) / "preprocessed"
    digest = _digest("preprocess", cfg.digest(), _sha(src))
    if _fresh(dest, digest):
        logger.info("preprocess: up to date")
        return dest / "manifest.json"
    dest.mkdir(parents=True, exist_ok=True)
    man = _read_json(src)
    root = src.parent
    names = _names(man["label_names"])
    entries, outputs = [], []
    for c in man["cases"]:
        cid = c["case_id"]
        v = load_volume(root / c["volume"], cid)
        structure = load_mask(root / c["structure"], names, "structure")
        anns = {a: load_mask(root / p, names, a) for a, p in sorted(c.get("annotations", {}).items())}
        md = load_metadata(root / c["metadata"])
        v_c, masks_c, box = preprocess_case(v, [structure, *anns.values()], cfg.preprocess)
        entry = _write_case(dest, cid, v_c, masks_c[0], dict(zip(anns, masks_c[1:])), md,
                            {"bbox": {"x0": box.x0, "y0": box.y0, "z_range": list(box.z_range),
                                      "truncated": box.truncated}})
        entries.append(entry)
        outputs += [dest / entry["volume"], dest / entry["structure"]] + [dest / p for p in entry["annotations"].values()]
    manifest = {"stage": "preprocess", "config_hash": cfg.digest(), "version": __version__,
                "label_names": {str(k): v for k, v in names.items()}, "cases": entries}
    _write_json(dest / "manifest.json", manifest)
    _stamp(dest, digest, outputs + [dest / "manifest.json"])
    return dest / "manifest.json"


def stage_phantom(cfg: RunConfig) -> Path:
    """Write a phantom corpus in the preprocessed-manifest format."""
    dest = _out(cfg) / "preprocessed"
    p = cfg.phantom
    seed = cfg.stage_seed("phantom")
    digest = _digest("phantom", p, seed)
    if _fresh(dest, digest):
        logger.info("phantom: up to date")
        return dest / "manifest.json"
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    cases = make_phantom_corpus(p.n_healthy, seed, "none", annotators=p.annotators)
    if p.n_disc:
        cases += make_phantom_corpus(p.n_disc, seed, "disc", annotators=p.annotators)
    if p.n_diffuse:
        cases += make_phantom_corpus(p.n_diffuse, seed, "diffuse", annotators=p.annotators)
    entries, outputs = [], []
    for c in cases:
        anns = {m.annotator: m for m in c.masks}
        e = _write_case(dest, c.case_id, c.volume, c.masks[0], anns, c.metadata)
        entries.append(e)
        outputs += [dest / e["volume"], dest / e["structure"]] + [dest / q for q in e["annotations"].values()]
    manifest = {"stage": "phantom", "config_hash": cfg.digest(), "version": __version__,
                "label_names": {str(k): v for k, v in PHANTOM_LABELS.items()},
                "structure_labels": list(PHANTOM_STRUCTURES), "pathology_labels": list(PHANTOM_PATHOLOGIES),
                "cases": entries}
    _write_json(dest / "manifest.json", manifest)
    _stamp(dest, digest, outputs + [dest / "manifest.json"])
    return dest / "manifest.json"


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _healthy_split(cfg: RunConfig, man: dict):
    healthy = [c for c in man["cases"] if c["metadata"]["cohort"] in HEALTHY_COHORTS]
    keyed = [{"patient_key": c["metadata"]["patient_key"], "entry": c} for c in healthy]
    tr, va = split_patients(keyed, SplitSpec(cfg.split.train_fraction, cfg.stage_seed("split") % (2**32)))
    return [k["entry"] for k in tr], [k["entry"] for k in va]


def _stack_cases(root: Path, entries) -> tuple[np.ndarray, list[str]]:
    arrs, ids = [], []
    for e in entries:
        s = _slices_of(_case_volume(root, e))
        arrs.append(s)
        ids += [f"{e['case_id']}:{k}" for k in range(len(s))]
    return np.concatenate(arrs), ids


def _save_stack(stack: np.ndarray, path: Path) -> None:
    save_volume(Volume(np.moveaxis(stack, 0, -1), (1.0, 1.0, 1.0), path.name), path)


def _load_stack(path: Path) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(load_volume(path).voxels), -1, 0))


def stage_synth_train(cfg: RunConfig) -> Path:
    man, mpath = _load_preprocessed(cfg)
    dest = _out(cfg) / "synth"
    dest.mkdir(parents=True, exist_ok=True)
    tr, _ = _healthy_split(cfg, man)
    real, _ = _stack_cases(mpath.parent, tr)
    s = cfg.synth
    params = ddpm_train(real, s.schedule, s.steps, cfg.stage_seed("synth-train") % (2**31), s.batch_size,
                        s.learning_rate, DenoiserConfig(tuple(s.widths)))
    params.save(dest / "ddpm.pt")
    _write_json(dest / "ddpm_history.json", {k: v for k, v in params.history.items() if k != "train_loss"})
    return dest / "ddpm.pt"


def stage_synth_sample(cfg: RunConfig) -> Path:
    dest = _out(cfg) / "synth"
    params = DiffusionModelParams.load(_require(dest / "ddpm.pt", "diffusion checkpoint"))
    samples = ddpm_sample(params, cfg.synth.n_samples, cfg.stage_seed("synth-sample") % (2**31),
                          size=cfg.resvae.input_size)
    _save_stack(np.stack([s.pixels for s in samples]), dest / "samples.nii.gz")
    return dest / "samples.nii.gz"


def stage_synth_filter(cfg: RunConfig) -> Path:
    man, mpath = _load_preprocessed(cfg)
    dest = _out(cfg) / "synth"
    samples = _load_stack(_require(dest / "samples.nii.gz", "synthetic samples"))
    tr, _ = _healthy_split(cfg, man)
    real, real_ids = _stack_cases(mpath.parent, tr)
    real_slices = []
    for p, i in zip(real, real_ids):
        case, k = i.rsplit(":", 1)
        real_slices.append(Slice2D(p, (case, int(k)), size=None))
    kept, _, report = memorization_filter(list(samples), real_slices, cfg.synth.threshold, cfg.ssim)
    lines = ["sample_id\tmax_ssim\tnearest_real_id\tdecision"]
    for r in report:
        lines.append(f"{r.sample_id}\t{r.max_ssim:.6f}\t{r.nearest_real_id}\t{'kept' if r.kept else 'rejected'}")
    (dest / "filter_report.tsv").write_text("\n".join(lines) + "\n")
    kept_arr = np.stack(kept) if kept else np.zeros((0,) + samples.shape[1:], np.float32)
    if len(kept_arr):
        _save_stack(kept_arr, dest / "kept.nii.gz")
    elif (dest / "kept.nii.gz").exists():
        (dest / "kept.nii.gz").unlink()
    _write_json(dest / "manifest.json", {"stage": "synth", "config_hash": cfg.digest(), "version": __version__,
                                         "n_samples": len(samples), "n_kept": len(kept_arr),
                                         "kept": "kept.nii.gz" if len(kept_arr) else None})
    logger.info("synth-filter: kept %d of %d samples", len(kept_arr), len(samples))
    return dest / "manifest.json"


def stage_synth(cfg: RunConfig) -> Path:
    man, mpath = _load_preprocessed(cfg)
    dest = _out(cfg) / "synth"
    digest = _digest("synth", cfg.digest(), _sha(mpath))
    if _fresh(dest, digest):
        logger.info("synth: up to date")
        return dest / "manifest.json"
    stage_synth_train(cfg)
    stage_synth_sample(cfg)
    out = stage_synth_filter(cfg)
    files = [dest / f for f in ("ddpm.pt", "samples.nii.gz", "filter_report.tsv", "manifest.json")]
    if (dest / "kept.nii.gz").exists():
        files.append(dest / "kept.nii.gz")
    _stamp(dest, digest, files)
    return out


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------

def _extractor(cfg: RunConfig):
    p = cfg.perceptual
    if p.extractor == "identity":
        return IdentityExtractor()
    if p.extractor == "resnet50":
        return ResNet50Extractor(p.weights_path)
    return RandomResNetExtractor(cfg.stage_seed("perceptual") % (2**31), p.width)


def stage_train(cfg: RunConfig) -> Path:
    man, mpath = _load_preprocessed(cfg)
    dest = _out(cfg) / "train"
    synth_man = Path(cfg.paths.out) / "synth" / "manifest.json"
    use_synth = cfg.synth.use_in_training and synth_man.is_file()
    digest = _digest("train", cfg.digest(), _sha(mpath), _sha(synth_man) if use_synth else None)
    if _fresh(dest, digest):
        logger.info("train: up to date")
        return dest / "checkpoint.pt"
    dest.mkdir(parents=True, exist_ok=True)
    tr, va = _healthy_split(cfg, man)
    x_tr, _ = _stack_cases(mpath.parent, tr)
    x_va, _ = _stack_cases(mpath.parent, va)
    x_tr = expand_training_set(x_tr, cfg.augment, cfg.stage_seed("augment") % (2**32))
    n_synth = 0
    if use_synth:
        sm = _read_json(synth_man)
        if sm.get("kept"):
            synth = _load_stack(synth_man.parent / sm["kept"])
            n_synth = len(synth)
            x_tr = np.concatenate([x_tr, synth])  # synthetic slices train only, never validate
    _write_json(dest / "split.json", {
        "train": sorted({e["metadata"]["patient_key"] for e in tr}),
        "val": sorted({e["metadata"]["patient_key"] for e in va}),
        "n_train_slices": int(len(x_tr)), "n_val_slices": int(len(x_va)), "n_synthetic_slices": n_synth,
    })
    tcfg = cfg.train_config()
    torch.manual_seed(tcfg.seed)
    model = ResVAE(cfg.resvae)
    result = train(model, x_tr, x_va, tcfg, cfg.loss, cfg.ssim, _extractor(cfg), dest / "history.jsonl")
    cid = save_checkpoint(model, dest / "checkpoint.pt", {
        "config_hash": cfg.digest(), "version": __version__, "best_epoch": result.best_epoch,
        "stop_epoch": result.stop_epoch, "best_val_loss": result.best_val_loss})
    _write_json(dest / "manifest.json", {"stage": "train", "checkpoint": "checkpoint.pt", "checkpoint_id": cid,
                                         "config_hash": cfg.digest(), "version": __version__,
                                         "best_epoch": result.best_epoch, "stop_epoch": result.stop_epoch,
                                         "stopped_early": result.stopped_early})
    _stamp(dest, digest, [dest / f for f in ("checkpoint.pt", "history.jsonl", "split.json", "manifest.json")])
    return dest / "checkpoint.pt"


def stage_infer(cfg: RunConfig) -> Path:
    man, mpath = _load_preprocessed(cfg)
    ckpt = _require(_checkpoint_path(cfg), "ResVAE checkpoint")
    dest = _out(cfg) / "infer"
    digest = _digest("infer", cfg.digest(), _sha(mpath), _sha(ckpt))
    if _fresh(dest, digest):
        logger.info("infer: up to date")
        return dest / "manifest.json"
    if dest.exists():
        shutil.rmtree(dest)
    (dest / "heatmaps").mkdir(parents=True)
    model, meta = load_checkpoint(ckpt, cfg.resvae)
    cid = meta["checkpoint_id"]
    chash = cfg.digest()
    entries, outputs = [], []
    root = mpath.parent
    for e in man["cases"]:
        if e["metadata"]["cohort"] not in EVAL_COHORTS:
            continue
        v = _case_volume(root, e)
        x = _slices_of(v)
        recon = reconstruct(model, x)
        heat = heatmap_stack(x, recon, cfg.postprocess)
        rel = f"heatmaps/{e['case_id']}_heat.nii.gz"
        save_volume(Volume(np.moveaxis(heat, 0, -1), v.spacing, e["case_id"]), dest / rel)
        outputs.append(dest / rel)
        if cfg.evaluate.overlays:
            from PIL import Image

            (dest / "overlays").mkdir(exist_ok=True)
            for k in range(len(x)):
                p = dest / "overlays" / f"{e['case_id']}_z{k:02d}.png"
                Image.fromarray(overlay_rgb(x[k], heat[k])).save(p)
        entries.append({
            "case_id": e["case_id"], "heatmap": rel, "metadata": e["metadata"],
            "annotations": {a: str((root / p).resolve()) for a, p in e["annotations"].items()},
            "config_hash": chash, "checkpoint_id": cid, "version": __version__,
        })
    if not entries:
        raise DependencyError("infer: the preprocess manifest holds no unhealthy cases")
    _write_json(dest / "manifest.json", {"stage": "infer", "config_hash": chash, "checkpoint_id": cid,
                                         "version": __version__, "label_names": man["label_names"],
                                         "pathology_labels": man.get("pathology_labels"), "cases": entries})
    _stamp(dest, digest, outputs + [dest / "manifest.json"])
    return dest / "manifest.json"


# ---------------------------------------------------------------------------
# evaluation / bench
# ---------------------------------------------------------------------------

def load_eval_cases(infer_manifest: Path) -> tuple[list[EvalCase], dict]:
    man = _read_json(infer_manifest)
    hashes = {c["config_hash"] for c in man["cases"]}
    ckpts = {c["checkpoint_id"] for c in man["cases"]}
    if len(hashes) > 1:
        raise ValidationError(f"refusing to mix heatmaps from different config hashes: {sorted(hashes)}")
    if len(ckpts) > 1:
        raise ValidationError(f"refusing to mix heatmaps from different checkpoints: {sorted(ckpts)}")
    names = _names(man["label_names"])
    cases = []
    for c in man["cases"]:
        heat = np.asarray(load_volume(infer_manifest.parent / c["heatmap"]).voxels, dtype=np.float64)
        masks = {a: load_mask(p, names, a) for a, p in c["annotations"].items()}
        cases.append(EvalCase(c["case_id"], heat, masks, CaseMetadata(**c["metadata"])))
    return cases, man


def stage_evaluate(cfg: RunConfig) -> Path:
    ipath = _require(Path(cfg.paths.out) / "infer" / "manifest.json", "infer manifest")
    dest = _out(cfg) / "evaluate"
    digest = _digest("evaluate", cfg.digest(), _sha(ipath))
    if _fresh(dest, digest):
        logger.info("evaluate: up to date")
        return dest / "metrics.tsv"
    dest.mkdir(parents=True, exist_ok=True)
    cases, man = load_eval_cases(ipath)
    pathologies = man.get("pathology_labels") or list(cfg.evaluate.pathology_labels)
    ev = cfg.evaluate
    groups = ["overall", "pathology", "position", "annotator"]
    if len({a for c in cases for a in c.masks}) > 1:
        groups.append("annotator_pathology")
    rows, reports, notes = [], [], []
    for by in groups:
        res = stratify(cases, by, pathologies, experts=ev.experts, weighted=ev.weighted)
        rows += res.reports + res.averages
        reports += res.reports
        notes += res.notes
    header = {"config_hash": man["config_hash"], "checkpoint_id": man["checkpoint_id"], "version": __version__}
    (dest / "metrics.tsv").write_text(format_metrics_table(rows, header))
    (dest / "roc_points.tsv").write_text(format_roc_points(reports))
    (dest / "notes.txt").write_text("".join(n + "\n" for n in notes))
    outputs = [dest / "metrics.tsv", dest / "roc_points.tsv", dest / "notes.txt"]
    if ev.plots:
        plot_roc([r for r in reports if r.stratum.startswith("pathology:")] or reports, dest / "roc.png")
    _stamp(dest, digest, outputs)
    return dest / "metrics.tsv"


def stage_bench(cfg: RunConfig) -> Path:
    ckpt = _require(_checkpoint_path(cfg), "ResVAE checkpoint")
    dest = _out(cfg) / "bench"
    dest.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(ckpt, cfg.resvae)
    rep = latency_bench(model, cfg.bench.n_slices, cfg.bench.warmup, seed=cfg.stage_seed("bench") % (2**31))
    lines = [f"# checkpoint_id={meta['checkpoint_id']}", f"# config_hash={cfg.digest()}", *rep.lines()]
    (dest / "latency.tsv").write_text("\n".join(lines) + "\n")
    for line in rep.lines():
        print(line)
    return dest / "latency.tsv"


_RUNNERS = {
    "preprocess": stage_preprocess,
    "synth": stage_synth,
    "train": stage_train,
    "infer": stage_infer,
    "evaluate": stage_evaluate,
    "bench": stage_bench,
}


def run_pipeline(cfg: RunConfig, stages) -> dict[str, Path]:
    """Run the requested stages in pipeline order; returns each stage's main artifact."""
    stages = set(stages)
    unknown = stages - set(STAGES)
    if unknown:
        raise ValidationError(f"unknown stage(s): {sorted(unknown)}; choose from {STAGES}")
    out = {}
    for s in STAGES:
        if s in stages:
            logger.info("stage %s", s)
            out[s] = _RUNNERS[s](cfg)
    return out
