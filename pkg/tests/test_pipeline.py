import json

import numpy as np
import pytest

from uad import __version__
from uad.cli import main
from uad.config import config_from_dict
from uad.data import CaseMetadata, SegmentationMask, Volume, save_mask, save_metadata, save_volume
from uad.errors import DependencyError, ValidationError
from uad.pipeline import load_eval_cases, run_pipeline, stage_phantom, stage_preprocess

TINY = {
    "seed": 3,
    "resvae": {"channels": [4, 8, 16, 32], "latent_dim": 16},
    "train": {"epochs": 2, "learning_rate": 1e-3, "batch_size": 16},
    "augment": {"copies_per_slice": 1},
    "synth": {"steps": 3, "n_samples": 3, "widths": [4, 8, 16], "T": 6},
    "phantom": {"n_healthy": 5, "n_disc": 2, "n_diffuse": 2, "annotators": ["a", "b"]},
    "bench": {"n_slices": 3, "warmup": 1},
    "evaluate": {"plots": False},
}


def _cfg(out, **extra):
    raw = json.loads(json.dumps(TINY))
    raw["paths"] = {"out": str(out), **extra}
    return config_from_dict(raw)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = _cfg(out)
    stage_phantom(cfg)
    artifacts = run_pipeline(cfg, ["synth", "train", "infer", "evaluate", "bench"])
    return cfg, out, artifacts


def test_stages_produce_artifacts(built):
    cfg, out, art = built
    assert set(art) == {"synth", "train", "infer", "evaluate", "bench"}
    table = (out / "evaluate" / "metrics.tsv").read_text()
    assert f"# config_hash={cfg.digest()}" in table and f"# version={__version__}" in table
    infer = json.loads((out / "infer" / "manifest.json").read_text())
    for c in infer["cases"]:
        assert c["config_hash"] == cfg.digest() and c["checkpoint_id"] and c["version"] == __version__
        assert c["metadata"]["cohort"] != "healthy"
    assert len(infer["cases"]) == 4
    assert "annotator:a|pathology:nabothian_cyst" in table
    assert "ms_per_slice" in (out / "bench" / "latency.tsv").read_text()


def test_synthetic_slices_only_in_training(built):
    _, out, _ = built
    split = json.loads((out / "train" / "split.json").read_text())
    synth = json.loads((out / "synth" / "manifest.json").read_text())
    assert split["n_synthetic_slices"] == synth["n_kept"]
    assert split["n_val_slices"] == 8 * len(split["val"])
    assert not set(split["train"]) & set(split["val"])
    report = (out / "synth" / "filter_report.tsv").read_text().splitlines()
    assert report[0].split("\t") == ["sample_id", "max_ssim", "nearest_real_id", "decision"]
    assert len(report) == 1 + synth["n_samples"]


def test_rerun_is_noop(built):
    cfg, out, _ = built
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and "bench" not in p.parts}
    mtimes = {p: p.stat().st_mtime_ns for p in before}
    run_pipeline(cfg, ["synth", "train", "infer", "evaluate"])
    for p, data in before.items():
        assert p.read_bytes() == data
        assert p.stat().st_mtime_ns == mtimes[p], p


def test_prebuilt_checkpoint_infer_evaluate_is_deterministic(built, tmp_path):
    cfg, out, _ = built
    tables = []
    for name in ("x", "y"):
        o = tmp_path / name
        c2 = _cfg(o, checkpoint=str(out / "train" / "checkpoint.pt"))
        stage_phantom(c2)
        run_pipeline(c2, ["infer", "evaluate"])
        assert list((o / "infer" / "heatmaps").glob("*.nii.gz"))
        tables.append((o / "evaluate" / "metrics.tsv").read_bytes())
    assert tables[0] == tables[1] == (out / "evaluate" / "metrics.tsv").read_bytes()


def test_missing_dependency(tmp_path):
    with pytest.raises(DependencyError, match="preprocess manifest"):
        run_pipeline(_cfg(tmp_path), ["train"])
    with pytest.raises(ValidationError):
        run_pipeline(_cfg(tmp_path), ["dance"])


def test_evaluate_refuses_mixed_hashes(built, tmp_path):
    _, out, _ = built
    man = json.loads((out / "infer" / "manifest.json").read_text())
    man["cases"][0]["config_hash"] = "0000000000000000"
    d = tmp_path / "infer"
    d.mkdir()
    (d / "manifest.json").write_text(json.dumps(man))
    (d / "heatmaps").symlink_to(out / "infer" / "heatmaps")
    with pytest.raises(ValidationError, match="config hashes"):
        load_eval_cases(d / "manifest.json")


def _raw_case(root, cid, cohort, lesion):
    rng = np.random.default_rng(len(cid))
    lab = np.zeros((128, 128, 10), np.int32)
    lab[40:90, 50:100, 2:9] = 1
    if lesion:
        lab[60:66, 70:76, 4:6] = 2
    vox = rng.random(lab.shape) * 300 + 200 * (lab > 0)
    names = {1: "uterus", 2: "myoma"}
    save_volume(Volume(vox, (1, 1, 3)), root / f"{cid}.nii.gz")
    save_mask(SegmentationMask(lab, names), (1, 1, 3), root / f"{cid}_seg.nii.gz")
    save_mask(SegmentationMask(lab, names), (1, 1, 3), root / f"{cid}_r1.nii.gz")
    save_metadata(CaseMetadata(f"P{cid}", 3.0, "anteverted", "anteflexed", cohort), root / f"{cid}.json")
    return {"case_id": cid, "volume": f"{cid}.nii.gz", "structure": f"{cid}_seg.nii.gz",
            "annotations": {"r1": f"{cid}_r1.nii.gz"}, "metadata": f"{cid}.json"}


def test_preprocess_stage_from_case_manifest(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    cases = [_raw_case(raw, "h1", "healthy", False), _raw_case(raw, "u1", "unhealthy_umd", True)]
    (raw / "cases.json").write_text(json.dumps({"label_names": {"1": "uterus", "2": "myoma"}, "cases": cases}))
    cfg = _cfg(tmp_path / "out", cases=str(raw / "cases.json"))
    man_path = stage_preprocess(cfg)
    man = json.loads(man_path.read_text())
    assert [c["case_id"] for c in man["cases"]] == ["h1", "u1"]
    from uad.data import load_volume

    v = load_volume(man_path.parent / man["cases"][1]["volume"])
    # 10 slices at 3 mm become 30 at 1 mm on a corner-aligned grid: output z samples input z * 9 / 29
    kept = [z for z in range(30) if 2 <= round(z * 9 / 29) <= 8]
    assert v.shape == (96, 96, len(kept))
    assert man["cases"][1]["bbox"]["z_range"] == [kept[0], kept[-1]]
    assert v.spacing == (0.5, 0.5, 1.0)


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  learning_rate: -1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["train", "--out", str(tmp_path / "none")]) == 3
    bad = tmp_path / "b.yaml"
    bad.write_text("unknown_section: {}\n")
    assert main(["show-config", "--config", str(bad)]) == 2
    assert main(["show-config", "--seed", "9"]) == 0
    assert "seed: 9" in capsys.readouterr().out


def test_cli_phantom_and_run(tmp_path):
    import yaml

    cfg = tmp_path / "c.yaml"
    raw = dict(TINY)
    raw["phantom"] = {"n_healthy": 3, "n_disc": 1, "n_diffuse": 1}
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "o"
    assert main(["phantom", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["run", "--stages", "train,infer,evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "evaluate" / "metrics.tsv").is_file()
    assert main(["synth-sample", "--config", str(cfg), "--out", str(out)]) == 3
