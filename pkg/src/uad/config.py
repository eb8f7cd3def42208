"""Run configuration: one YAML file mirroring every module's config record."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml

from .dataset import AugmentationPolicy
from .errors import ValidationError
from .postprocess import PostprocessConfig
from .preprocess import PreprocessConfig
from .resvae import ResVaeConfig
from .synthgen import MEMORIZATION_THRESHOLD, DenoiserConfig, DiffusionSchedule, SsimConfig
from .training import LossWeights, TrainConfig


@dataclass(frozen=True)
class PathsConfig:
    cases: str | None = None       # input case manifest for the preprocess stage
    out: str = "uad_out"
    checkpoint: str | None = None  # prebuilt ResVAE checkpoint; default <out>/train/checkpoint.pt


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("split.train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class SynthConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 2e-3
    widths: tuple[int, ...] = (8, 16, 32)
    n_samples: int = 16
    threshold: float = MEMORIZATION_THRESHOLD
    use_in_training: bool = True

    def __post_init__(self):
        DiffusionSchedule(self.T, self.beta_start, self.beta_end)
        DenoiserConfig(tuple(self.widths))
        for name in ("steps", "batch_size", "learning_rate", "n_samples"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"synth.{name} must be positive")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValidationError("synth.threshold must lie in [-1, 1]")

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class PerceptualConfig:
    extractor: str = "random"   # random | resnet50 | identity
    weights_path: str | None = None
    width: int = 8

    def __post_init__(self):
        if self.extractor not in ("random", "resnet50", "identity"):
            raise ValidationError("perceptual.extractor must be random, resnet50 or identity")
        if self.extractor == "resnet50" and not self.weights_path:
            raise ValidationError("perceptual.weights_path is required for the resnet50 extractor")


@dataclass(frozen=True)
class EvaluateConfig:
    pathology_labels: tuple[str, ...] = (
        "myoma", "nabothian_cyst", "endometrial_cancer", "endometriosis", "adenomyosis")
    experts: tuple[str, ...] = ()
    weighted: bool = False
    plots: bool = True
    overlays: bool = False


@dataclass(frozen=True)
class BenchConfig:
    n_slices: int = 100
    warmup: int = 10

    def __post_init__(self):
        if self.n_slices < 1 or self.warmup < 0:
            raise ValidationError("bench.n_slices must be >= 1 and bench.warmup >= 0")


@dataclass(frozen=True)
class PhantomConfig:
    n_healthy: int = 64
    n_disc: int = 16
    n_diffuse: int = 16
    annotators: tuple[str, ...] = ("phantom",)

    def __post_init__(self):
        if self.n_healthy < 2:
            raise ValidationError("phantom.n_healthy must be >= 2")
        if self.n_disc < 0 or self.n_diffuse < 0:
            raise ValidationError("phantom lesion counts must be >= 0")
        if not self.annotators:
            raise ValidationError("phantom.annotators must be nonempty")


@dataclass(frozen=True)
class TrainSection:
    """Training knobs exposed in the config file (the seed comes from the root seed)."""

    epochs: int = 100
    learning_rate: float = 1e-4
    patience: int = 15
    grad_clip_norm: float = 1.0
    batch_size: int = 32
    weight_decay: float = 1e-2

    def __post_init__(self):
        TrainConfig(self.epochs, self.learning_rate, self.patience, self.grad_clip_norm, self.batch_size, 0,
                    self.weight_decay)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    resvae: ResVaeConfig = field(default_factory=ResVaeConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def stage_seed(self, stage: str) -> int:
        """Deterministic per-stage seed fanned out from the root seed."""
        return int(hashlib.sha256(f"{self.seed}:{stage}".encode()).hexdigest()[:8], 16)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.learning_rate, t.patience, t.grad_clip_norm, t.batch_size,
                           self.stage_seed("train") % (2**31), t.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _coerce(value: Any, tp, key: str):
    origin = get_origin(tp)
    args = get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ValidationError(f"{key}: null is not allowed")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValidationError(f"{key}: expected a mapping")
        return _build(tp, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{key}: expected a list")
        inner = args[0] if args else Any
        return tuple(_coerce(v, inner, f"{key}[{i}]") for i, v in enumerate(value))
    if args and type(None) in args:  # Optional[X] / X | None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key) if len(inner) == 1 else value
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{key}: expected a string, got {value!r}")
    return value


def _build(cls, raw: dict, prefix: str = ""):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ValidationError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}" if prefix else k) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        msg = str(exc)
        if prefix and not msg.startswith(prefix):
            msg = f"{prefix}: {msg}"
        raise ValidationError(msg) from None


def config_from_dict(raw: dict | None) -> RunConfig:
    return _build(RunConfig, raw or {})


def parse_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False)
