"""Composite VAE objective, KL annealing and the AdamW training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import make_batches
from .errors import ShapeError, TrainingError, ValidationError
from .resvae import LatentDistribution, ResBlock, ResVAE
from .synthgen import SsimConfig, gaussian_window

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    w_ssim: float = 0.5
    w_perc: float = 0.3
    beta_start: float = 1e-5
    beta_end: float = 1e-4
    anneal_epochs: int = 100
    perc_stage_weights: tuple[float, float] = (0.3, 0.15)

    def __post_init__(self):
        vals = [self.w_ssim, self.w_perc, self.beta_start, self.beta_end, self.anneal_epochs, *self.perc_stage_weights]
        if any(v < 0 for v in vals):
            raise ValidationError("loss weights must be nonnegative")
        if self.beta_start > self.beta_end:
            raise ValidationError("loss.beta_start must not exceed loss.beta_end")
        if len(self.perc_stage_weights) != 2:
            raise ValidationError("loss.perc_stage_weights needs exactly two entries")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    patience: int = 15
    grad_clip_norm: float = 1.0
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 1e-2

    def __post_init__(self):
        for name in ("epochs", "learning_rate", "patience", "grad_clip_norm", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValidationError("train.weight_decay must be >= 0")


def beta_schedule(epoch: int, w: LossWeights = LossWeights()) -> float:
    """Linear KL weight ramp from ``beta_start`` (epoch 0) to ``beta_end`` (``anneal_epochs``)."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if w.anneal_epochs == 0 or epoch >= w.anneal_epochs:
        return w.beta_end
    return w.beta_start + (w.beta_end - w.beta_start) * epoch / w.anneal_epochs


def kl_divergence(d: LatentDistribution) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch."""
    mu, logvar = d.mu, d.logvar
    if mu.dim() == 1:
        mu, logvar = mu[None], logvar[None]
    kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)
    return kl.mean()


def _as4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def ssim_torch(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Differentiable mean SSIM with reflect-padded Gaussian windows."""
    x, y = _as4d(x), _as4d(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    pad = cfg.window // 2
    g = torch.as_tensor(gaussian_window(cfg.window, cfg.window_sigma), dtype=x.dtype, device=x.device)
    c = x.shape[1]
    kh = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    kw = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)

    def blur(a):
        a = F.pad(a, (pad, pad, pad, pad), mode="reflect")
        return F.conv2d(F.conv2d(a, kh, groups=c), kw, groups=c)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1, c2 = cfg.c1, cfg.c2
    m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return m.mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    return 1.0 - ssim_torch(x, y, cfg)


# ---------------------------------------------------------------------------
# Perceptual feature extractors
# ---------------------------------------------------------------------------

class IdentityExtractor(nn.Module):
    """Both stages return the input; makes the perceptual term a weighted MSE."""

    in_channels = 1

    def forward(self, x):
        return x, x


class RandomResNetExtractor(nn.Module):
    """Frozen, seeded, randomly initialized two-stage residual feature extractor."""

    in_channels = 3

    def __init__(self, seed: int = 0, width: int = 8):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = nn.Sequential(nn.Conv2d(3, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
            self.stage1 = ResBlock(width, width, 1, 0.0)
            self.stage2 = ResBlock(width, 2 * width, 2, 0.0)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        f1 = self.stage1(self.stem(x))
        return f1, self.stage2(f1)


class ResNet50Extractor(nn.Module):
    """torchvision ResNet-50 features after ``layer1`` and ``layer2``.

    Weights come from a local state-dict file (e.g. a radiology-pretrained
    checkpoint); keys with a ``module.`` or ``backbone.`` prefix are accepted.
    """

    in_channels = 3

    def __init__(self, weights_path):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=False)
        state = state.get("state_dict", state)
        state = {k.removeprefix("module.").removeprefix("backbone."): v for k, v in state.items()}
        missing, _ = net.load_state_dict(state, strict=False)
        if any(k.startswith(("conv1", "layer1", "layer2")) for k in missing):
            raise ValidationError(f"{weights_path}: weights lack early ResNet-50 stages")
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        f1 = self.layer1(self.stem(x))
        return f1, self.layer2(f1)


def perceptual_loss(x: torch.Tensor, y: torch.Tensor, extractor: Callable,
                    stage_weights: Sequence[float] = (0.3, 0.15)) -> torch.Tensor:
    x, y = _as4d(x), _as4d(y)
    if x.shape != y.shape:
        raise ShapeError(f"perceptual inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    arity = getattr(extractor, "in_channels", 1)
    if arity != x.shape[1]:
        x, y = x.expand(-1, arity, -1, -1), y.expand(-1, arity, -1, -1)
    fx, fy = extractor(x), extractor(y)
    if len(fx) < len(stage_weights):
        raise ValidationError(f"extractor returned {len(fx)} feature maps, need {len(stage_weights)}")
    total = x.new_zeros(())
    for wgt, a, b in zip(stage_weights, fx, fy):
        total = total + wgt * F.mse_loss(a, b)
    return total


def total_loss(x, recon, d: LatentDistribution, epoch: int, w: LossWeights = LossWeights(),
               ssim_cfg: SsimConfig = SsimConfig(), extractor: Callable | None = None):
    """Composite objective and a per-term breakdown.

    total = MSE + w_ssim * (1 - SSIM) + beta(epoch) * KL + w_perc * perceptual
    """
    x, recon = _as4d(x), _as4d(recon)
    extractor = extractor if extractor is not None else IdentityExtractor()
    beta = beta_schedule(epoch, w)
    terms = {
        "mse": F.mse_loss(recon, x),
        "ssim": ssim_loss(x, recon, ssim_cfg),
        "kl": kl_divergence(d),
        "perceptual": perceptual_loss(x, recon, extractor, w.perc_stage_weights),
    }
    coeffs = {"mse": 1.0, "ssim": w.w_ssim, "kl": beta, "perceptual": w.w_perc}
    weighted = {k: coeffs[k] * v for k, v in terms.items()}
    total = sum(weighted.values())
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss: { {k: float(v.detach()) for k, v in terms.items()} }")
    breakdown = {
        "terms": {k: float(v.detach()) for k, v in terms.items()},
        "weighted": {k: float(v.detach()) for k, v in weighted.items()},
        "coefficients": coeffs,
        "beta": beta,
        "total": float(total.detach()),
    }
    return total, breakdown


def clip_gradients(parameters, max_norm: float) -> float:
    """Scale gradients to global L2 norm ``max_norm``; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    stop_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)
    stopped_early: bool = False


def _evaluate(model, data, w, epoch, ssim_cfg, extractor, batch_size):
    model.eval()
    acc: dict[str, float] = {}
    n = 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            x = torch.from_numpy(data[i:i + batch_size])[:, None]
            recon, d = model(x)
            _, br = total_loss(x, recon, d, epoch, w, ssim_cfg, extractor)
            k = x.shape[0]
            acc["total"] = acc.get("total", 0.0) + br["total"] * k
            for key, v in br["terms"].items():
                acc[key] = acc.get(key, 0.0) + v * k
            n += k
    return {k: v / n for k, v in acc.items()}


def train(
    model: ResVAE,
    train_data: np.ndarray,
    val_data: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    w: LossWeights = LossWeights(),
    ssim_cfg: SsimConfig = SsimConfig(),
    extractor: Callable | None = None,
    log_path=None,
) -> TrainResult:
    """Train with AdamW, per-step gradient clipping, and early stopping on validation loss.

    ``train_data`` and ``val_data`` are ``(n, h, w)`` float arrays in [0, 1].
    The model is left holding the best-validation weights.
    """
    train_data = np.ascontiguousarray(train_data, dtype=np.float32)
    val_data = np.ascontiguousarray(val_data, dtype=np.float32)
    if len(train_data) == 0 or len(val_data) == 0:
        raise TrainingError("training needs nonempty train and validation sets")
    extractor = extractor if extractor is not None else RandomResNetExtractor(cfg.seed)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    log = open(log_path, "w") if log_path else None
    history = []
    best_val, best_epoch, best_state = math.inf, -1, None
    since_best = 0
    epoch = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            sums: dict[str, float] = {}
            norms = []
            seen = 0
            for idx in make_batches(len(train_data), cfg.batch_size, seed=cfg.seed * 100_003 + epoch):
                x = torch.from_numpy(train_data[idx])[:, None]
                eps = torch.randn((x.shape[0], model.cfg.latent_dim), generator=gen)
                recon, d = model(x, eps)
                loss, br = total_loss(x, recon, d, epoch, w, ssim_cfg, extractor)
                opt.zero_grad()
                loss.backward()
                norms.append(clip_gradients(model.parameters(), cfg.grad_clip_norm))
                opt.step()
                k = x.shape[0]
                seen += k
                sums["total"] = sums.get("total", 0.0) + br["total"] * k
                for key, v in br["terms"].items():
                    sums[key] = sums.get(key, 0.0) + v * k
            train_stats = {k: v / seen for k, v in sums.items()}
            val_stats = _evaluate(model, val_data, w, epoch, ssim_cfg, extractor, cfg.batch_size)
            improved = val_stats["total"] < best_val
            if improved:
                best_val, best_epoch = val_stats["total"], epoch
                best_state = copy.deepcopy(model.state_dict())
                since_best = 0
            else:
                since_best += 1
            rec = {
                "epoch": epoch,
                "beta": beta_schedule(epoch, w),
                "train": train_stats,
                "val": val_stats,
                "grad_norm": {"mean": float(np.mean(norms)), "max": float(np.max(norms))},
                "best_val": best_val,
                "best_epoch": best_epoch,
            }
            history.append(rec)
            if log:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
            logger.info("epoch %d train %.5f val %.5f best %.5f@%d", epoch, train_stats["total"],
                        val_stats["total"], best_val, best_epoch)
            if since_best >= cfg.patience:
                break
    finally:
        if log:
            log.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_state, best_epoch, epoch, best_val, history, stopped_early=since_best >= cfg.patience)
