"""Toy-scale unconditional DDPM for healthy slices and the SSIM memorization gate."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .data import Slice2D
from .errors import CheckpointError, ShapeError, TrainingError, ValidationError

logger = logging.getLogger(__name__)

MEMORIZATION_THRESHOLD = 0.35


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError(f"ssim window must be odd and >= 3, got {self.window}")
        if min(self.window_sigma, self.k1, self.k2, self.dynamic_range) <= 0:
            raise ValidationError("ssim sigma, k1, k2 and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps."""
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _pixels(a) -> np.ndarray:
    return np.asarray(a.pixels if isinstance(a, Slice2D) else a, dtype=np.float64)


def _blur(stack: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # mirror = reflect about the edge pixel without repeating it
    out = ndimage.correlate1d(stack, taps, axis=-2, mode="mirror")
    return ndimage.correlate1d(out, taps, axis=-1, mode="mirror")


def ssim_components(a, b, cfg: SsimConfig = SsimConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel luminance term and contrast-structure term; their product is the SSIM map."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    if min(x.shape[-2:]) <= cfg.window // 2:
        raise ShapeError(f"images of shape {x.shape} too small for window {cfg.window}")
    g = gaussian_window(cfg.window, cfg.window_sigma)
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    c1, c2 = cfg.c1, cfg.c2
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    lum, cs = ssim_components(a, b, cfg)
    return lum * cs


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean Gaussian-windowed SSIM of two 2D images (mirror-padded borders)."""
    return float(ssim_map(a, b, cfg).mean())


def max_ssim_against(sample, reals: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """SSIM of one image against every image of a ``(n, h, w)`` stack."""
    x = _pixels(sample)
    r = np.asarray(reals, dtype=np.float64)
    if r.shape[1:] != x.shape:
        raise ShapeError(f"sample shape {x.shape} differs from real shape {r.shape[1:]}")
    g = gaussian_window(cfg.window, cfg.window_sigma)
    mx = _blur(x, g)
    sxx = _blur(x * x, g) - mx * mx
    my = _blur(r, g)
    syy = _blur(r * r, g) - my * my
    sxy = _blur(r * x[None], g) - my * mx[None]
    c1, c2 = cfg.c1, cfg.c2
    m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return m.mean(axis=(1, 2))


@dataclass
class FilterRecord:
    sample_id: str
    max_ssim: float
    nearest_real_id: str
    kept: bool


def memorization_filter(samples, real, threshold: float = MEMORIZATION_THRESHOLD, cfg: SsimConfig = SsimConfig()):
    """Split ``samples`` into kept and rejected by max SSIM against ``real``.

    A sample is rejected only when its best match exceeds ``threshold``
    strictly. Returns ``(kept, rejected, report)``.
    """
    samples, real = list(samples), list(real)
    if not samples or not real:
        raise ValidationError("memorization_filter needs nonempty sample and real sets")
    real_stack = np.stack([_pixels(r) for r in real])
    real_ids = [_slice_id(r, i, "real") for i, r in enumerate(real)]
    kept, rejected, report = [], [], []
    for i, s in enumerate(samples):
        scores = max_ssim_against(s, real_stack, cfg)
        j = int(np.argmax(scores))
        best = float(scores[j])
        keep = not best > threshold
        (kept if keep else rejected).append(s)
        report.append(FilterRecord(_slice_id(s, i, "sample"), best, real_ids[j], keep))
    return kept, rejected, report


def _slice_id(s, i: int, prefix: str) -> str:
    if isinstance(s, Slice2D) and s.source[0]:
        return f"{s.source[0]}:{s.source[1]}"
    return f"{prefix}_{i:05d}"


# ---------------------------------------------------------------------------
# Diffusion schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.T < 1:
            raise ValidationError("diffusion T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValidationError("need 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        """``betas[t-1]`` is the variance of step ``t`` for t in 1..T."""
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative products indexed by t in 0..T, with ``alpha_bar[0] == 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


def q_sample(x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; t == 0 returns x0."""
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype, device=x0.device)[t]
    ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    out = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
    t0 = (t == 0).view(-1, *([1] * (x0.dim() - 1)))
    return torch.where(t0, x0, out)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class _TimeResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    time_dim: int = 64

    def __post_init__(self):
        if not self.widths or min(self.widths) < 1:
            raise ValidationError("denoiser widths must be positive")


class Denoiser(nn.Module):
    """Small U-Net predicting the injected noise from ``(x_t, t)``."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        for i, c in enumerate(w):
            self.down.append(_TimeResBlock(c if i == 0 else w[i - 1], c, cfg.time_dim))
            self.pool.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(w) - 1 else nn.Identity())
        self.mid = _TimeResBlock(w[-1], w[-1], cfg.time_dim)
        self.up = nn.ModuleList()
        for i in reversed(range(len(w))):
            cin = w[-1] if i == len(w) - 1 else w[i + 1]
            self.up.append(_TimeResBlock(cin + w[i], w[i], cfg.time_dim))
        self.out = nn.Sequential(nn.GroupNorm(_groups(w[0]), w[0]), nn.SiLU(), nn.Conv2d(w[0], 1, 3, padding=1))

    def forward(self, x, t):
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h = self.stem(x)
        skips = []
        for block, pool in zip(self.down, self.pool):
            h = block(h, temb)
            skips.append(h)
            h = pool(h)
        h = self.mid(h, temb)
        for block in self.up:
            s = skips.pop()
            if h.shape[-2:] != s.shape[-2:]:
                h = F.interpolate(h, size=s.shape[-2:], mode="nearest")
            h = block(torch.cat([h, s], dim=1), temb)
        return self.out(h)


@dataclass
class DiffusionModelParams:
    denoiser: DenoiserConfig
    schedule: DiffusionSchedule
    state_dict: dict
    history: dict = field(default_factory=dict)

    def build(self) -> Denoiser:
        net = Denoiser(self.denoiser)
        net.load_state_dict(self.state_dict)
        net.eval()
        return net

    def save(self, path) -> None:
        torch.save(
            {"kind": "ddpm", "format_version": 1, "denoiser": asdict(self.denoiser),
             "schedule": asdict(self.schedule), "state_dict": self.state_dict, "history": self.history},
            path,
        )

    @classmethod
    def load(cls, path) -> "DiffusionModelParams":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"{path}: unreadable diffusion checkpoint ({exc})") from exc
        if blob.get("kind") != "ddpm":
            raise CheckpointError(f"{path}: not a diffusion checkpoint")
        den = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in blob["denoiser"].items()})
        return cls(den, DiffusionSchedule(**blob["schedule"]), blob["state_dict"], blob.get("history", {}))


def _as_stack(slices) -> np.ndarray:
    if isinstance(slices, np.ndarray):
        arr = slices
    else:
        arr = np.stack([_pixels(s) for s in slices]) if len(slices) else np.zeros((0, 0, 0))
    return np.asarray(arr, dtype=np.float32)


def noise_prediction_loss(net: nn.Module, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                          schedule: DiffusionSchedule) -> torch.Tensor:
    xt = q_sample(x0, t, noise, schedule)
    return F.mse_loss(net(xt, t), noise)


def ddpm_train(
    slices,
    schedule: DiffusionSchedule = DiffusionSchedule(T=50),
    steps: int = 200,
    seed: int = 0,
    batch_size: int = 8,
    lr: float = 2e-3,
    denoiser: DenoiserConfig = DenoiserConfig(),
    val_size: int = 16,
) -> DiffusionModelParams:
    """Fit the denoiser with the noise-prediction objective.

    Validation loss is measured on a fixed batch (fixed timesteps and noise)
    before and after training and reported in ``history``.
    """
    data = _as_stack(slices)
    if data.shape[0] == 0:
        raise ValidationError("ddpm_train needs at least one slice")
    if data.min() < 0 or data.max() > 1:
        raise ValidationError("ddpm_train expects pixels in [0, 1]")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = Denoiser(denoiser)
    opt = torch.optim.AdamW(net.parameters(), lr=lr)
    x_all = torch.from_numpy(data)[:, None] * 2.0 - 1.0
    n = x_all.shape[0]

    vi = torch.randperm(n, generator=gen)[: min(val_size, n)]
    v_x = x_all[vi]
    v_t = torch.randint(1, schedule.T + 1, (len(vi),), generator=gen)
    v_eps = torch.randn(v_x.shape, generator=gen)

    def val_loss():
        net.eval()
        with torch.no_grad():
            out = float(noise_prediction_loss(net, v_x, v_t, v_eps, schedule))
        net.train()
        return out

    initial = val_loss()
    losses = []
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        x0 = x_all[idx]
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = noise_prediction_loss(net, x0, t, eps, schedule)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite diffusion loss at step {step}: {float(loss.detach())}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    final = val_loss()
    logger.info("ddpm: val loss %.4f -> %.4f over %d steps", initial, final, steps)
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return DiffusionModelParams(denoiser, schedule, state,
                                {"initial_val_loss": initial, "final_val_loss": final, "train_loss": losses})


@torch.no_grad()
def ddpm_sample(params: DiffusionModelParams, n: int, seed: int, schedule: DiffusionSchedule | None = None,
                size: int = 96) -> list[Slice2D]:
    """Ancestral sampling; pixels are mapped back to [0, 1] and clipped."""
    if n < 1:
        raise ValidationError("ddpm_sample needs n >= 1")
    schedule = schedule or params.schedule
    net = params.build()
    gen = torch.Generator().manual_seed(seed)
    betas = torch.as_tensor(schedule.betas, dtype=torch.float32)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)
    x = torch.randn((n, 1, size, size), generator=gen)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        eps = net(x, tt)
        beta, a_bar, a_bar_prev = betas[t - 1], ab[t], ab[t - 1]
        mean = (x - beta / (1.0 - a_bar).sqrt() * eps) / (1.0 - beta).sqrt()
        if t > 1:
            var = beta * (1.0 - a_bar_prev) / (1.0 - a_bar)
            x = mean + var.sqrt() * torch.randn(x.shape, generator=gen)
        else:
            x = mean
    imgs = ((x[:, 0] + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return [Slice2D(img, (f"synthetic_s{seed}", i), size=size) for i, img in enumerate(imgs)]
