"""Residual variational autoencoder for 2D slices."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, NonFiniteError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ResVaeConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    latent_dim: int = 256
    negative_slope: float = 0.01
    upsample_mode: str = "bilinear"
    input_size: int = 96

    def __post_init__(self):
        ch = tuple(int(c) for c in self.channels)
        object.__setattr__(self, "channels", ch)
        if not ch or any(b <= a for a, b in zip(ch, ch[1:])) or ch[0] < 1:
            raise ValidationError(f"resvae.channels must be positive and strictly increasing, got {ch}")
        if self.latent_dim < 1:
            raise ValidationError("resvae.latent_dim must be >= 1")
        if self.negative_slope < 0:
            raise ValidationError("resvae.negative_slope must be >= 0")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValidationError("resvae.upsample_mode must be 'bilinear' or 'nearest'")
        if self.input_size % (2 ** len(ch)) != 0:
            raise ValidationError(
                f"resvae.input_size {self.input_size} must be divisible by 2**{len(ch)}")

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** len(self.channels)


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


class ResBlock(nn.Module):
    """conv3x3-BN-LReLU-conv3x3-BN plus shortcut, then LReLU.

    ``stride=2`` halves the spatial extent in the first convolution.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1, slope: float = 0.01):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope)
        if cin != cout or stride != 1:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.shortcut(x))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, slope: float, mode: str):
        super().__init__()
        self.mode = mode
        self.block = ResBlock(cin, cout, 1, slope)

    def forward(self, x):
        kw = {"align_corners": False} if self.mode == "bilinear" else {}
        return self.block(F.interpolate(x, scale_factor=2, mode=self.mode, **kw))


class ResVAE(nn.Module):
    def __init__(self, cfg: ResVaeConfig = ResVaeConfig()):
        super().__init__()
        self.cfg = cfg
        ch, s = cfg.channels, cfg.negative_slope
        enc = []
        cin = 1
        for c in ch:
            enc.append(ResBlock(cin, c, stride=2, slope=s))
            cin = c
        self.encoder = nn.Sequential(*enc)
        self.fc_mu = nn.Linear(ch[-1], cfg.latent_dim)
        self.fc_logvar = nn.Linear(ch[-1], cfg.latent_dim)

        b = cfg.bottleneck_size
        self.fc_dec = nn.Linear(cfg.latent_dim, ch[-1] * b * b)
        outs = list(reversed(ch[:-1])) + [ch[0]]
        dec = []
        cin = ch[-1]
        for c in outs:
            dec.append(UpBlock(cin, c, s, cfg.upsample_mode))
            cin = c
        self.decoder = nn.Sequential(*dec)
        self.head = nn.Conv2d(ch[0], 1, 3, padding=1)

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        n = self.cfg.input_size
        if x.shape[-2:] != (n, n) or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, {n}, {n}) input, got {tuple(x.shape)}")
        return x

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        x = self._check_input(x)
        h = x
        for i, block in enumerate(self.encoder):
            h = block(h)
            if not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite activations after encoder block {i}")
        h = h.mean(dim=(2, 3))
        mu, logvar = self.fc_mu(h), self.fc_logvar(h)
        if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
            raise NonFiniteError("non-finite latent parameters")
        return LatentDistribution(mu, logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z[None]
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"latent must have length {self.cfg.latent_dim}, got {z.shape[-1]}")
        b = self.cfg.bottleneck_size
        h = self.fc_dec(z).view(z.shape[0], self.cfg.channels[-1], b, b)
        h = self.decoder(h)
        out = torch.sigmoid(self.head(h))
        if not torch.isfinite(out).all():
            raise NonFiniteError("non-finite decoder output")
        return out

    def forward(self, x: torch.Tensor, eps: torch.Tensor | None = None):
        """Returns ``(reconstruction, LatentDistribution)``.

        In evaluation mode ``eps`` defaults to zero (mean decoding); in
        training mode it is drawn from the global torch RNG when omitted.
        """
        d = self.encode(x)
        if eps is None:
            eps = torch.randn_like(d.mu) if self.training else torch.zeros_like(d.mu)
        return self.decode(reparameterize(d, eps)), d


def reparameterize(d: LatentDistribution, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape[-1] != d.mu.shape[-1]:
        raise ShapeError(f"eps length {eps.shape[-1]} != latent_dim {d.mu.shape[-1]}")
    return d.mu + d.sigma * eps


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    pixels = getattr(x, "pixels", x)
    return torch.from_numpy(np.array(pixels, dtype=np.float32))


@torch.no_grad()
def reconstruct(model: ResVAE, slices, batch_size: int = 64) -> np.ndarray:
    """Mean-decoded reconstructions of a ``(n, h, w)`` stack, in eval mode."""
    was_training = model.training
    model.eval()
    x = _tensor(slices)
    if x.dim() == 2:
        x = x[None]
    outs = []
    for i in range(0, x.shape[0], batch_size):
        r, _ = model(x[i:i + batch_size])
        outs.append(r[:, 0])
    model.train(was_training)
    return torch.cat(outs).numpy()


def state_digest(model: nn.Module) -> str:
    """Stable content hash of the parameters and buffers."""
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: ResVAE, path, meta: dict | None = None) -> str:
    cid = state_digest(model)
    torch.save(
        {"kind": "resvae", "format_version": CHECKPOINT_FORMAT, "config": asdict(model.cfg),
         "state_dict": model.state_dict(), "checkpoint_id": cid, "meta": meta or {}},
        path,
    )
    return cid


def load_checkpoint(path, expected: ResVaeConfig | None = None) -> tuple[ResVAE, dict]:
    """Load a model in eval mode; a config differing from ``expected`` is rejected."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("kind") != "resvae":
        raise CheckpointError(f"{path}: not a ResVAE checkpoint")
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format_version')}")
    raw = dict(blob["config"])
    raw["channels"] = tuple(raw["channels"])
    cfg = ResVaeConfig(**raw)
    if expected is not None and cfg != expected:
        diff = {k: (getattr(cfg, k), getattr(expected, k)) for k in asdict(cfg) if getattr(cfg, k) != getattr(expected, k)}
        raise CheckpointError(f"{path}: checkpoint config mismatch (stored, expected): {diff}")
    model = ResVAE(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, {"checkpoint_id": blob.get("checkpoint_id", state_digest(model)), **blob.get("meta", {})}
