"""DDPM machinery: schedule, forward corruption, the encoder-decoder denoiser,
pre-training loss and ancestral sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data import FULL_DOSE, ImageBatch
from .errors import ConfigurationError, DomainError, NumericalError, StateError, WiringError
from .layers import ConvBlock, UBlock, Upsample

N_LEVELS = 6


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    def check_t(self, t):
        arr = np.asarray(t)
        if np.any(arr < 0) or np.any(arr >= self.T):
            raise DomainError(f"timestep {t} outside [0, {self.T})")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products ``alpha_bar``."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha), float(beta_start), float(beta_end))


def _per_sample(values: np.ndarray, t, like):
    """Gather schedule entries at ``t`` shaped to broadcast against ``like``."""
    if np.ndim(t) == 0 and not (torch.is_tensor(t) and t.ndim > 0):
        return float(values[int(t)])
    idx = t.cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    v = values[idx.astype(np.int64)]
    shape = (-1,) + (1,) * (like.ndim - 1)
    if torch.is_tensor(like):
        return torch.as_tensor(v, dtype=like.dtype).reshape(shape)
    return v.reshape(shape)


def forward_noise(x0, t, eps, s: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be scalar or per-sample."""
    s.check_t(t)
    if tuple(eps.shape) != tuple(x0.shape):
        raise DomainError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = _per_sample(s.alpha_bar, t, x0)
    if isinstance(ab, float):
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    sqrt = torch.sqrt if torch.is_tensor(ab) else np.sqrt
    return sqrt(ab) * x0 + sqrt(1.0 - ab) * eps


def posterior_variance(s: NoiseSchedule, t: int) -> float:
    ab_prev = s.alpha_bar[t - 1] if t > 0 else 1.0
    return float((1.0 - ab_prev) / (1.0 - s.alpha_bar[t]) * s.beta[t])


def posterior_step(xt, eps_hat, t: int, z, s: NoiseSchedule):
    """One reverse step with the fixed posterior variance; pass ``z=None`` for no noise."""
    s.check_t(t)
    if tuple(eps_hat.shape) != tuple(xt.shape):
        raise DomainError("eps_hat must match x_t")
    a, b, ab = float(s.alpha[t]), float(s.beta[t]), float(s.alpha_bar[t])
    mean = (xt - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if z is None:
        return mean
    if t <= 1 and bool((z != 0).any()):
        raise DomainError("z must be zero for t <= 1")
    if tuple(z.shape) != tuple(xt.shape):
        raise DomainError("z must match x_t")
    return mean + math.sqrt(posterior_variance(s, t)) * z


def to_model_space(x):
    return 2.0 * x - 1.0


def from_model_space(y):
    return (y + 1.0) * 0.5


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (32, 64, 128, 256, 256, 256)

    def __post_init__(self):
        if len(self.channels) != N_LEVELS:
            raise ConfigurationError(f"need {N_LEVELS} channel widths, got {len(self.channels)}")
        if any(c % 4 for c in self.channels):
            raise ConfigurationError("channel widths must be divisible by 4")

    @classmethod
    def doubling(cls, in_channels=1, base=32, cap=256):
        return cls(in_channels, tuple(min(base * 2**i, cap) for i in range(N_LEVELS)))


class Encoder(nn.Module):
    """Stride-2 stem, six blocks at h/2 ... h/64 joined by stride-2 3x3 convs."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        ch = cfg.channels
        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(UBlock(c, c) for c in ch)
        self.downs = nn.ModuleList(
            nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(N_LEVELS - 1)
        )

    def forward(self, x, t):
        skips = []
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h, t)
            skips.append(h)
            if i < N_LEVELS - 1:
                h = self.downs[i](h)
        return skips


class Decoder(nn.Module):
    """Decoder block j consumes ``concat(previous, skip_(7-j) + control_(7-j))``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        ch = cfg.channels
        levels = list(range(N_LEVELS - 1, -1, -1))
        self.blocks = nn.ModuleList(UBlock(2 * ch[k], ch[k]) for k in levels)
        self.ups = nn.ModuleList(Upsample(ch[k], ch[max(k - 1, 0)]) for k in levels)
        # the stem is strided, so the head also sees x_t at full resolution
        self.head = nn.Sequential(
            ConvBlock(ch[0] + cfg.in_channels, ch[0]),
            nn.Conv2d(ch[0], cfg.in_channels, 3, padding=1),
        )

    def forward(self, skips, t, control=None, xt=None):
        h = skips[-1]
        for j, block in enumerate(self.blocks):
            k = N_LEVELS - 1 - j
            skip = skips[k] if control is None else skips[k] + control[k]
            h = self.ups[j](block(torch.cat([h, skip], dim=1), t))
        return self.head(torch.cat([h, xt], dim=1))


class Denoiser(nn.Module):
    """Noise predictor ``U = (U_E, U_D)``."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    def control_shapes(self, h, w):
        return [(c, h // 2 ** (i + 1), w // 2 ** (i + 1)) for i, c in enumerate(self.cfg.channels)]

    def check_control(self, x, control):
        if len(control) != N_LEVELS:
            raise WiringError(f"control must hold {N_LEVELS} maps, got {len(control)}")
        for i, (m, want) in enumerate(zip(control, self.control_shapes(*x.shape[-2:]))):
            if tuple(m.shape[1:]) != want or m.shape[0] not in (1, x.shape[0]):
                raise WiringError(
                    f"control map {i + 1} has shape {tuple(m.shape)}, decoder block "
                    f"{N_LEVELS - i} expects (B, {want[0]}, {want[1]}, {want[2]})"
                )

    def forward(self, xt, t, control: Sequence[torch.Tensor] | None = None):
        step = 2**N_LEVELS
        if xt.shape[-1] % step or xt.shape[-2] % step:
            raise WiringError(f"spatial dims must be divisible by {step}, got {tuple(xt.shape[-2:])}")
        t = torch.as_tensor(t).reshape(-1)
        if control is not None:
            self.check_control(xt, control)
        return self.decoder(self.encoder(xt, t), t, control, xt)


def denoiser_forward(xt, t, model: Denoiser, control=None):
    return model(xt, t, control)


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def set_frozen(module: nn.Module, frozen: bool = True) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(not frozen)
        if frozen:
            p.grad = None
    return module


def noise_loss(eps_hat, eps):
    """Mean squared noise-prediction error."""
    return F.mse_loss(eps_hat, eps)


def _batch_tensor(batch, like: nn.Module):
    px = batch.pixels if isinstance(batch, ImageBatch) else batch
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(px), dtype=dtype)


def pretrain_step(batch: ImageBatch, model: Denoiser, s: NoiseSchedule, gen: torch.Generator,
                  optimizer: torch.optim.Optimizer | None = None, t=None, eps=None) -> float:
    """Sample ``t`` and ``eps``, regress the noise, backpropagate, optionally step.

    ``t``/``eps`` may be given explicitly; otherwise they are drawn from ``gen``.
    """
    if isinstance(batch, ImageBatch) and batch.role != FULL_DOSE:
        raise StateError("pre-training consumes full-dose batches only")
    if is_frozen(model):
        raise StateError("denoiser weights are frozen")
    x0 = to_model_space(_batch_tensor(batch, model))
    B = x0.shape[0]
    if t is None:
        t = torch.randint(0, s.T, (B,), generator=gen)
    if eps is None:
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    xt = forward_noise(x0, t, eps, s)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    loss = noise_loss(model(xt, t), eps)
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return float(loss.detach())


ControlFn = Callable[[torch.Tensor, int], Sequence[torch.Tensor]]


def clip_eps(xt, eps_hat, t: int, s: NoiseSchedule, bound: float = 1.0):
    """Noise estimate consistent with the implied ``x0`` clamped to ``[-bound, bound]``."""
    ab = float(s.alpha_bar[t])
    x0 = ((xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)).clamp(-bound, bound)
    return (xt - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


@torch.no_grad()
def sample_model_space(shape, model: Denoiser, s: NoiseSchedule, seed: int,
                       control_fn: ControlFn | None = None, clip_x0: bool = True) -> torch.Tensor:
    """Ancestral sampling from N(0, I); returns the final state in model space.

    With ``clip_x0`` the implied clean image is clamped to the data range before each step,
    which keeps short chains from amplifying early noise-estimate errors.
    """
    gen = torch.Generator().manual_seed(int(seed))
    dtype = next(model.parameters()).dtype
    x = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    for t in range(s.T - 1, -1, -1):
        control = control_fn(x, t) if control_fn is not None else None
        eps_hat = model(x, t, control)
        if clip_x0:
            eps_hat = clip_eps(x, eps_hat, t, s)
        z = torch.randn(x.shape, generator=gen, dtype=dtype) if t > 1 else None
        x = posterior_step(x, eps_hat, t, z, s)
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite sampler state", timestep=t)
    return x


def sample(shape, model: Denoiser, s: NoiseSchedule, seed: int,
           control_fn: ControlFn | None = None, clip_x0: bool = True) -> ImageBatch:
    x = sample_model_space(shape, model, s, seed, control_fn, clip_x0)
    px = from_model_space(x).clamp(0.0, 1.0).to(torch.float32).numpy()
    return ImageBatch(px, role=FULL_DOSE)
