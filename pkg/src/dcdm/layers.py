"""Building blocks shared by the denoiser, the NTC and the ENC."""
import math

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError


class FFN(nn.Module):
    """``SiLU(Y W1 + b1) W2 + b2`` with the hidden width compressed to ``in_dim / 4``."""

    def __init__(self, in_dim: int, out_dim: int | None = None):
        super().__init__()
        if in_dim % 4:
            raise ConfigurationError(f"FFN input dim must be divisible by 4, got {in_dim}")
        self.hidden = in_dim // 4
        self.fc1 = nn.Linear(in_dim, self.hidden)
        self.fc2 = nn.Linear(self.hidden, out_dim or in_dim)

    def forward(self, y):
        return self.fc2(F.silu(self.fc1(y)))


class ZeroLinear(nn.Linear):
    def __init__(self, in_dim, out_dim):
        super().__init__(in_dim, out_dim)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ZeroConv(nn.Conv2d):
    """1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, channels):
        super().__init__(channels, channels, kernel_size=1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


def norm_groups(channels: int) -> int:
    return 8 if channels >= 32 and channels % 8 == 0 else 1


class ConvBlock(nn.Sequential):
    """3x3 conv, GroupNorm, SiLU."""

    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(norm_groups(cout), cout),
            nn.SiLU(),
        )


def timestep_embedding(t, dim: int, dtype=torch.float32):
    """Sinusoidal embedding of integer timesteps, shape ``(B, dim)``."""
    t = torch.as_tensor(t).reshape(-1).to(dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class UBlock(nn.Module):
    """Encoder/decoder block: ConvBlock2(ConvBlock1(x) + FFN(emb(t)))."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = ConvBlock(cin, cout)
        self.conv2 = ConvBlock(cout, cout)
        self.time_ffn = FFN(cout)

    def forward(self, x, t):
        emb = timestep_embedding(t, self.conv2[0].out_channels, x.dtype)
        emb = emb.expand(x.shape[0], -1) if emb.shape[0] == 1 else emb
        return self.conv2(self.conv1(x) + self.time_ffn(emb)[:, :, None, None])


class Upsample(nn.Module):
    """Nearest-neighbour x2 followed by a 3x3 conv."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
