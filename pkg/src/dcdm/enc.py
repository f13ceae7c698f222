"""Encoding Nexus Constraint: a trainable copy of the denoiser encoder, modulated
by pooled NTC tokens and the timestep, emitting six zero-gated control maps."""
from __future__ import annotations

import copy
from typing import NamedTuple

import torch
from torch import nn

from .diffusion import N_LEVELS, Denoiser
from .errors import StateError, WiringError
from .layers import FFN, ConvBlock, ZeroConv, ZeroLinear, timestep_embedding


class ControlSignal(NamedTuple):
    """Six maps; map ``i`` (1-based) has spatial size ``input / 2**i``."""

    maps: tuple

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]

    def __iter__(self):
        return iter(self.maps)


class ENBlock(nn.Module):
    def __init__(self, conv1: ConvBlock, conv2: ConvBlock):
        super().__init__()
        self.conv1 = conv1
        self.conv2 = conv2

    @property
    def channels(self) -> int:
        return self.conv2[0].out_channels


def en_block_forward(F_prev, fstar, block: ENBlock):
    """``ConvBlock2(ConvBlock1(F_prev) + F*)`` with ``F*`` of shape ``(B, C)`` added channel-wise."""
    h = block.conv1(F_prev)
    if fstar.ndim != 2 or fstar.shape[1] != h.shape[1]:
        raise WiringError(f"modulation has shape {tuple(fstar.shape)}, block expects (B, {h.shape[1]})")
    return block.conv2(h + fstar[:, :, None, None])


class EncWeights(nn.Module):
    """Trainable controller parameters.

    ``stem``, ``blocks`` and ``downs`` mirror the denoiser encoder; the modulation
    path and the ZeroConvs are new.
    """

    def __init__(self, encoder, z_dim: int):
        super().__init__()
        channels = [b.conv2[0].out_channels for b in encoder.blocks]
        self.z_dim = z_dim
        self.stem = copy.deepcopy(encoder.stem)
        self.blocks = nn.ModuleList(
            ENBlock(copy.deepcopy(b.conv1), copy.deepcopy(b.conv2)) for b in encoder.blocks
        )
        self.downs = copy.deepcopy(encoder.downs)
        self.z_ffn = FFN(z_dim)
        self.zero_linear = ZeroLinear(z_dim, z_dim)
        self.t_ffn = FFN(z_dim)
        self.mod_linear = nn.Linear(z_dim, z_dim)
        self.projections = nn.ModuleList(nn.Linear(z_dim, c) for c in channels)
        self.zero_convs = nn.ModuleList(ZeroConv(c) for c in channels)

    @property
    def channels(self):
        return [b.channels for b in self.blocks]


def init_enc_from_encoder(denoiser: Denoiser, z_dim: int) -> EncWeights:
    """Deep-copy the encoder conv stacks into a fresh controller."""
    enc = getattr(denoiser, "encoder", None)
    if enc is None or len(getattr(enc, "blocks", [])) != N_LEVELS or len(enc.downs) != N_LEVELS - 1:
        raise StateError("source encoder is incomplete")
    w = EncWeights(enc, z_dim)
    dtype = next(denoiser.parameters()).dtype
    w.to(dtype)
    for p in w.parameters():
        p.requires_grad_(True)
    return w


def modulation_feature(z_pooled, t, w: EncWeights) -> torch.Tensor:
    """``Linear(ZeroLinear(FFN(z)) + FFN(emb(t)))``, shape ``(B, z_dim)``."""
    z_pooled = torch.as_tensor(z_pooled, dtype=w.mod_linear.weight.dtype)
    if z_pooled.ndim == 1:
        z_pooled = z_pooled[None]
    emb = timestep_embedding(t, w.z_dim, z_pooled.dtype)
    if emb.shape[0] == 1 and z_pooled.shape[0] > 1:
        emb = emb.expand(z_pooled.shape[0], -1)
    return w.mod_linear(w.zero_linear(w.z_ffn(z_pooled)) + w.t_ffn(emb))


def enc_forward(x, z_pooled, t, w: EncWeights) -> ControlSignal:
    """Control maps for the decoder; every map is exactly zero at initialization."""
    step = 2**N_LEVELS
    if x.ndim != 4 or x.shape[-1] % step or x.shape[-2] % step:
        raise WiringError(f"ENC input must be (B, c, h, w) with h, w divisible by {step}")
    if x.shape[1] != w.stem.in_channels:
        raise WiringError(f"ENC stem expects {w.stem.in_channels} channels, got {x.shape[1]}")
    fstar = modulation_feature(z_pooled, t, w)
    h = w.stem(x)
    maps = []
    for i, block in enumerate(w.blocks):
        h = en_block_forward(h, w.projections[i](fstar), block)
        maps.append(w.zero_convs[i](h))
        if i < N_LEVELS - 1:
            h = w.downs[i](h)
    return ControlSignal(tuple(maps))
