"""Double-constraint training, iterative reconstruction and unknown-DRF routing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ImageBatch
from .diffusion import (Denoiser, NoiseSchedule, forward_noise, is_frozen, noise_loss, sample,
                        set_frozen, to_model_space)
from .enc import EncWeights, enc_forward
from .errors import FreezeViolationError, RoutingError, StateError
from .ntc import NTC


def _pixels(x, dtype) -> torch.Tensor:
    px = x.pixels if isinstance(x, ImageBatch) else x
    return torch.as_tensor(np.asarray(px) if not torch.is_tensor(px) else px, dtype=dtype)


def freeze_backbone(denoiser: Denoiser, ntc: NTC) -> None:
    set_frozen(denoiser, True)
    set_frozen(ntc, True)


def _check_frozen_grads(*modules):
    for m in modules:
        for name, p in m.named_parameters():
            if p.grad is not None and bool(p.grad.ne(0).any()):
                raise FreezeViolationError(f"frozen parameter {name} received a gradient")


def dcdm_train_step(x_full, x_low, enc: EncWeights, denoiser: Denoiser, ntc: NTC, s: NoiseSchedule,
                    gen: torch.Generator, optimizer: torch.optim.Optimizer | None = None,
                    t=None, eps=None) -> float:
    """One prior-learning step; only the controller receives gradients."""
    if not (is_frozen(denoiser) and is_frozen(ntc)):
        raise StateError("denoiser and NTC must be frozen before controller training")
    dtype = next(denoiser.parameters()).dtype
    x0 = to_model_space(_pixels(x_full, dtype))
    low = _pixels(x_low, dtype)
    with torch.no_grad():
        pooled = ntc(low.to(next(ntc.parameters()).dtype)).pooled.to(dtype)
    B = x0.shape[0]
    if t is None:
        t = torch.randint(0, s.T, (B,), generator=gen)
    if eps is None:
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
    xt = forward_noise(x0, t, eps, s)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    control = enc_forward(to_model_space(low), pooled, t, enc)
    loss = noise_loss(denoiser(xt, t, control), eps)
    loss.backward()
    _check_frozen_grads(denoiser, ntc)
    if optimizer is not None:
        optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def dcdm_reconstruct(x_low, enc: EncWeights, denoiser: Denoiser, ntc: NTC, s: NoiseSchedule,
                     seed: int) -> ImageBatch:
    """Reverse diffusion steered by the controller; NTC tokens are computed once."""
    dtype = next(denoiser.parameters()).dtype
    low = _pixels(x_low, dtype)
    pooled = ntc(low.to(next(ntc.parameters()).dtype)).pooled.to(dtype)
    cond = to_model_space(low)

    def control_fn(_x, t):
        return enc_forward(cond, pooled, t, enc)

    return sample(tuple(low.shape), denoiser, s, seed, control_fn)


@dataclass
class EncBank:
    """Controllers keyed by DRF level plus the classifier that routes between them.

    ``levels`` is the classifier's class order (class ``i`` means DRF ``levels[i]``).
    """

    entries: dict[int, EncWeights]
    classifier: NTC
    levels: tuple[int, ...] = (100, 50, 20, 10, 4)

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)
        if len(set(self.entries)) != len(self.entries):
            raise StateError("duplicate DRF levels in bank")
        if not self.entries:
            raise StateError("bank is empty")
        if len(self.levels) != self.classifier.cfg.n_classes:
            raise StateError("classifier class count does not match the level list")


@dataclass
class RoutingDecision:
    levels: list[int]
    probabilities: np.ndarray
    classes: list[int] = field(default_factory=list)


def select_level(logits: np.ndarray, levels) -> int:
    """Argmax over classes; exact ties go to the highest DRF."""
    logits = np.asarray(logits, dtype=np.float64)
    top = logits.max()
    return max(int(levels[i]) for i in np.flatnonzero(logits == top))


@torch.no_grad()
def route_logits(logits, bank: EncBank) -> RoutingDecision:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    chosen, classes = [], []
    for row in logits:
        level = select_level(row, bank.levels)
        if level not in bank.entries:
            raise RoutingError(
                f"classifier picked DRF {level}, bank only holds {sorted(bank.entries)}"
            )
        chosen.append(level)
        classes.append(bank.levels.index(level))
    return RoutingDecision(chosen, probs, classes)


@torch.no_grad()
def route_unknown_drf(x_low, bank: EncBank) -> RoutingDecision:
    """Per-image level selection from the NTC classifier.

    A single-entry bank always routes to its entry.
    """
    if len(bank.entries) == 1:
        only = next(iter(bank.entries))
        n = _pixels(x_low, torch.float64).shape[0]
        probs = np.zeros((n, len(bank.levels)))
        if only in bank.levels:
            probs[:, bank.levels.index(only)] = 1.0
        return RoutingDecision([only] * n, probs, [bank.levels.index(only)] * n if only in bank.levels else [])
    dtype = next(bank.classifier.parameters()).dtype
    logits = bank.classifier(_pixels(x_low, dtype)).logits
    return route_logits(logits.double().numpy(), bank)


@torch.no_grad()
def reconstruct_unknown(x_low, bank: EncBank, denoiser: Denoiser, s: NoiseSchedule, seed: int):
    """Route each image, then reconstruct every routed group with its controller.

    Returns ``(ImageBatch, RoutingDecision)``. Each group is sampled with ``seed``.
    """
    low = _pixels(x_low, torch.float32).numpy()
    decision = route_unknown_drf(low, bank)
    out = np.empty_like(low)
    levels = np.asarray(decision.levels)
    for level in dict.fromkeys(decision.levels):
        idx = np.flatnonzero(levels == level)
        rec = dcdm_reconstruct(low[idx], bank.entries[level], denoiser, bank.classifier, s, seed)
        out[idx] = rec.pixels
    return ImageBatch(out, drf=None, role="full"), decision


def unconditional_reconstruct(x_low, denoiser: Denoiser, s: NoiseSchedule, seed: int) -> ImageBatch:
    shape = tuple(_pixels(x_low, torch.float32).shape)
    return sample(shape, denoiser, s, seed)

