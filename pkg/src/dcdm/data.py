"""Synthetic PET-like phantoms, count-thinning dose simulation and tensor IO."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .container import read_array, write_array
from .errors import ConfigurationError, DomainError

FULL_DOSE = "full"
LOW_DOSE = "low"
DOWNSAMPLING_STAGES = 6
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass
class ActivityMap:
    grid: np.ndarray
    lesion_mask: np.ndarray
    liver_mask: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ConfigurationError("activity grid must be 2-D")
        if self.lesion_mask.shape != self.grid.shape or self.liver_mask.shape != self.grid.shape:
            raise ConfigurationError("masks must match the grid shape")
        if np.any(self.grid < 0):
            raise DomainError("activity must be non-negative")
        if np.any(self.lesion_mask & self.liver_mask):
            raise DomainError("lesion and liver masks overlap")


@dataclass
class ImageBatch:
    """Images stored batch-first as ``(B, c, h, w)`` float32 in [0, 1].

    ``drf`` is ``None`` when the dose level is unknown.
    """

    pixels: np.ndarray
    drf: int | None = None
    role: str = LOW_DOSE

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 4:
            raise ConfigurationError(f"ImageBatch expects (B, c, h, w), got shape {px.shape}")
        _, c, h, w = px.shape
        if c < 1:
            raise ConfigurationError("need at least one channel")
        step = 2**DOWNSAMPLING_STAGES
        if h % step or w % step:
            raise ConfigurationError(f"h and w must be divisible by {step}, got {h}x{w}")
        if not np.all(np.isfinite(px)):
            raise DomainError("non-finite pixels")
        if self.role not in (FULL_DOSE, LOW_DOSE):
            raise ConfigurationError(f"unknown role {self.role!r}")
        self.pixels = px

    @property
    def batch_size(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self):
        return self.pixels.shape

    def select(self, idx) -> "ImageBatch":
        idx = np.atleast_1d(np.asarray(idx))
        return ImageBatch(self.pixels[idx], drf=self.drf, role=self.role)


@dataclass
class DoseConfig:
    counts_full: float = 2.0e5
    drf_levels: tuple[int, ...] = (100, 50, 20, 10, 4)
    blur_fwhm: float = 1.0

    def __post_init__(self):
        self.drf_levels = tuple(int(d) for d in self.drf_levels)
        if self.counts_full <= 0:
            raise ConfigurationError("counts_full must be positive")
        if self.blur_fwhm <= 0:
            raise ConfigurationError("blur_fwhm must be positive")
        if any(d <= 0 for d in self.drf_levels):
            raise ConfigurationError("drf levels must be positive")
        if any(a <= b for a, b in zip(self.drf_levels, self.drf_levels[1:])):
            raise ConfigurationError("drf_levels must be strictly decreasing")


def _ellipse_radius(h, w, cx, cy, ax, ay, ang):
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0 - cy
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0 - cx
    y, x = np.meshgrid(ys, xs, indexing="ij")
    c, s = np.cos(ang), np.sin(ang)
    return np.hypot((c * x + s * y) / ax, (-s * x + c * y) / ay)


def generate_phantom(seed: int, h: int = 64, w: int = 64, n_structures: int = 5) -> ActivityMap:
    """Body outline, a liver-like region holding one lesion, and extra organs.

    ``n_structures`` counts the organ ellipses inside the body, the liver included.
    The result is a pure function of the arguments.
    """
    if h < 32 or w < 32:
        raise ConfigurationError(f"phantom needs h, w >= 32, got {h}x{w}")
    if n_structures < 1:
        raise ConfigurationError("n_structures must be >= 1")
    rng = np.random.default_rng(seed)
    edge = 2.0 / min(h, w)  # about one pixel of logistic edge width
    rows = []
    body = (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
            rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.8), rng.uniform(-0.2, 0.2))
    rows.append((*body, rng.uniform(0.15, 0.25), edge))

    liver = (rng.uniform(-0.45, -0.25), rng.uniform(-0.15, 0.15),
             rng.uniform(0.25, 0.35), rng.uniform(0.22, 0.3), rng.uniform(-0.5, 0.5))
    rows.append((*liver, rng.uniform(0.2, 0.3), edge))

    for _ in range(n_structures - 1):
        rows.append((rng.uniform(0.0, 0.5), rng.uniform(-0.4, 0.4),
                     rng.uniform(0.06, 0.2), rng.uniform(0.06, 0.2), rng.uniform(0, np.pi),
                     rng.uniform(0.1, 0.6), edge))

    # lesion sits inside the liver, away from its boundary
    ang = rng.uniform(0, 2 * np.pi)
    rad = rng.uniform(0.0, 0.35)
    lx = liver[0] + rad * liver[2] * np.cos(ang)
    ly = liver[1] + rad * liver[3] * np.sin(ang)
    lesion = (lx, ly, rng.uniform(0.07, 0.11), rng.uniform(0.07, 0.11), rng.uniform(0, np.pi))
    rows.append((*lesion, rng.uniform(0.4, 0.7), edge))

    grid = kernels.rasterize_ellipses(h, w, np.array(rows, dtype=np.float64))
    grid = np.clip(grid, 0.0, None)
    grid /= grid.max()

    r_lesion = _ellipse_radius(h, w, *lesion)
    lesion_mask = r_lesion <= 1.0
    if not lesion_mask.any():
        lesion_mask[np.unravel_index(np.argmin(r_lesion), r_lesion.shape)] = True
    liver_mask = (_ellipse_radius(h, w, *liver) <= 0.85) & (r_lesion > 1.8)
    return ActivityMap(grid=grid, lesion_mask=lesion_mask, liver_mask=liver_mask)


def sample_counts(amap: ActivityMap, cfg: DoseConfig, drf: int, seed: int):
    """Draw independent full-dose and thinned low-dose Poisson count grids.

    Returns ``(full_counts, low_counts, expected_full)``; the low-dose expectation
    is ``expected_full / drf``.
    """
    if drf <= 0:
        raise DomainError(f"drf must be positive, got {drf}")
    if drf != 1 and drf not in cfg.drf_levels:
        raise DomainError(f"drf {drf} not in configured levels {cfg.drf_levels}")
    grid = np.asarray(amap.grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise DomainError("activity map is not finite")
    total = grid.sum()
    expected = grid * (cfg.counts_full / total) if total > 0 else np.zeros_like(grid)
    rng = np.random.default_rng(seed)
    full = rng.poisson(expected).astype(np.float64)
    low = rng.poisson(expected / drf).astype(np.float64)
    return full, low, expected


def simulate_dose(amap: ActivityMap, cfg: DoseConfig, drf: int, seed: int):
    """Full/low-dose pair from one activity map.

    Both images are divided by the full-dose count maximum (joint scaling); the
    low-dose counts are blurred, multiplied back by ``drf`` and clipped to [0, 1].
    """
    full, low, _ = sample_counts(amap, cfg, drf, seed)
    low = gaussian_filter(low, sigma=cfg.blur_fwhm * FWHM_TO_SIGMA, mode="nearest")
    scale = full.max()
    if scale <= 0:
        scale = 1.0
    full_img = (full / scale).astype(np.float32)
    low_img = np.clip(low * drf / scale, 0.0, 1.0).astype(np.float32)
    return (
        ImageBatch(full_img[None, None], drf=drf, role=FULL_DOSE),
        ImageBatch(low_img[None, None], drf=drf, role=LOW_DOSE),
    )


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class PairSet:
    """A stack of aligned full/low-dose images plus the phantom masks."""

    full: ImageBatch
    low: ImageBatch
    lesion_masks: np.ndarray
    liver_masks: np.ndarray
    phantom_ids: np.ndarray
    drfs: np.ndarray = field(default=None)

    def __len__(self):
        return self.full.batch_size


def make_pairs(n: int, drf: int | Sequence[int], cfg: DoseConfig, seed: int,
               h: int = 64, w: int = 64, n_structures: int = 5) -> PairSet:
    """``n`` phantoms, each simulated at ``drf`` (or at ``drf[i]`` when a sequence)."""
    drfs = np.full(n, drf, dtype=np.int64) if np.isscalar(drf) else np.asarray(drf, dtype=np.int64)
    if drfs.shape != (n,):
        raise ConfigurationError("need one drf per phantom")
    fulls, lows, les, liv, ids = [], [], [], [], []
    for i in range(n):
        pid = derive_seed(seed, i)
        amap = generate_phantom(pid, h, w, n_structures)
        f, l = simulate_dose(amap, cfg, int(drfs[i]), derive_seed(seed, i, int(drfs[i])))
        fulls.append(f.pixels[0])
        lows.append(l.pixels[0])
        les.append(amap.lesion_mask)
        liv.append(amap.liver_mask)
        ids.append(pid)
    one = int(drfs[0]) if np.all(drfs == drfs[0]) else None
    return PairSet(
        full=ImageBatch(np.stack(fulls), drf=one, role=FULL_DOSE),
        low=ImageBatch(np.stack(lows), drf=one, role=LOW_DOSE),
        lesion_masks=np.stack(les),
        liver_masks=np.stack(liv),
        phantom_ids=np.asarray(ids, dtype=np.int64),
        drfs=drfs,
    )


def save_tensor(batch: ImageBatch | np.ndarray, path) -> None:
    arr = batch.pixels if isinstance(batch, ImageBatch) else batch
    write_array(path, arr)


def load_tensor(path, drf: int | None = None, role: str = LOW_DOSE) -> ImageBatch:
    return ImageBatch(read_array(path), drf=drf, role=role)


def save_pairs(pairs: PairSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(pairs.full, d / "full.dcdm")
    save_tensor(pairs.low, d / "low.dcdm")
    write_array(d / "lesion.dcdm", pairs.lesion_masks.astype(np.float32))
    write_array(d / "liver.dcdm", pairs.liver_masks.astype(np.float32))
    # ids/drfs fit exactly in f64
    write_array(d / "ids.dcdm", pairs.phantom_ids.astype(np.float64))
    write_array(d / "drfs.dcdm", pairs.drfs.astype(np.float64))


def load_pairs(directory) -> PairSet:
    d = Path(directory)
    drfs = read_array(d / "drfs.dcdm").astype(np.int64)
    one = int(drfs[0]) if len(drfs) and np.all(drfs == drfs[0]) else None
    return PairSet(
        full=load_tensor(d / "full.dcdm", drf=one, role=FULL_DOSE),
        low=load_tensor(d / "low.dcdm", drf=one, role=LOW_DOSE),
        lesion_masks=read_array(d / "lesion.dcdm") > 0.5,
        liver_masks=read_array(d / "liver.dcdm") > 0.5,
        phantom_ids=read_array(d / "ids.dcdm").astype(np.int64),
        drfs=drfs,
    )
