"""Image-quality and SUV-derived clinical metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import DomainError, UndefinedMetricError

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, max_val: float = 1.0) -> float:
    """``10 log10(max^2 / MSE)``; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise DomainError("max_val must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(max_val**2 / mse))


def ssim(a, b, data_range: float = 1.0, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all fully contained uniform ``win x win`` windows of 2-D images."""
    a = np.squeeze(np.asarray(a, dtype=np.float64))
    b = np.squeeze(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise DomainError("ssim expects single 2-D images")
    if min(a.shape) < win:
        raise DomainError(f"image {a.shape} smaller than the {win}x{win} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return float(kernels.ssim_map(a, b, win, c1, c2).mean())


@dataclass
class SuvReport:
    delta_suv_max: float
    delta_suv_mean: float
    snr: float
    cov: float
    cr: float

    def as_dict(self):
        return asdict(self)


def _region(img, mask, name):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise DomainError(f"{name} mask shape {mask.shape} != image shape {img.shape}")
    if not mask.any():
        raise DomainError(f"{name} mask is empty")
    return img[mask]


def suv_metrics(recon, ref, lesion_mask, liver_mask) -> SuvReport:
    """Lesion SUV differences against ``ref`` plus SNR, CoV and CR of ``recon``.

    SUV is the normalized intensity; the liver SD is the population SD.
    """
    recon = np.squeeze(np.asarray(recon, dtype=np.float64))
    ref = np.squeeze(np.asarray(ref, dtype=np.float64))
    if recon.shape != ref.shape:
        raise DomainError("recon and ref must share a shape")
    les_rec = _region(recon, np.squeeze(lesion_mask), "lesion")
    les_ref = _region(ref, np.squeeze(lesion_mask), "lesion")
    liver = _region(recon, np.squeeze(liver_mask), "liver")
    sd_liver = float(liver.std())
    mean_liver = float(liver.mean())
    if sd_liver == 0.0:
        raise UndefinedMetricError("liver SD is zero; SNR undefined")
    if mean_liver == 0.0:
        raise UndefinedMetricError("liver mean is zero; CoV and CR undefined")
    return SuvReport(
        delta_suv_max=abs(float(les_ref.max()) - float(les_rec.max())),
        delta_suv_mean=abs(float(les_ref.mean()) - float(les_rec.mean())),
        snr=float(les_rec.mean()) / sd_liver,
        cov=sd_liver / mean_liver,
        cr=float(les_rec.max()) / mean_liver,
    )


def snr_from_stats(suv_mean_lesion, sd_liver):
    return suv_mean_lesion / sd_liver


def cov_from_stats(sd_liver, suv_mean_liver):
    return sd_liver / suv_mean_liver


def cr_from_stats(suv_max_lesion, suv_mean_liver):
    return suv_max_lesion / suv_mean_liver
