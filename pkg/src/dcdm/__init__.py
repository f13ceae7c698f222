"""Double-constraint diffusion for ultra-low-dose PET reconstruction."""
from .config import RunConfig, paper_scale
from .data import ActivityMap, DoseConfig, ImageBatch, generate_phantom, make_pairs, simulate_dose
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, forward_noise, make_schedule, sample
from .enc import EncWeights, enc_forward, init_enc_from_encoder
from .errors import DCDMError
from .metrics import psnr, ssim, suv_metrics
from .ntc import NTC, NtcConfig, admm_oracle, coding_rate, conditional_coding_rate
from .pipeline import EncBank, dcdm_reconstruct, reconstruct_unknown, route_unknown_drf

__version__ = "0.1.0"

__all__ = [
    "ActivityMap", "DCDMError", "Denoiser", "DenoiserConfig", "DoseConfig", "EncBank", "EncWeights",
    "ImageBatch", "NTC", "NoiseSchedule", "NtcConfig", "RunConfig", "admm_oracle", "coding_rate",
    "conditional_coding_rate", "dcdm_reconstruct", "enc_forward", "forward_noise", "generate_phantom",
    "init_enc_from_encoder", "make_pairs", "make_schedule", "paper_scale", "psnr", "reconstruct_unknown",
    "route_unknown_drf", "sample", "simulate_dose", "ssim", "suv_metrics",
]
