"""Build the three networks from a RunConfig and move them to and from checkpoints."""
from __future__ import annotations

from pathlib import Path

import torch

from .checkpoint import config_of, load_state, save_store
from .config import RunConfig
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, make_schedule, set_frozen
from .enc import EncWeights, init_enc_from_encoder
from .errors import StateError
from .ntc import NTC, NtcConfig


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(cfg.model.in_channels, tuple(cfg.model.channels))


def ntc_config(cfg: RunConfig) -> NtcConfig:
    m = cfg.model
    return NtcConfig(in_channels=m.in_channels, patch=m.patch, dim=m.ntc_dim, heads=m.heads,
                     depth=m.depth, n_classes=len(cfg.dose.drf_levels), eps_cb=m.eps_cb,
                     p_coef=m.p_coef or None, eta_init=m.eta_init, scope=m.scope)


def schedule_section(s: NoiseSchedule) -> dict:
    return {"T": s.T, "beta_start": repr(s.beta_start), "beta_end": repr(s.beta_end)}


def save_denoiser(model: Denoiser, directory, s: NoiseSchedule) -> str:
    cfg = {"in_channels": model.cfg.in_channels, "channels": list(model.cfg.channels)}
    return save_store(model, directory, "denoiser", cfg, {"schedule": schedule_section(s)})


def load_denoiser(directory, frozen: bool = True) -> Denoiser:
    state, man = load_state(directory, "denoiser")
    c = config_of(man)
    model = Denoiser(DenoiserConfig(c["in_channels"], tuple(c["channels"])))
    model.load_state_dict(state)
    return set_frozen(model.eval(), frozen)


def save_ntc(model: NTC, directory, levels) -> str:
    cfg = dict(model.cfg.__dict__)
    return save_store(model, directory, "ntc", cfg, {"classes": {"drf_levels": ",".join(map(str, levels))}})


def load_ntc(directory, frozen: bool = True) -> tuple[NTC, tuple[int, ...]]:
    state, man = load_state(directory, "ntc")
    model = NTC(NtcConfig(**config_of(man)))
    model.load_state_dict(state)
    levels = tuple(int(v) for v in man["classes"]["drf_levels"].split(","))
    return set_frozen(model.eval(), frozen), levels


def save_enc(enc: EncWeights, directory, drf_level: int) -> str:
    return save_store(enc, directory, "enc", {"z_dim": enc.z_dim}, {"bank": {"drf_level": int(drf_level)}})


def load_enc(directory, denoiser: Denoiser) -> tuple[EncWeights, int]:
    state, man = load_state(directory, "enc")
    if "bank" not in man or "drf_level" not in man["bank"]:
        raise StateError(f"{directory} has no drf_level tag")
    enc = init_enc_from_encoder(denoiser, config_of(man)["z_dim"])
    enc.load_state_dict(state)
    return enc.eval(), int(man["bank"]["drf_level"])


def find_enc_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("enc_drf*") if p.is_dir())


def generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))
