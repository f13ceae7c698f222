"""Run configuration: INI-style text with sections, stable hashing, presets."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class ScheduleConfig:
    T: int = 200
    # endpoints scaled by 1000/T so the final alpha_bar is near zero at desk T
    beta_start: float = 5e-4
    beta_end: float = 0.1


@dataclass
class ModelConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (32, 64, 128, 256, 256, 256)
    ntc_dim: int = 64
    heads: int = 4
    depth: int = 2
    patch: int = 8
    eps_cb: float = 1.0
    p_coef: float = 0.0  # 0 means "use ntc_dim"
    eta_init: float = 0.5
    scope: str = "image"


@dataclass
class DoseSection:
    counts_full: float = 1e5
    drf_levels: tuple[int, ...] = (100, 50, 20, 10, 4)
    blur_fwhm: float = 0.5
    height: int = 64
    width: int = 64
    n_structures: int = 5


@dataclass
class TrainConfig:
    pretrain_steps: int = 400
    ntc_steps: int = 400
    enc_steps: int = 400
    batch: int = 6
    lr: float = 1e-4
    pretrain_lr: float = 1e-4
    seed: int = 0
    n_train: int = 128


@dataclass
class PathConfig:
    workdir: str = "dcdm_run"


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dose: DoseSection = field(default_factory=DoseSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in fields(self):
            values = getattr(self, sec.name)
            cp[sec.name] = {f.name: _fmt(getattr(values, f.name)) for f in fields(values)}
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        cfg = cls()
        for sec_name in cp.sections():
            if not hasattr(cfg, sec_name):
                raise ConfigurationError(f"unknown config section [{sec_name}]")
            section = getattr(cfg, sec_name)
            known = {f.name: f for f in fields(section)}
            for key, raw in cp[sec_name].items():
                if key not in known:
                    raise ConfigurationError(f"unknown key {key!r} in [{sec_name}]")
                setattr(section, key, _parse(raw, getattr(section, key)))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        return cls.from_ini(p.read_text())

    def set(self, dotted: str, raw: str) -> None:
        sec, _, key = dotted.partition(".")
        section = getattr(self, sec, None)
        if section is None or not hasattr(section, key):
            raise ConfigurationError(f"unknown config key {dotted!r}")
        setattr(section, key, _parse(raw, getattr(section, key)))


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(like, tuple):
            elem = type(like[0]) if like else float
            return tuple(elem(x) for x in raw.split(",") if x.strip())
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {raw!r}: {exc}") from exc
    return raw


def paper_scale() -> RunConfig:
    """Full-size settings: 256x256, T=1000, 300k pre-training and 100k NTC/ENC steps."""
    cfg = RunConfig()
    cfg.schedule = ScheduleConfig(T=1000, beta_start=1e-4, beta_end=0.02)
    cfg.dose.height = cfg.dose.width = 256
    cfg.train = TrainConfig(pretrain_steps=300_000, ntc_steps=100_000, enc_steps=100_000,
                            batch=6, lr=1e-4, pretrain_lr=1e-4, seed=0, n_train=67_973)
    return cfg
