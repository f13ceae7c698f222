"""Seeded training loops with resumable state."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import load_state, read_manifest, save_store, write_manifest
from .container import read_array, write_array
from .data import FULL_DOSE, ImageBatch
from .diffusion import Denoiser, NoiseSchedule, pretrain_step
from .enc import EncWeights
from .ntc import NTC, ntc_train_step
from .pipeline import dcdm_train_step

log = logging.getLogger(__name__)

StepFn = Callable[[torch.Tensor, torch.Generator, torch.optim.Optimizer], float]


class TrainRun:
    """Optimizer, RNG stream, step counter and loss log for one weight store.

    Resuming from :meth:`save` output continues the identical loss sequence.
    """

    def __init__(self, model: nn.Module, lr: float, seed: int, config: dict | None = None):
        self.model = model
        self.config = dict(config or {})
        self.lr = lr
        self.seed = seed
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=lr)
        self.gen = torch.Generator().manual_seed(int(seed))
        self.step = 0
        self.losses: list[float] = []

    def advance(self, n_steps: int, n_items: int, batch: int, step_fn: StepFn, log_every: int = 0):
        self.model.train()
        for _ in range(n_steps):
            idx = torch.randint(0, n_items, (batch,), generator=self.gen)
            loss = step_fn(idx, self.gen, self.optimizer)
            self.losses.append(loss)
            self.step += 1
            if log_every and self.step % log_every == 0:
                log.info("step %d loss %.5f", self.step, float(np.mean(self.losses[-log_every:])))
        self.model.eval()
        return self.losses

    def save(self, directory, kind: str, extra: dict[str, dict] | None = None) -> str:
        d = Path(directory)
        h = save_store(self.model, d, kind, self.config, extra)
        opt = d / "optimizer"
        opt.mkdir(exist_ok=True)
        state = self.optimizer.state_dict()
        for i, st in state["state"].items():
            for key, val in st.items():
                write_array(opt / f"{i}.{key}.dcdm", torch.as_tensor(val).double().numpy())
        gen_state = self.gen.get_state().numpy().astype(np.float32)
        write_array(opt / "generator.dcdm", gen_state)
        write_array(d / "losses.dcdm", np.asarray(self.losses, dtype=np.float64))
        write_manifest(opt / "run.txt", {"run": {"step": self.step, "lr": self.lr, "seed": self.seed}})
        return h

    @classmethod
    def resume(cls, directory, model: nn.Module) -> "TrainRun":
        d = Path(directory)
        state, _ = load_state(d)
        model.load_state_dict(state)
        info = read_manifest(d / "optimizer" / "run.txt")["run"]
        run = cls(model, float(info["lr"]), int(info["seed"]))
        run.step = int(info["step"])
        run.losses = read_array(d / "losses.dcdm").tolist()
        opt_state = run.optimizer.state_dict()
        params = [p for p in model.parameters() if p.requires_grad]
        restored = {}
        for f in sorted((d / "optimizer").glob("*.*.dcdm")):
            i, key, _ = f.name.split(".")
            arr = torch.from_numpy(np.array(read_array(f)))
            dtype = torch.float32 if key == "step" else params[int(i)].dtype
            restored.setdefault(int(i), {})[key] = arr.to(dtype)
        opt_state["state"] = restored
        run.optimizer.load_state_dict(opt_state)
        gen_state = read_array(d / "optimizer" / "generator.dcdm").astype(np.uint8)
        run.gen.set_state(torch.from_numpy(gen_state))
        return run


def _full_batch(images: np.ndarray, idx) -> ImageBatch:
    return ImageBatch(images[idx.numpy()], role=FULL_DOSE)


def pretrain(denoiser: Denoiser, full: np.ndarray, s: NoiseSchedule, steps: int, batch: int,
             lr: float, seed: int, run: TrainRun | None = None, log_every: int = 0) -> TrainRun:
    run = run or TrainRun(denoiser, lr, seed)

    def step(idx, gen, opt):
        return pretrain_step(_full_batch(full, idx), denoiser, s, gen, opt)

    run.advance(steps, len(full), batch, step, log_every)
    return run


def train_ntc(ntc: NTC, low: np.ndarray, labels: np.ndarray, steps: int, batch: int, lr: float,
              seed: int, run: TrainRun | None = None, log_every: int = 0) -> TrainRun:
    run = run or TrainRun(ntc, lr, seed)
    labels = np.asarray(labels)

    def step(idx, gen, opt):
        i = idx.numpy()
        return ntc_train_step(low[i], labels[i], ntc, opt)

    run.advance(steps, len(low), batch, step, log_every)
    return run


def train_enc(enc: EncWeights, denoiser: Denoiser, ntc: NTC, full: np.ndarray, low: np.ndarray,
              s: NoiseSchedule, steps: int, batch: int, lr: float, seed: int,
              run: TrainRun | None = None, log_every: int = 0,
              callback: Callable[[int], None] | None = None) -> TrainRun:
    run = run or TrainRun(enc, lr, seed)

    def step(idx, gen, opt):
        i = idx.numpy()
        loss = dcdm_train_step(full[i], low[i], enc, denoiser, ntc, s, gen, opt)
        if callback is not None:
            callback(run.step + 1)
        return loss

    run.advance(steps, len(full), batch, step, log_every)
    return run


def smoothed(losses, window: int = 50) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) < window:
        return losses.copy()
    kernel = np.ones(window) / window
    return np.convolve(losses, kernel, mode="valid")
