"""Command-line front end.

Every command works inside ``--workdir``::

    data/{train,test}/drf<k>/     phantom pairs (make-data)
    checkpoints/denoiser/         pre-trained U (pretrain)
    checkpoints/ntc/              NTC classifier (train-ntc)
    checkpoints/enc_drf<k>/       one controller per dose level (train-enc)
    runs/<command>/               manifests, loss logs, CSV reports, previews

Exit status: 0 success, 1 usage error, 2 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, data, diagnostics, metrics
from .config import RunConfig, paper_scale
from .container import read_array
from .diffusion import Denoiser
from .enc import init_enc_from_encoder
from .errors import DCDMError
from .models import (denoiser_config, find_enc_dirs, load_denoiser, load_enc, load_ntc, ntc_config,
                     save_denoiser, save_enc, save_ntc, schedule_of, schedule_section)
from .ntc import NTC
from .pipeline import EncBank, dcdm_reconstruct, freeze_backbone, reconstruct_unknown
from .training import pretrain, train_enc, train_ntc

log = logging.getLogger("dcdm")

COMMANDS = ("pretrain", "train-ntc", "train-enc", "reconstruct", "evaluate", "diagnose", "make-data")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=None, help="run directory (default from config)")
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value")
    common.add_argument("--paper-scale", action="store_true", help="use full-size settings")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dcdm", description="Double-constraint diffusion for low-dose PET.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    md = sub.add_parser("make-data", parents=[common], help="generate phantom datasets")
    md.add_argument("--split", choices=("train", "test"), default="train")
    md.add_argument("--n", type=int, default=None, help="phantoms per dose level")
    md.add_argument("--drf", type=int, action="append", default=None, help="dose level(s)")

    pt = sub.add_parser("pretrain", parents=[common], help="train the diffusion denoiser")
    pt.add_argument("--steps", type=int, default=None)

    tn = sub.add_parser("train-ntc", parents=[common], help="train the NTC dose classifier")
    tn.add_argument("--steps", type=int, default=None)

    te = sub.add_parser("train-enc", parents=[common], help="train one controller")
    te.add_argument("--drf", type=int, required=True)
    te.add_argument("--steps", type=int, default=None)

    rc = sub.add_parser("reconstruct", parents=[common], help="reconstruct low-dose images")
    rc.add_argument("--drf", default="auto", help="'auto' to route, or a level to force")
    rc.add_argument("--input", default=None, help="low-dose tensor file")
    rc.add_argument("--reference", default=None, help="full-dose tensor for error-map previews")
    rc.add_argument("--out", default=None)

    ev = sub.add_parser("evaluate", parents=[common], help="emit a metric CSV")
    ev.add_argument("--recon", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--lesion", required=True)
    ev.add_argument("--liver", required=True)
    ev.add_argument("--ids", default=None, help="phantom id tensor")
    ev.add_argument("--drf", default="unknown")
    ev.add_argument("--method", default="dcdm")
    ev.add_argument("--out", default=None)

    dg = sub.add_parser("diagnose", parents=[common], help="rank/sparsity CSV and embedding export")
    dg.add_argument("--split", choices=("train", "test"), default="test")
    dg.add_argument("--out", default=None)
    return p


def load_config(args) -> RunConfig:
    cfg = paper_scale() if args.paper_scale else RunConfig()
    if args.config:
        cfg = RunConfig.load(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(key, value)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.workdir:
        cfg.paths.workdir = args.workdir
    return cfg


def _dirs(cfg: RunConfig):
    root = Path(cfg.paths.workdir)
    return root / "data", root / "checkpoints", root / "runs"


def _run_dir(cfg: RunConfig, name: str) -> Path:
    d = _dirs(cfg)[2] / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_manifest(cfg: RunConfig, name: str, sections: dict) -> Path:
    d = _run_dir(cfg, name)
    base = {"run": {"command": name, "config_hash": cfg.config_hash(), "seed": cfg.train.seed}}
    base.update(sections)
    checkpoint.write_manifest(d / "manifest.txt", base)
    cfg.save(d / "config.ini")
    return d


def _write_losses(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def _level_dirs(data_dir: Path, split: str) -> dict[int, Path]:
    found = {}
    for p in sorted((data_dir / split).glob("drf*")):
        if p.is_dir():
            found[int(p.name[3:])] = p
    if not found:
        raise FileNotFoundError(f"no datasets under {data_dir / split}; run make-data first")
    return found


def cmd_make_data(args, cfg: RunConfig) -> int:
    dose = data.DoseConfig(cfg.dose.counts_full, cfg.dose.drf_levels, cfg.dose.blur_fwhm)
    levels = args.drf or list(dose.drf_levels)
    n = args.n or (cfg.train.n_train if args.split == "train" else 32)
    data_dir = _dirs(cfg)[0] / args.split
    split_salt = 0 if args.split == "train" else 1
    for level in levels:
        seed = data.derive_seed(cfg.train.seed, split_salt, level)
        pairs = data.make_pairs(n, level, dose, seed, cfg.dose.height, cfg.dose.width,
                                cfg.dose.n_structures)
        data.save_pairs(pairs, data_dir / f"drf{level}")
        log.info("wrote %d pairs at DRF %d to %s", n, level, data_dir / f"drf{level}")
    _write_run_manifest(cfg, f"make-data-{args.split}",
                        {"data": {"levels": ",".join(map(str, levels)), "n": n}})
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    data_dir, ckpt, _ = _dirs(cfg)
    full = np.concatenate([data.load_pairs(d).full.pixels for d in _level_dirs(data_dir, "train").values()])
    torch.manual_seed(cfg.train.seed)
    model = Denoiser(denoiser_config(cfg))
    s = schedule_of(cfg)
    steps = args.steps if args.steps is not None else cfg.train.pretrain_steps
    run = pretrain(model, full, s, steps, cfg.train.batch, cfg.train.pretrain_lr, cfg.train.seed,
                   log_every=50 if args.verbose else 0)
    h = save_denoiser(model.eval(), ckpt / "denoiser", s)
    d = _write_run_manifest(cfg, "pretrain", {"checkpoints": {"denoiser": h}, "train": {"steps": steps}})
    _write_losses(d / "losses.csv", run.losses)
    return 0


def cmd_train_ntc(args, cfg: RunConfig) -> int:
    data_dir, ckpt, _ = _dirs(cfg)
    levels = list(cfg.dose.drf_levels)
    lows, labels = [], []
    for level, d in _level_dirs(data_dir, "train").items():
        if level not in levels:
            continue
        px = data.load_pairs(d).low.pixels
        lows.append(px)
        labels.append(np.full(len(px), levels.index(level)))
    torch.manual_seed(cfg.train.seed)
    model = NTC(ntc_config(cfg))
    steps = args.steps if args.steps is not None else cfg.train.ntc_steps
    run = train_ntc(model, np.concatenate(lows), np.concatenate(labels), steps, cfg.train.batch,
                    cfg.train.lr, cfg.train.seed, log_every=50 if args.verbose else 0)
    h = save_ntc(model.eval(), ckpt / "ntc", levels)
    d = _write_run_manifest(cfg, "train-ntc", {"checkpoints": {"ntc": h}, "train": {"steps": steps}})
    _write_losses(d / "losses.csv", run.losses)
    return 0


def cmd_train_enc(args, cfg: RunConfig) -> int:
    data_dir, ckpt, _ = _dirs(cfg)
    dirs = _level_dirs(data_dir, "train")
    if args.drf not in dirs:
        raise FileNotFoundError(f"no training data for DRF {args.drf} under {data_dir / 'train'}")
    pairs = data.load_pairs(dirs[args.drf])
    denoiser = load_denoiser(ckpt / "denoiser")
    ntc, _ = load_ntc(ckpt / "ntc")
    freeze_backbone(denoiser, ntc)
    torch.manual_seed(cfg.train.seed)
    enc = init_enc_from_encoder(denoiser, ntc.cfg.dim)
    steps = args.steps if args.steps is not None else cfg.train.enc_steps
    before = (checkpoint.store_hash(denoiser), checkpoint.store_hash(ntc))
    run = train_enc(enc, denoiser, ntc, pairs.full.pixels, pairs.low.pixels, schedule_of(cfg), steps,
                    cfg.train.batch, cfg.train.lr, cfg.train.seed, log_every=50 if args.verbose else 0)
    after = (checkpoint.store_hash(denoiser), checkpoint.store_hash(ntc))
    if before != after:
        raise DCDMError("frozen stores changed during controller training")
    h = save_enc(enc.eval(), ckpt / f"enc_drf{args.drf}", args.drf)
    d = _write_run_manifest(cfg, f"train-enc-drf{args.drf}", {
        "checkpoints": {"denoiser": after[0], "ntc": after[1], "enc": h},
        "train": {"steps": steps, "drf": args.drf},
    })
    _write_losses(d / "losses.csv", run.losses)
    return 0


def _preview(path: Path, low, recon, ref=None) -> None:
    from PIL import Image

    panels = [low, recon]
    if ref is not None:
        panels += [ref, np.abs(recon - ref) / max(float(np.abs(recon - ref).max()), 1e-12)]
    strip = np.concatenate([np.clip(p, 0, 1) for p in panels], axis=1)
    Image.fromarray((strip * 255).round().astype(np.uint8)).save(path)


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    data_dir, ckpt, _ = _dirs(cfg)
    levels = list(cfg.dose.drf_levels)
    if args.input:
        low = data.load_tensor(args.input)
    else:
        src = levels[-1] if args.drf == "auto" else int(args.drf)
        low = data.load_pairs(_level_dirs(data_dir, "test")[src]).low
    denoiser = load_denoiser(ckpt / "denoiser")
    ntc, ntc_levels = load_ntc(ckpt / "ntc")
    s = schedule_of(cfg)
    entries = {}
    for d in find_enc_dirs(ckpt):
        enc, level = load_enc(d, denoiser)
        entries[level] = enc
    if not entries:
        raise FileNotFoundError(f"no controller checkpoints (enc_drf*) under {ckpt}")
    seed = cfg.train.seed
    routing = {}
    if args.drf == "auto":
        bank = EncBank(entries, ntc, ntc_levels)
        out, decision = reconstruct_unknown(low, bank, denoiser, s, seed)
        routing = {f"image{i}": f"{lvl} p={decision.probabilities[i].max():.4f}"
                   for i, lvl in enumerate(decision.levels)}
        routing["selected"] = ",".join(map(str, decision.levels))
    else:
        level = int(args.drf)
        if level not in entries:
            raise FileNotFoundError(f"no controller for DRF {level}; available {sorted(entries)}")
        out = dcdm_reconstruct(low, entries[level], denoiser, ntc, s, seed)
        routing = {"selected": ",".join([str(level)] * low.batch_size), "forced": "true"}
    out_dir = Path(args.out) if args.out else _run_dir(cfg, "reconstruct")
    out_dir.mkdir(parents=True, exist_ok=True)
    data.save_tensor(out, out_dir / "recon.dcdm")
    ref = data.load_tensor(args.reference).pixels if args.reference else None
    for i in range(min(out.batch_size, 8)):
        _preview(out_dir / f"preview_{i}.png", low.pixels[i, 0], out.pixels[i, 0],
                 None if ref is None else ref[i, 0])
    hashes = {"denoiser": checkpoint.store_hash(denoiser), "ntc": checkpoint.store_hash(ntc)}
    hashes.update({f"enc_drf{k}": checkpoint.store_hash(v) for k, v in entries.items()})
    base = {
        "run": {"command": "reconstruct", "config_hash": cfg.config_hash(), "seed": seed,
                "drf": args.drf},
        "schedule": schedule_section(s),
        "routing": routing,
        "checkpoints": hashes,
    }
    checkpoint.write_manifest(out_dir / "manifest.txt", base)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    recon = read_array(args.recon)
    ref = read_array(args.ref)
    lesion = read_array(args.lesion) > 0.5
    liver = read_array(args.liver) > 0.5
    if recon.shape != ref.shape:
        raise DCDMError(f"recon {recon.shape} and ref {ref.shape} differ in shape")
    ids = read_array(args.ids).astype(np.int64) if args.ids else np.arange(len(recon))
    rows = []
    for i in range(len(recon)):
        r, f = recon[i].squeeze(), ref[i].squeeze()
        suv = metrics.suv_metrics(r, f, lesion[i], liver[i])
        rows.append({"phantom_id": int(ids[i]), "drf": args.drf, "method": args.method,
                     "seed": cfg.train.seed, "psnr": metrics.psnr(r, f), "ssim": metrics.ssim(r, f),
                     **suv.as_dict()})
    out = Path(args.out) if args.out else _run_dir(cfg, "evaluate") / "metrics.csv"
    diagnostics.write_rows(rows, out)
    return 0


def cmd_diagnose(args, cfg: RunConfig) -> int:
    data_dir, ckpt, _ = _dirs(cfg)
    ntc, levels = load_ntc(ckpt / "ntc")
    images, labels = [], []
    for level, d in _level_dirs(data_dir, args.split).items():
        px = data.load_pairs(d).low.pixels
        images.append(px)
        labels += [level] * len(px)
    images = np.concatenate(images)
    out = Path(args.out) if args.out else _run_dir(cfg, "diagnose")
    out.mkdir(parents=True, exist_ok=True)
    diagnostics.write_rows(diagnostics.layer_diagnostics(ntc, images), out / "rank_sparsity.csv")
    diagnostics.write_rows(diagnostics.embedding_rows(ntc, images, labels), out / "embedding.csv")
    return 0


HANDLERS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "train-ntc": cmd_train_ntc,
    "train-enc": cmd_train_enc,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
    except UsageError as exc:
        print(f"dcdm: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (DCDMError, FileNotFoundError) as exc:
        print(f"dcdm: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args, cfg)
    except (DCDMError, FileNotFoundError, ArithmeticError) as exc:
        print(f"dcdm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
