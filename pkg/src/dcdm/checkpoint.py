"""Weight stores on disk: one container file per named tensor plus a text manifest."""
from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .container import encode_array, read_array
from .errors import StateError

MANIFEST = "manifest.txt"


def blob_hash(data: bytes) -> str:
    """Git blob id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return encode_array(t.detach().cpu().numpy())


def tensor_hashes(module: nn.Module) -> dict[str, str]:
    return {k: blob_hash(_tensor_bytes(v)) for k, v in module.state_dict().items()}


def store_hash(module: nn.Module) -> str:
    """Tree-style hash over ``name blob`` lines sorted by tensor name."""
    lines = "".join(f"{k} {h}\n" for k, h in sorted(tensor_hashes(module).items()))
    return hashlib.sha1(lines.encode()).hexdigest()


def write_manifest(path, sections: dict[str, dict]) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, values in sections.items():
        cp[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def read_manifest(path) -> dict[str, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def save_store(module: nn.Module, directory, kind: str, config: dict,
               extra: dict[str, dict] | None = None) -> str:
    """Write every state tensor and a manifest; returns the store hash."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in module.state_dict().items():
        data = _tensor_bytes(t)
        (d / f"{name}.dcdm").write_bytes(data)
        tensors[name] = f"{'x'.join(map(str, t.shape)) or 'scalar'} {blob_hash(data)}"
    frozen = not any(p.requires_grad for p in module.parameters())
    h = store_hash(module)
    sections = {
        "store": {"kind": kind, "hash": h, "frozen": str(frozen).lower()},
        "config": {"json": json.dumps(config, sort_keys=True)},
        "tensors": tensors,
    }
    sections.update(extra or {})
    write_manifest(d / MANIFEST, sections)
    return h


def load_state(directory, expect_kind: str | None = None):
    """Returns ``(state_dict, manifest)``; tensors are checked against manifest hashes."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {d}")
    man = read_manifest(d / MANIFEST)
    kind = man.get("store", {}).get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise StateError(f"{d} holds a {kind!r} store, expected {expect_kind!r}")
    state = {}
    for name, meta in man.get("tensors", {}).items():
        path = d / f"{name}.dcdm"
        if not path.exists():
            raise FileNotFoundError(f"missing tensor file: {path}")
        data = path.read_bytes()
        if blob_hash(data) != meta.split()[-1]:
            raise StateError(f"tensor {name} in {d} does not match its manifest hash")
        state[name] = torch.from_numpy(np.array(read_array(path)))
    return state, man


def config_of(manifest: dict) -> dict:
    return json.loads(manifest["config"]["json"])
