"""Per-layer rank/sparsity tables and 2-D embeddings of pooled NTC tokens."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .ntc import NTC, TokenMatrix, rank_sparsity_diagnostics


@torch.no_grad()
def layer_diagnostics(ntc: NTC, images) -> list[dict]:
    """Stable rank and near-zero share of the token matrix after every layer.

    Layer 0 is the patch embedding; for each block the L and S parts are reported too.
    """
    x = torch.as_tensor(np.asarray(images), dtype=ntc.patch_embed.weight.dtype)
    out = ntc(x, keep_layers=True)
    B = x.shape[0]
    rows = []

    def add(layer, part, z):
        zb = z if z.shape[0] == B else TokenMatrix(z[0], B).per_image
        diag = rank_sparsity_diagnostics(TokenMatrix.from_per_image(zb).Z)
        rows.append({"layer": layer, "part": part, "stable_rank": diag["stable_rank"],
                     "zero_fraction": diag["zero_fraction"]})

    add(0, "Z", out.layers[0])
    for i, blk in enumerate(out.layers[1:], start=1):
        add(i, "Z", blk.Z)
        add(i, "L", blk.L)
        add(i, "S", blk.S)
    return rows


def write_rows(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def pca_embedding(features, n_components: int = 2) -> np.ndarray:
    """Project rows of ``features`` onto their top principal directions."""
    f = np.asarray(features, dtype=np.float64)
    centered = f - f.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:n_components].T


@torch.no_grad()
def embedding_rows(ntc: NTC, images, labels) -> list[dict]:
    x = torch.as_tensor(np.asarray(images), dtype=ntc.patch_embed.weight.dtype)
    pooled = ntc(x).pooled.double().numpy()
    coords = pca_embedding(pooled)
    return [{"index": i, "label": int(lab), "pc1": float(c[0]), "pc2": float(c[1])}
            for i, (lab, c) in enumerate(zip(labels, coords))]
