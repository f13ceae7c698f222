"""Nuclear Transformer Constraint.

Tokens are columns: a token matrix has shape ``(..., d, N)``. The unrolled blocks
run a subspace self-attention half-step followed by learned low-rank / sparse /
dictionary updates; :func:`admm_oracle` is the classical solver those updates
are modelled on and is kept for testing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import kernels
from .errors import ConfigurationError, DomainError, NumericalError
from .layers import FFN

DIVERGENCE_LIMIT = 1e6
CHOLESKY_JITTER = 1e-9


def _as_tensor(z):
    if torch.is_tensor(z):
        return z
    return torch.as_tensor(np.asarray(z, dtype=np.float64))


def random_orthogonal(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    q, r = torch.linalg.qr(torch.randn(n, n, generator=generator, dtype=torch.float64))
    return (q * torch.sign(torch.diagonal(r))).to(torch.get_default_dtype()).contiguous()


# --- tokens -------------------------------------------------------------------


@dataclass
class TokenMatrix:
    """All tokens of a batch as one ``d x N`` matrix, image-major columns."""

    Z: torch.Tensor
    batch: int

    @property
    def d(self) -> int:
        return self.Z.shape[0]

    @property
    def N(self) -> int:
        return self.Z.shape[1]

    @property
    def per_image(self) -> torch.Tensor:
        """``(B, d, N / B)`` view."""
        return self.Z.reshape(self.d, self.batch, -1).permute(1, 0, 2)

    @classmethod
    def from_per_image(cls, zb: torch.Tensor) -> "TokenMatrix":
        B, d, n = zb.shape
        return cls(zb.permute(1, 0, 2).reshape(d, B * n), B)


def patch_embed(X, p: int, embed: nn.Conv2d) -> TokenMatrix:
    """Non-overlapping ``p x p`` patches mapped to ``d``-vectors by ``embed``."""
    x = _as_tensor(X.pixels if hasattr(X, "pixels") else X).to(embed.weight.dtype)
    h, w = x.shape[-2:]
    if p <= 0 or h % p or w % p:
        raise ConfigurationError(f"patch size {p} must divide image dims {h}x{w}")
    if embed.kernel_size != (p, p) or embed.stride != (p, p):
        raise ConfigurationError("embedding conv must use kernel = stride = patch size")
    tok = embed(x).flatten(2)  # (B, d, n)
    return TokenMatrix.from_per_image(tok)


def relative_intensity(X, floor: float = 1e-8):
    """``x / mean(x) - 1`` per image.

    Dose levels differ mainly in relative noise, which this keeps while removing the
    arbitrary overall scale that otherwise leaves the embeddings near zero.
    """
    x = _as_tensor(X.pixels if hasattr(X, "pixels") else X)
    return x / x.mean(dim=(-2, -1), keepdim=True).clamp_min(floor) - 1.0


# --- coding rates ---------------------------------------------------------------


def coding_rate(Z, eps_cb: float, n_dim: float) -> torch.Tensor:
    """``1/2 logdet(I + n/(N eps^2) Z^T Z)`` via a Cholesky factor of the smaller Gram."""
    Z = _as_tensor(Z)
    if not torch.isfinite(Z).all():
        raise DomainError("coding rate of a non-finite matrix")
    if eps_cb <= 0:
        raise DomainError("codebook precision must be positive")
    d, N = Z.shape[-2:]
    c = n_dim / (N * eps_cb**2)
    if d <= N:
        gram = Z @ Z.transpose(-1, -2)
        k = d
    else:
        gram = Z.transpose(-1, -2) @ Z
        k = N
    eye = torch.eye(k, dtype=Z.dtype)
    G = eye + c * gram
    chol, info = torch.linalg.cholesky_ex(G)
    if bool((info != 0).any()):
        chol = torch.linalg.cholesky(G + CHOLESKY_JITTER * eye)
    return torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


class SubspaceBank(nn.Module):
    """``K`` subspace bases ``U_k`` (``d x d/K``), stored as one ``(K, d, d/K)`` parameter."""

    def __init__(self, d: int, heads: int, eps_cb: float = 1.0, p_coef: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigurationError(f"head count {heads} must divide d={d}")
        if eps_cb <= 0:
            raise ConfigurationError("eps_cb must be positive")
        q = random_orthogonal(d, generator)
        self.U = nn.Parameter(q.reshape(d, heads, d // heads).permute(1, 0, 2).contiguous())
        self.eps_cb = float(eps_cb)
        self.p_coef = float(d if p_coef is None else p_coef)

    @classmethod
    def from_bases(cls, U, eps_cb=1.0, p_coef=None) -> "SubspaceBank":
        U = _as_tensor(U)
        if U.ndim == 2:
            U = U[None]
        K, d, _ = U.shape
        bank = cls(d, K, eps_cb, p_coef)
        bank.U = nn.Parameter(U.clone().contiguous())
        return bank

    @property
    def heads(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    def coefficient(self, N: int) -> float:
        return self.p_coef / (N * self.eps_cb**2)


def conditional_coding_rate(Z, bank: SubspaceBank, n_dim: float | None = None) -> torch.Tensor:
    """Sum over heads of the coding rate of ``U_k^T Z``; ``n_dim`` defaults to ``d/K``."""
    Z = _as_tensor(Z).to(bank.U.dtype)
    if Z.shape[-2] != bank.d:
        raise ConfigurationError(f"token dim {Z.shape[-2]} != subspace ambient dim {bank.d}")
    n = bank.U.shape[-1] if n_dim is None else n_dim
    proj = torch.einsum("kdh,...dn->...khn", bank.U, Z)
    return coding_rate(proj, bank.eps_cb, n).sum(-1)


# --- attention -------------------------------------------------------------------


def mssa(Z, bank: SubspaceBank) -> torch.Tensor:
    """Multi-head subspace self-attention (also called MHSA).

    Each head projects tokens onto ``U_k``, mixes them with a column-wise softmax of
    their Gram matrix, and lifts back; heads are summed through ``[U_1 ... U_K]``.
    """
    Z = _as_tensor(Z).to(bank.U.dtype)
    if Z.shape[-2] != bank.d:
        raise ConfigurationError(f"token dim {Z.shape[-2]} != subspace ambient dim {bank.d}")
    N = Z.shape[-1]
    P = torch.einsum("kdh,...dn->...khn", bank.U, Z)
    A = torch.softmax(P.transpose(-1, -2) @ P, dim=-2)
    out = torch.einsum("kdh,...khn->...dn", bank.U, P @ A)
    return bank.coefficient(N) * out


def attention_halfstep(Z, bank: SubspaceBank, eta) -> torch.Tensor:
    Z = _as_tensor(Z).to(bank.U.dtype)
    c = bank.coefficient(Z.shape[-1])
    return (1.0 - eta * c) * Z + (eta * c) * mssa(Z, bank)


# --- proximal operators (numpy, oracle side) ------------------------------------------


def svt(M, tau: float) -> np.ndarray:
    """Singular value soft-thresholding, the prox of ``tau * ||.||_*``."""
    if tau < 0:
        raise DomainError("tau must be non-negative")
    M = np.asarray(M, dtype=np.float64)
    try:
        u, s, vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    return (u * np.maximum(s - tau, 0.0)) @ vt


def soft_threshold(M, tau: float) -> np.ndarray:
    """Elementwise shrinkage, the prox of ``tau * ||.||_1``."""
    if tau < 0:
        raise DomainError("tau must be non-negative")
    return kernels.soft_threshold(M, tau)


def svt_torch(M: torch.Tensor, tau: float) -> torch.Tensor:
    u, s, vh = torch.linalg.svd(M, full_matrices=False)
    return (u * torch.clamp(s - tau, min=0.0)[..., None, :]) @ vh


def soft_threshold_torch(M: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.sign(M) * torch.clamp(M.abs() - tau, min=0.0)


@dataclass
class AdmmConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    rho: float = 1.0
    eta: float = 0.5
    iters: int = 50

    def validate(self):
        for name in ("lambda1", "lambda2", "rho", "eta"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.iters < 1:
            raise ConfigurationError("iters must be >= 1")


@dataclass
class AdmmResult:
    L: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    residuals: list[float] = field(default_factory=list)


def admm_iteration(Z_half, S, D, cfg: AdmmConfig):
    """One pass over the low-rank, sparse and linearized dictionary subproblems."""
    L = svt(Z_half - S, cfg.lambda1 / cfg.rho)
    S = soft_threshold(Z_half - L, cfg.lambda2 / cfg.rho)
    Zhat = L + S
    grad = D.T @ (D @ Zhat - Z_half)
    Z = Zhat - grad / (cfg.rho + 1.0 / cfg.eta)
    return L, S, Z


def admm_oracle(Z_half, D, cfg: AdmmConfig) -> AdmmResult:
    """Classical alternating solver for the low-rank + sparse dictionary problem.

    Starts from ``L = S = 0``, ``Z = Z_half`` and records ``||Z - L - S||_F`` before
    the first and after every iteration.
    """
    cfg.validate()
    Z_half = np.asarray(Z_half, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    L = np.zeros_like(Z_half)
    S = np.zeros_like(Z_half)
    Z = Z_half.copy()
    res = [float(np.linalg.norm(Z - L - S))]
    for it in range(cfg.iters):
        L, S, Z = admm_iteration(Z_half, S, D, cfg)
        r = float(np.linalg.norm(Z - L - S))
        if not np.isfinite(r) or r > DIVERGENCE_LIMIT:
            raise NumericalError(f"ADMM diverged at iteration {it} (residual {r:.3g})")
        res.append(r)
    return AdmmResult(L, S, Z, res)


# --- unrolled network -----------------------------------------------------------------


def _per_token(f: Callable, M: torch.Tensor) -> torch.Tensor:
    return f(M.transpose(-1, -2)).transpose(-1, -2)


class BlockOps(NamedTuple):
    """The three update operators of a block: ``H(M)``, ``Gamma(Zh, L)``, ``Phi(A, B)``."""

    H: Callable
    Gamma: Callable
    Phi: Callable


class NTBlock(nn.Module):
    def __init__(self, d: int, eta_init: float = 0.5, generator: torch.Generator | None = None):
        super().__init__()
        self.H = FFN(d)
        self.Gamma = FFN(2 * d, d)
        self.Phi = FFN(2 * d, d)
        self.D = nn.Parameter(random_orthogonal(d, generator))
        self.eta = nn.Parameter(torch.tensor(float(eta_init)))

    def learned_ops(self) -> BlockOps:
        return BlockOps(
            H=lambda M: _per_token(self.H, M),
            Gamma=lambda Zh, L: _per_token(self.Gamma, torch.cat([Zh, L], dim=-2)),
            Phi=lambda A, B: _per_token(self.Phi, torch.cat([A, B], dim=-2)),
        )


def prox_ops(D, cfg: AdmmConfig) -> BlockOps:
    """Exact subproblem solutions, for substitution into :func:`nt_block_forward`."""
    D = _as_tensor(D)
    step = cfg.rho + 1.0 / cfg.eta
    return BlockOps(
        H=lambda M: svt_torch(M, cfg.lambda1 / cfg.rho),
        Gamma=lambda Zh, L: soft_threshold_torch(Zh - L, cfg.lambda2 / cfg.rho),
        Phi=lambda A, B: A - (D.T @ (D @ A) - B) / step,
    )


class BlockOutput(NamedTuple):
    Z: torch.Tensor
    Z_half: torch.Tensor
    L: torch.Tensor
    S: torch.Tensor


def nt_block_forward(Z, block: NTBlock, bank: SubspaceBank, eta=None,
                     ops: BlockOps | None = None) -> BlockOutput:
    """Attention half-step, then ``L = H(Zh - S0)``, ``S = Gamma(Zh, L)``,
    ``Z' = Phi(L + S, D^T Zh)`` with ``S0 = 0``."""
    Zh = attention_halfstep(Z, bank, block.eta if eta is None else eta)
    ops = ops or block.learned_ops()
    L = ops.H(Zh - torch.zeros_like(Zh))
    S = ops.Gamma(Zh, L)
    Zn = ops.Phi(L + S, block.D.T @ Zh)
    return BlockOutput(Zn, Zh, L, S)


@dataclass(frozen=True)
class NtcConfig:
    in_channels: int = 1
    patch: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 2
    n_classes: int = 5
    eps_cb: float = 1.0
    p_coef: float | None = None
    eta_init: float = 0.5
    # "image": attention within each image; "batch": across every token of the batch
    scope: str = "image"

    def __post_init__(self):
        if self.dim % 4:
            raise ConfigurationError("NTC dim must be divisible by 4")
        if self.dim % self.heads:
            raise ConfigurationError("heads must divide dim")
        if self.scope not in ("image", "batch"):
            raise ConfigurationError(f"unknown attention scope {self.scope!r}")


class NTCOutput(NamedTuple):
    Z: torch.Tensor  # (B, d, n)
    logits: torch.Tensor  # (B, n_classes)
    layers: list

    @property
    def tokens(self) -> TokenMatrix:
        return TokenMatrix.from_per_image(self.Z)

    @property
    def pooled(self) -> torch.Tensor:
        return self.Z.mean(-1)


class NTC(nn.Module):
    def __init__(self, cfg: NtcConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NtcConfig()
        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.dim, cfg.patch, stride=cfg.patch)
        self.bank = SubspaceBank(cfg.dim, cfg.heads, cfg.eps_cb, cfg.p_coef, generator)
        self.blocks = nn.ModuleList(NTBlock(cfg.dim, cfg.eta_init, generator) for _ in range(cfg.depth))
        self.classifier = FFN(cfg.dim, cfg.n_classes)

    def forward(self, x, keep_layers: bool = False) -> NTCOutput:
        tm = patch_embed(relative_intensity(x), self.cfg.patch, self.patch_embed)
        B = tm.batch
        z = tm.per_image if self.cfg.scope == "image" else tm.Z[None]
        layers = [z] if keep_layers else []
        for block in self.blocks:
            out = nt_block_forward(z, block, self.bank)
            z = out.Z
            if keep_layers:
                layers.append(out)
        if self.cfg.scope == "batch":
            z = TokenMatrix(z[0], B).per_image
        logits = self.classifier(z.mean(-1))
        return NTCOutput(z, logits, layers)


def ntc_forward(X, model: NTC) -> NTCOutput:
    return model(X)


def ntc_loss(logits, labels) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise DomainError(f"labels must lie in [0, {n})")
    return F.cross_entropy(logits, labels)


def ntc_train_step(batch, labels, model: NTC, optimizer: torch.optim.Optimizer | None = None) -> float:
    x = torch.as_tensor(np.asarray(batch.pixels if hasattr(batch, "pixels") else batch),
                        dtype=model.patch_embed.weight.dtype)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    loss = ntc_loss(model(x).logits, labels)
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return float(loss.detach())


# --- diagnostics -------------------------------------------------------------------------


def rank_sparsity_diagnostics(Z) -> dict:
    """Stable rank ``||Z||_F^2 / sigma_max^2``, near-zero share and singular values."""
    Z = np.asarray(Z.detach() if torch.is_tensor(Z) else Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise DomainError("diagnostics need a finite matrix")
    sv = np.linalg.svd(Z, compute_uv=False)
    top = np.abs(Z).max() if Z.size else 0.0
    if top == 0.0:
        return {"stable_rank": 0.0, "zero_fraction": 1.0, "singular_values": sv}
    return {
        "stable_rank": float(np.sum(sv**2) / sv[0] ** 2),
        "zero_fraction": float(np.mean(np.abs(Z) < 1e-6 * top)),
        "singular_values": sv,
    }


@dataclass
class LowRankSparseSplit:
    L: torch.Tensor
    S: torch.Tensor

    def residual(self, Z) -> float:
        return float(torch.linalg.norm(_as_tensor(Z) - _as_tensor(self.L) - _as_tensor(self.S)))


def ntc_objective(Z, split: LowRankSparseSplit, bank: SubspaceBank, lambda1: float, lambda2: float) -> float:
    """``R(Z) - R^c(Z; U) - lambda1 ||L||_* - lambda2 ||S||_1``."""
    Z = _as_tensor(Z).to(bank.U.dtype)
    L = _as_tensor(split.L).to(Z.dtype)
    S = _as_tensor(split.S).to(Z.dtype)
    if L.shape != Z.shape or S.shape != Z.shape:
        raise ConfigurationError("split shapes must match Z")
    with torch.no_grad():
        r = coding_rate(Z, bank.eps_cb, Z.shape[-2])
        rc = conditional_coding_rate(Z, bank)
        nuc = torch.linalg.matrix_norm(L, ord="nuc")
        l1 = S.abs().sum()
    return float(r - rc - lambda1 * nuc - lambda2 * l1)
