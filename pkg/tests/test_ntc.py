import math

import numpy as np
import pytest
import torch

from dcdm.errors import ConfigurationError, DomainError, NumericalError
from dcdm.ntc import (NTC, AdmmConfig, LowRankSparseSplit, NtcConfig, NTBlock, SubspaceBank, TokenMatrix,
                      admm_iteration, admm_oracle, attention_halfstep, coding_rate, conditional_coding_rate,
                      mssa, nt_block_forward, ntc_loss, ntc_objective, ntc_train_step, patch_embed, prox_ops,
                      rank_sparsity_diagnostics, soft_threshold, svt)

from helpers import fd_check, params_of


def rnd(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(shape))


def bank_of(d, K, seed=0, **kw):
    torch.set_default_dtype(torch.float64)
    b = SubspaceBank(d, K, generator=torch.Generator().manual_seed(seed), **kw)
    return b


# --- patch embedding ---------------------------------------------------------


def test_token_counts():
    emb = torch.nn.Conv2d(1, 16, 8, stride=8)
    assert patch_embed(torch.zeros(1, 1, 8, 8), 8, emb).N == 1
    tm = patch_embed(torch.zeros(2, 1, 64, 64), 8, emb)
    assert (tm.d, tm.N, tm.batch) == (16, 128, 2)
    assert tm.per_image.shape == (2, 16, 64)
    back = TokenMatrix.from_per_image(tm.per_image)
    assert torch.equal(back.Z, tm.Z)
    with pytest.raises(ConfigurationError):
        patch_embed(torch.zeros(1, 1, 60, 64), 8, emb)


def test_constant_image_gives_equal_tokens():
    emb = torch.nn.Conv2d(1, 4, 4, stride=4).double()
    tm = patch_embed(torch.full((1, 1, 16, 16), 0.3, dtype=torch.float64), 4, emb)
    assert torch.allclose(tm.Z, tm.Z[:, :1].expand_as(tm.Z), atol=1e-15)


# --- coding rate -------------------------------------------------------------


def test_coding_rate_closed_forms():
    assert coding_rate(torch.zeros(5, 7, dtype=torch.float64), 1.0, 5).item() == 0.0
    assert abs(coding_rate(torch.ones(1, 1, dtype=torch.float64), 1.0, 1).item() - 0.5 * math.log(2)) < 1e-12


@pytest.mark.parametrize("shape", [(8, 16), (16, 8)])
def test_coding_rate_eigen_oracle(shape):
    Z = rnd(*shape, seed=1)
    d, N = shape
    eps, n = 0.7, d
    lam = np.linalg.eigvalsh(np.eye(N) + n / (N * eps**2) * (Z.T @ Z).numpy())
    want = 0.5 * np.sum(np.log(lam))
    assert abs(coding_rate(Z, eps, n).item() - want) < 1e-10


def test_coding_rate_nonnegative_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(200):
        Z = torch.as_tensor(rng.standard_normal((rng.integers(1, 9), rng.integers(1, 9))))
        r = coding_rate(Z, 1.0, Z.shape[0]).item()
        assert r >= 0
        assert coding_rate(2 * Z, 1.0, Z.shape[0]).item() >= r


def test_coding_rate_errors():
    with pytest.raises(DomainError):
        coding_rate(torch.tensor([[float("nan")]]), 1.0, 1)
    with pytest.raises(DomainError):
        coding_rate(torch.ones(1, 1), 0.0, 1)


def test_conditional_rate_identity_and_manual_sum():
    Z = rnd(8, 16, seed=2)
    eye = SubspaceBank.from_bases(torch.eye(8, dtype=torch.float64))
    assert abs(conditional_coding_rate(Z, eye, n_dim=8).item() - coding_rate(Z, 1.0, 8).item()) < 1e-10
    bank = bank_of(8, 2, seed=3, eps_cb=0.5)
    manual = sum(coding_rate(bank.U[k].T @ Z, 0.5, 4) for k in range(2))
    assert abs(conditional_coding_rate(Z, bank).item() - manual.item()) < 1e-12
    assert conditional_coding_rate(torch.zeros(8, 16, dtype=torch.float64), bank).item() == 0.0
    with pytest.raises(ConfigurationError):
        conditional_coding_rate(rnd(6, 4), bank)


def test_bank_is_orthonormal():
    bank = bank_of(16, 4, seed=5)
    for k in range(4):
        U = bank.U[k]
        torch.testing.assert_close(U.T @ U, torch.eye(4, dtype=U.dtype), atol=1e-6, rtol=0)
    with pytest.raises(ConfigurationError):
        SubspaceBank(10, 4)


# --- attention ---------------------------------------------------------------


def _mssa_loop(Z, bank):
    d, N = Z.shape
    out = torch.zeros_like(Z)
    for k in range(bank.heads):
        U = bank.U[k]
        P = U.T @ Z
        G = P.T @ P
        A = torch.empty_like(G)
        for j in range(N):
            col = torch.exp(G[:, j] - G[:, j].max())
            A[:, j] = col / col.sum()
        out += U @ (P @ A)
    return bank.p_coef / (N * bank.eps_cb**2) * out


def test_mssa_loop_oracle():
    Z = rnd(8, 16, seed=7)
    bank = bank_of(8, 2, seed=1, eps_cb=0.8, p_coef=3.0)
    assert torch.max(torch.abs(mssa(Z, bank) - _mssa_loop(Z, bank))).item() < 1e-12


def test_mssa_single_token_and_zero():
    bank = bank_of(8, 2, seed=2, eps_cb=0.5, p_coef=2.0)
    z = rnd(8, 1, seed=3)
    want = (2.0 / 0.25) * sum(bank.U[k] @ bank.U[k].T for k in range(2)) @ z
    torch.testing.assert_close(mssa(z, bank), want, atol=1e-12, rtol=0)
    assert not mssa(torch.zeros(8, 5, dtype=torch.float64), bank).any()


def test_attention_halfstep():
    bank = bank_of(8, 4, seed=4)
    Z = rnd(8, 12, seed=5)
    assert torch.equal(attention_halfstep(Z, bank, 0.0), Z)
    assert not attention_halfstep(torch.zeros_like(Z), bank, 0.3).any()
    c = bank.coefficient(12)
    want = (1 - 0.3 * c) * Z + 0.3 * c * mssa(Z, bank)
    assert torch.max(torch.abs(attention_halfstep(Z, bank, 0.3) - want)).item() < 1e-12


# --- proximal operators --------------------------------------------------------


def test_svt_examples():
    M = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_allclose(svt(M, 0.0), M, atol=1e-12)
    np.testing.assert_allclose(svt(np.diag([3.0, 1.0]), 2.0), np.diag([1.0, 0.0]), atol=1e-12)
    with pytest.raises(DomainError):
        svt(M, -1)


def svt_margin(rng, n=6, tau=0.5, probes=1000):
    """Smallest objective increase over random perturbations of the svt output."""
    M = rng.standard_normal((n, n))
    L = svt(M, tau)

    def obj(X):
        return 0.5 * np.sum((X - M) ** 2) + tau * np.linalg.svd(X, compute_uv=False).sum()

    base = obj(L)
    worst = np.inf
    for _ in range(probes):
        delta = rng.standard_normal((n, n))
        delta *= 1e-3 / np.linalg.norm(delta)
        worst = min(worst, obj(L + delta) - base)
    return worst


def test_svt_local_optimality():
    assert svt_margin(np.random.default_rng(1), probes=300) >= -1e-9


def test_soft_threshold_examples_and_grid():
    assert soft_threshold(np.array(0.5), 1.0) == 0.0
    assert soft_threshold(np.array(3.0), 1.0) == 2.0
    assert soft_threshold(np.array(-3.0), 1.0) == -2.0
    grid = np.arange(-100000, 100001) * 1e-4
    for m in (-4.2, -0.3, 0.0, 0.7, 2.5):
        s = soft_threshold(np.array(m), 1.0)
        best = grid[np.argmin(0.5 * (grid - m) ** 2 + np.abs(grid))]
        assert abs(s - best) <= 1e-4


# --- ADMM oracle ---------------------------------------------------------------


def test_admm_converges():
    rng = np.random.default_rng(0)
    Zh = rng.standard_normal((8, 8))
    res = admm_oracle(Zh, np.eye(8), AdmmConfig(lambda1=0.05, lambda2=0.05, iters=50))
    assert res.residuals[-1] < 0.1 * res.residuals[0]
    assert len(res.residuals) == 51


def test_admm_full_shrinkage_and_validation():
    Zh = np.random.default_rng(1).standard_normal((6, 6))
    res = admm_oracle(Zh, np.eye(6), AdmmConfig(lambda1=1e6, iters=5))
    assert np.abs(res.L).max() == 0.0
    with pytest.raises(ConfigurationError):
        admm_oracle(Zh, np.eye(6), AdmmConfig(rho=0))


def test_admm_divergence_raises():
    Zh = np.random.default_rng(2).standard_normal((6, 6))
    with pytest.raises(NumericalError):
        admm_oracle(Zh, 1e4 * np.eye(6), AdmmConfig(iters=20, eta=1e3, rho=1e-3))


def test_admm_l_update_is_prox_optimal():
    rng = np.random.default_rng(3)
    Zh = rng.standard_normal((6, 6))
    cfg = AdmmConfig(lambda1=0.5, lambda2=0.2)
    S = np.zeros_like(Zh)
    D = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    for _ in range(3):
        M = Zh - S
        L, S, _ = admm_iteration(Zh, S, D, cfg)
        tau = cfg.lambda1 / cfg.rho

        def obj(X):
            return 0.5 * np.sum((X - M) ** 2) + tau * np.linalg.svd(X, compute_uv=False).sum()

        base = obj(L)
        for _ in range(100):
            dlt = rng.standard_normal(L.shape)
            assert obj(L + 1e-3 * dlt / np.linalg.norm(dlt)) - base >= -1e-9


def block_vs_oracle(seed, d=8, N=12):
    torch.set_default_dtype(torch.float64)
    g = torch.Generator().manual_seed(seed)
    block = NTBlock(d, 0.4, generator=g)
    bank = SubspaceBank(d, 2, generator=g)
    rng = np.random.default_rng(seed)
    cfg = AdmmConfig(lambda1=rng.uniform(0.05, 0.5), lambda2=rng.uniform(0.05, 0.5),
                     rho=rng.uniform(0.5, 2), eta=rng.uniform(0.2, 1), iters=1)
    Z = torch.as_tensor(rng.standard_normal((d, N)))
    with torch.no_grad():
        out = nt_block_forward(Z, block, bank, ops=prox_ops(block.D, cfg))
        ref = admm_oracle(out.Z_half.numpy(), block.D.numpy(), cfg)
    return max(np.abs(out.L.numpy() - ref.L).max(), np.abs(out.S.numpy() - ref.S).max(),
               np.abs(out.Z.numpy() - ref.Z).max())


def test_block_matches_one_admm_iteration():
    assert max(block_vs_oracle(s) for s in range(5)) < 1e-10


# --- network ----------------------------------------------------------------------


def test_block_zero_weights_give_bias_tokens():
    torch.set_default_dtype(torch.float64)
    block = NTBlock(8)
    bank = SubspaceBank(8, 2)
    with torch.no_grad():
        for ffn in (block.H, block.Gamma, block.Phi):
            for lin in (ffn.fc1, ffn.fc2):
                lin.weight.zero_()
        block.Phi.fc2.bias.copy_(torch.arange(8.0))
    out = nt_block_forward(rnd(8, 5, seed=1), block, bank)
    torch.testing.assert_close(out.Z, torch.arange(8.0)[:, None].expand(8, 5))


def small_ntc(seed=0, **kw):
    torch.set_default_dtype(torch.float64)
    cfg = NtcConfig(**{"dim": 8, "heads": 2, "depth": 2, "patch": 8, **kw})
    return NTC(cfg, generator=torch.Generator().manual_seed(seed))


def test_ntc_forward_contract():
    m = small_ntc()
    x = torch.rand(2, 1, 64, 64)
    a = m(x)
    b = m(x)
    assert torch.equal(a.Z, b.Z) and torch.equal(a.logits, b.logits)
    assert a.Z.shape == (2, 8, 64) and a.logits.shape == (2, 5)
    assert abs(torch.softmax(a.logits, -1).sum(-1) - 1).max().item() < 1e-6
    flipped = m(x.flip(0))
    torch.testing.assert_close(flipped.logits, a.logits.flip(0), atol=1e-12, rtol=0)
    torch.testing.assert_close(flipped.Z, a.Z.flip(0), atol=1e-12, rtol=0)


def test_ntc_batch_scope_runs():
    m = small_ntc(scope="batch")
    out = m(torch.rand(3, 1, 64, 64))
    assert out.Z.shape == (3, 8, 64)


def test_ntc_config_validation():
    with pytest.raises(ConfigurationError):
        NtcConfig(dim=10)
    with pytest.raises(ConfigurationError):
        NtcConfig(dim=8, heads=3)
    with pytest.raises(ConfigurationError):
        NtcConfig(scope="global")


def test_cross_entropy_examples():
    assert abs(ntc_loss(torch.zeros(4, 5), [0, 1, 2, 3]).item() - math.log(5)) < 1e-6
    confident = torch.full((2, 5), -20.0)
    confident[0, 1] = confident[1, 3] = 20.0
    assert ntc_loss(confident, [1, 3]).item() < 1e-3
    with pytest.raises(DomainError):
        ntc_loss(torch.zeros(1, 5), [5])


def test_ntc_gradients():
    m = small_ntc(seed=3)
    x = torch.rand(2, 1, 64, 64, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    worst, where = fd_check(lambda: ntc_loss(m(x).logits, [1, 4]), params_of(m), per_tensor=4)
    assert worst < 1e-4, where


def test_ntc_train_step_updates():
    m = small_ntc()
    opt = torch.optim.AdamW(m.parameters(), lr=1e-2)
    x = torch.rand(4, 1, 64, 64)
    before = m.bank.U.detach().clone()
    loss = ntc_train_step(x, [0, 1, 2, 3], m, opt)
    assert loss >= 0 and not torch.equal(before, m.bank.U)


# --- diagnostics -------------------------------------------------------------------


def test_rank_sparsity_diagnostics():
    u, v = rnd(6, 1, seed=1), rnd(1, 9, seed=2)
    assert abs(rank_sparsity_diagnostics(u @ v)["stable_rank"] - 1) < 1e-9
    assert abs(rank_sparsity_diagnostics(np.eye(7))["stable_rank"] - 7) < 1e-9
    z = rank_sparsity_diagnostics(np.zeros((3, 3)))
    assert z["stable_rank"] == 0 and z["zero_fraction"] == 1
    M = rnd(5, 8, seed=3).numpy()
    ev = np.linalg.eigvalsh(M @ M.T)
    assert abs(rank_sparsity_diagnostics(M)["stable_rank"] - ev.sum() / ev.max()) < 1e-9
    sparse = np.eye(4)
    assert rank_sparsity_diagnostics(sparse)["zero_fraction"] == 0.75
    with pytest.raises(DomainError):
        rank_sparsity_diagnostics(np.array([[np.inf]]))


def test_ntc_objective():
    bank = SubspaceBank.from_bases(torch.eye(6, dtype=torch.float64))
    Z = torch.zeros(6, 4, dtype=torch.float64)
    assert ntc_objective(Z, LowRankSparseSplit(Z, Z), bank, 0.1, 0.1) == 0.0
    Z = rnd(6, 4, seed=1)
    split = LowRankSparseSplit(Z * 0.5, Z * 0.5)
    assert abs(ntc_objective(Z, split, bank, 0, 0)) < 1e-12
    bank2 = bank_of(6, 2, seed=4)
    want = (coding_rate(Z, 1.0, 6) - conditional_coding_rate(Z, bank2)
            - 0.3 * torch.linalg.svdvals(split.L).sum() - 0.2 * split.S.abs().sum()).item()
    assert abs(ntc_objective(Z, split, bank2, 0.3, 0.2) - want) < 1e-12
    assert split.residual(Z) == 0.0
