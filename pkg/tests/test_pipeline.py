import numpy as np
import pytest
import torch

from dcdm.checkpoint import store_hash
from dcdm.data import DoseConfig, make_pairs
from dcdm.diffusion import Denoiser, DenoiserConfig, forward_noise, make_schedule, noise_loss, to_model_space
from dcdm.enc import init_enc_from_encoder
from dcdm.errors import FreezeViolationError, RoutingError, StateError
from dcdm.ntc import NTC, NtcConfig
from dcdm.pipeline import (EncBank, dcdm_reconstruct, dcdm_train_step, freeze_backbone, reconstruct_unknown,
                           route_logits, route_unknown_drf, select_level, unconditional_reconstruct)
from dcdm.training import smoothed, train_enc

TINY = (4, 4, 8, 8, 8, 8)


def stack(seed=0):
    torch.manual_seed(seed)
    den = Denoiser(DenoiserConfig(1, TINY))
    ntc = NTC(NtcConfig(dim=16, heads=2, depth=1))
    freeze_backbone(den, ntc)
    enc = init_enc_from_encoder(den, 16)
    return den, ntc, enc


def test_fresh_controller_matches_unconditional():
    den, ntc, enc = stack()
    s = make_schedule(6, 1e-2, 0.2)
    low = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
    for seed in (0, 1):
        a = dcdm_reconstruct(low, enc, den, ntc, s, seed)
        b = unconditional_reconstruct(low, den, s, seed)
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert dcdm_reconstruct(low, enc, den, ntc, s, seed).pixels.tobytes() == a.pixels.tobytes()


def test_fresh_controller_loss_equals_unconditional():
    den, ntc, enc = stack()
    s = make_schedule(20, 1e-3, 0.1)
    g = torch.Generator().manual_seed(0)
    full = torch.rand(2, 1, 64, 64, generator=g)
    low = torch.rand(2, 1, 64, 64, generator=g)
    t = torch.tensor([3, 12])
    eps = torch.randn(2, 1, 64, 64, generator=g)
    loss = dcdm_train_step(full, low, enc, den, ntc, s, g, t=t, eps=eps)
    with torch.no_grad():
        ref = noise_loss(den(forward_noise(to_model_space(full), t, eps, s), t), eps).item()
    assert loss == ref
    for m in (den, ntc):
        assert all(p.grad is None for p in m.parameters())


def test_training_requires_frozen_backbone():
    den, ntc, enc = stack()
    for p in den.parameters():
        p.requires_grad_(True)
    with pytest.raises(StateError):
        dcdm_train_step(torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64), enc, den, ntc,
                        make_schedule(5), torch.Generator())


def test_frozen_gradient_is_detected():
    den, ntc, enc = stack()
    p = next(den.parameters())
    p.grad = torch.ones_like(p)
    with pytest.raises(FreezeViolationError):
        dcdm_train_step(torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64), enc, den, ntc,
                        make_schedule(5), torch.Generator())


def test_controller_training_smoke_and_freeze():
    den, ntc, enc = stack()
    pairs = make_pairs(16, 4, DoseConfig(counts_full=1e5, blur_fwhm=0.5), seed=1)
    s = make_schedule(20, 5e-3, 0.2)
    before = [store_hash(m) for m in (den.encoder, den.decoder, ntc)]
    run = train_enc(enc, den, ntc, pairs.full.pixels, pairs.low.pixels, s, 500, 4, 1e-3, seed=0)
    after = [store_hash(m) for m in (den.encoder, den.decoder, ntc)]
    assert before == after
    sm = smoothed(run.losses, 50)
    assert sm[-1] < sm[0]


def test_select_level_tie_and_scale():
    levels = (100, 50, 20, 10, 4)
    assert select_level([0, 0, 1, 0, 0], levels) == 20
    assert select_level([0, 1, 0, 1, 0], levels) == 50
    assert select_level([1, 1, 1, 1, 1], levels) == 100
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.standard_normal(5)
        assert select_level(logits, levels) == select_level(logits * rng.uniform(0.01, 100), levels)


def test_route_logits_and_missing_entry():
    den, ntc, enc = stack()
    ntc5 = NTC(NtcConfig(dim=16, heads=2, depth=1))
    bank = EncBank({20: enc, 4: enc}, ntc5)
    d = route_logits(np.array([[0, 0, 5.0, 0, 0], [0, 0, 0, 0, 3.0]]), bank)
    assert d.levels == [20, 4] and d.classes == [2, 4]
    np.testing.assert_allclose(d.probabilities.sum(1), 1.0)
    with pytest.raises(RoutingError, match=r"\[4, 20\]"):
        route_logits(np.array([[9.0, 0, 0, 0, 0]]), bank)


def test_bank_validation():
    den, ntc, enc = stack()
    with pytest.raises(StateError):
        EncBank({}, ntc)
    with pytest.raises(StateError):
        EncBank({4: enc}, ntc, levels=(4, 10))


def test_singleton_bank_and_transparency():
    den, ntc, enc = stack()
    s = make_schedule(5, 1e-2, 0.2)
    with torch.no_grad():
        for p in enc.zero_convs.parameters():
            p.normal_(0, 0.1)
    bank = EncBank({10: enc}, ntc)
    low = np.random.default_rng(3).random((3, 1, 64, 64)).astype(np.float32)
    assert route_unknown_drf(low, bank).levels == [10, 10, 10]
    out, decision = reconstruct_unknown(low, bank, den, s, seed=4)
    direct = dcdm_reconstruct(low, enc, den, ntc, s, 4)
    assert out.pixels.tobytes() == direct.pixels.tobytes()
    assert decision.levels == [10] * 3
