import numpy as np
import pytest
import torch

from dcdm.checkpoint import blob_hash, load_state, read_manifest, save_store, store_hash
from dcdm.diffusion import Denoiser, DenoiserConfig, make_schedule
from dcdm.errors import StateError
from dcdm.models import load_denoiser, load_enc, load_ntc, save_denoiser, save_enc, save_ntc
from dcdm.enc import init_enc_from_encoder
from dcdm.ntc import NTC, NtcConfig
from dcdm.training import TrainRun, pretrain

TINY = (4, 4, 4, 4, 4, 4)


def test_blob_hash_matches_git():
    # `printf hello | git hash-object --stdin`
    assert blob_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"


def test_store_round_trip_and_tamper(tmp_path):
    torch.manual_seed(0)
    den = Denoiser(DenoiserConfig(1, TINY))
    s = make_schedule(20)
    h = save_denoiser(den, tmp_path / "den", s)
    back = load_denoiser(tmp_path / "den")
    assert store_hash(back) == h
    assert all(not p.requires_grad for p in back.parameters())
    man = read_manifest(tmp_path / "den" / "manifest.txt")
    assert man["store"]["kind"] == "denoiser" and man["schedule"]["T"] == "20"
    with pytest.raises(StateError):
        load_state(tmp_path / "den", "ntc")
    f = next((tmp_path / "den").glob("encoder.*.dcdm"))
    data = bytearray(f.read_bytes())
    data[-1] ^= 1
    f.write_bytes(bytes(data))
    with pytest.raises(StateError, match="hash"):
        load_state(tmp_path / "den")


def test_missing_checkpoint_is_descriptive(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_state(tmp_path / "nowhere")


def test_ntc_and_enc_round_trip(tmp_path):
    torch.manual_seed(1)
    ntc = NTC(NtcConfig(dim=8, heads=2, depth=1))
    save_ntc(ntc, tmp_path / "ntc", (100, 50, 20, 10, 4))
    back, levels = load_ntc(tmp_path / "ntc")
    assert levels == (100, 50, 20, 10, 4) and store_hash(back) == store_hash(ntc)
    den = Denoiser(DenoiserConfig(1, TINY))
    enc = init_enc_from_encoder(den, 8)
    with torch.no_grad():
        enc.zero_convs[0].bias.fill_(0.5)
    save_enc(enc, tmp_path / "enc_drf4", 4)
    enc2, level = load_enc(tmp_path / "enc_drf4", den)
    assert level == 4 and store_hash(enc2) == store_hash(enc)


def test_resume_reproduces_loss_sequence(tmp_path):
    imgs = np.random.default_rng(0).random((8, 1, 64, 64)).astype(np.float32)
    s = make_schedule(20, 1e-3, 0.1)

    def model():
        torch.manual_seed(5)
        return Denoiser(DenoiserConfig(1, TINY))

    straight = pretrain(model(), imgs, s, 6, 2, 1e-3, seed=7)
    first = pretrain(model(), imgs, s, 3, 2, 1e-3, seed=7)
    first.save(tmp_path / "run", "denoiser")
    resumed = TrainRun.resume(tmp_path / "run", model())
    pretrain(resumed.model, imgs, s, 3, 2, 1e-3, seed=7, run=resumed)
    assert resumed.losses == straight.losses
    assert store_hash(resumed.model) == store_hash(straight.model)
