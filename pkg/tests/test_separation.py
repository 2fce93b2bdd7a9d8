import json
import zipfile

import numpy as np
import pytest
import torch

from tqsed.audio import ConfigurationError, InvalidInputError, StftParams, Waveform, stft
from tqsed.checkpoint import (CheckpointFormatError, load_separator, save_separator,
                              state_checksum)
from tqsed.sed import MAESTRO_REAL_LABELS
from tqsed.separation import (DPRNN, FiLM, DprnnConfig, LookupTextEncoder, SeparationConfig,
                              Separator, ShapeError, dprnn_forward, encode_text, film_modulate,
                              l1_loss, separate, separation_forward)

SR = 16000
SMALL = SeparationConfig(channels=(4, 8), dprnn=DprnnConfig(8))


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    sep = Separator(SMALL).eval()
    enc = LookupTextEncoder(["car", "wind blowing"], 64)
    return sep, enc


def randomize_batchnorm(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.copy_(torch.randn(m.num_features, generator=g))
                m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)


# text encoder -----------------------------------------------------------------------

def test_encoder_deterministic_and_distinct():
    enc = LookupTextEncoder(MAESTRO_REAL_LABELS.labels, 64)
    a, b = encode_text(enc, "car"), encode_text(enc, "car")
    assert np.array_equal(a, b)
    assert a.shape == (enc.embedding_dim,)
    vecs = np.stack([encode_text(enc, q) for q in MAESTRO_REAL_LABELS])
    gaps = [np.max(np.abs(vecs[i] - vecs[j])) for i in range(11) for j in range(i + 1, 11)]
    assert min(gaps) > 1e-3
    assert not np.array_equal(encode_text(enc, "car"), encode_text(enc, "wind blowing"))


def test_encoder_rejects_bad_queries():
    enc = LookupTextEncoder(["car"], 8)
    with pytest.raises(InvalidInputError):
        encode_text(enc, "   ")
    with pytest.raises(InvalidInputError, match="vocabulary"):
        encode_text(enc, "bicycle")
    assert np.array_equal(encode_text(enc, " car "), encode_text(enc, "car"))


# FiLM ---------------------------------------------------------------------------------

def test_film_identity_and_constant():
    h = torch.randn(5, 7, 9)
    assert torch.equal(film_modulate(h, torch.ones(5), torch.zeros(5)), h)
    assert torch.equal(film_modulate(h, torch.zeros(5), torch.ones(5)), torch.ones_like(h))


def test_film_matches_loop_oracle():
    rng = np.random.default_rng(0)
    h, g, b = rng.standard_normal((3, 4, 5)), rng.standard_normal(3), rng.standard_normal(3)
    out = film_modulate(torch.tensor(h), torch.tensor(g), torch.tensor(b)).numpy()
    expect = np.empty_like(h)
    for c in range(3):
        for t in range(4):
            for f in range(5):
                expect[c, t, f] = g[c] * h[c, t, f] + b[c]
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-15)


def test_film_channel_mismatch():
    with pytest.raises(ShapeError):
        film_modulate(torch.randn(4, 3, 3), torch.ones(5), torch.zeros(5))


def test_film_layer_starts_as_identity_for_zero_embedding():
    film = FiLM(16, 6)
    h = torch.randn(2, 6, 3, 3)
    assert torch.allclose(film(h, torch.zeros(2, 16)), h)


# DPRNN --------------------------------------------------------------------------------

def test_dprnn_shape():
    block = DPRNN(32, DprnnConfig(16))
    with torch.no_grad():
        assert dprnn_forward(torch.randn(32, 100, 64), block).shape == (32, 100, 64)


def test_dprnn_default_init_is_identity():
    block = DPRNN(6, DprnnConfig(5))
    h = torch.randn(2, 6, 7, 9)
    with torch.no_grad():
        assert torch.equal(block(h), h)
    assert not torch.equal(DPRNN(6, DprnnConfig(5, zero_init_residual=False))(h), h)


def test_dprnn_zero_weights_is_identity():
    block = DPRNN(6, DprnnConfig(5))
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
        h = torch.randn(2, 6, 7, 9)
        assert torch.equal(block(h), h)


def test_dprnn_batch_permutation():
    block = DPRNN(4, DprnnConfig(6)).double()
    h = torch.randn(5, 4, 6, 7, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        torch.testing.assert_close(block(h)[perm], block(h[perm]), rtol=1e-12, atol=1e-12)


def _fd_relative_errors(module, params, loss_fn, eps=1e-6):
    errors = {}
    for name, p in params:
        module.zero_grad()
        loss_fn().backward()
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            numeric.view(-1)[i] = (up - down) / (2 * eps)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        errors[name] = (analytic - numeric).norm().item() / scale
    return errors


def test_gradient_check_film_and_dprnn_projections():
    torch.manual_seed(0)
    c, t, f, d = 4, 8, 8, 6

    class Mini(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.film = FiLM(d, c)
            self.dprnn = DPRNN(c, DprnnConfig(3))

        def forward(self, h, e):
            return self.dprnn(self.film(h, e))

    model = Mini().double()
    # move off the identity initialization so every projection carries gradient
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.5)
    h = torch.randn(1, c, t, f, dtype=torch.float64)
    e = torch.randn(1, d, dtype=torch.float64)
    target = torch.randn(1, c, t, f, dtype=torch.float64)
    params = [(n, p) for n, p in model.named_parameters() if "proj" in n]
    assert {n.split(".")[0] for n, _ in params} == {"film", "dprnn"}
    errors = _fd_relative_errors(model, params, lambda: l1_loss(model(h, e), target))
    assert max(errors.values()) < 1e-4, errors


# separator ----------------------------------------------------------------------------

def test_forced_masks(small_model):
    sep, enc = small_model
    x = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 8000), SR)
    spec = stft(x, SMALL.stft)
    emb = encode_text(enc, "car")
    probe = Separator(SMALL).eval()
    probe.load_state_dict(sep.state_dict())
    probe.force_mask(1.0)
    out = separation_forward(spec, emb, probe)
    assert np.array_equal(out.values, spec.values)
    probe.force_mask(0.0)
    assert not np.any(separation_forward(spec, emb, probe).values)


def test_mask_bounded_on_random_forwards(small_model):
    sep, enc = small_model
    rng = np.random.default_rng(1)
    for i in range(20):
        model = Separator(SMALL).eval()
        torch.manual_seed(i)
        for p in model.parameters():
            torch.nn.init.normal_(p, std=0.5)
        randomize_batchnorm(model, i)
        x = Waveform(rng.uniform(-1, 1, int(rng.integers(1600, 8000))), SR)
        spec = stft(x, SMALL.stft)
        out = separation_forward(spec, rng.standard_normal(64), model)
        assert out.values.shape == spec.values.shape
        assert np.all(np.abs(out.values) <= np.abs(spec.values) + 1e-12)


def test_separate_length_and_determinism(small_model):
    sep, enc = small_model
    for n in (1234, 16000, 16001):
        x = Waveform(np.random.default_rng(n).uniform(-0.5, 0.5, n), SR)
        a = separate(x, "car", sep, enc)
        assert len(a) == n
        assert np.array_equal(a.samples, separate(x, "car", sep, enc).samples)


def test_separate_rejects_wrong_rate(small_model):
    sep, enc = small_model
    with pytest.raises(InvalidInputError):
        separate(Waveform(np.zeros(3200), 32000), "car", sep, enc)


def test_spectrogram_config_mismatch(small_model):
    sep, enc = small_model
    spec = stft(Waveform(np.zeros(3200), SR), StftParams(0.032, 0.01))
    with pytest.raises(ConfigurationError):
        separation_forward(spec, encode_text(enc, "car"), sep)


def test_batched_forward_preserves_length(small_model):
    sep, enc = small_model
    with torch.no_grad():
        y = sep(torch.randn(3, 5000), enc.embed(["car", "car", "wind blowing"]))
    assert y.shape == (3, 5000)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SeparationConfig(sample_rate=22050)
    with pytest.raises(ConfigurationError):
        SeparationConfig(stft=StftParams(0.064, 0.05))
    assert SeparationConfig.from_dict(SMALL.to_dict()) == SMALL


def test_l1_loss():
    rng = np.random.default_rng(2)
    s = rng.standard_normal(500)
    assert l1_loss(s, s) == 0.0
    assert l1_loss(s + 0.1, s) == pytest.approx(0.1, abs=1e-12)
    est = rng.standard_normal(500)
    oracle = sum(abs(a - b) for a, b in zip(est, s)) / len(s)
    assert abs(l1_loss(est, s) - oracle) < 1e-12
    with pytest.raises(ShapeError):
        l1_loss(s, s[:-1])


# checkpoint -----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_model):
    sep, enc = small_model
    save_separator(tmp_path / "a.ckpt", sep, enc)
    sep2, enc2 = load_separator(tmp_path / "a.ckpt")
    assert state_checksum(sep2) == state_checksum(sep)
    assert enc2.vocabulary == enc.vocabulary
    x = Waveform(np.random.default_rng(3).uniform(-0.5, 0.5, 4000), SR)
    assert np.array_equal(separate(x, "car", sep, enc).samples,
                          separate(x, "car", sep2, enc2).samples)
    save_separator(tmp_path / "b.ckpt", sep2, enc2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_unknown_format(tmp_path, small_model):
    sep, enc = small_model
    save_separator(tmp_path / "a.ckpt", sep, enc)
    with zipfile.ZipFile(tmp_path / "a.ckpt") as zf:
        items = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(items["meta.json"])
    meta["format"] = "tqsed-checkpoint/99"
    items["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
        for n, data in items.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointFormatError, match="unsupported"):
        load_separator(tmp_path / "bad.ckpt")
