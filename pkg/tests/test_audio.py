import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tqsed.audio import (ComplexSpectrogram, ConfigurationError, InvalidInputError, LogMelParams,
                         StftParams, TorchStft, Waveform, istft, logmel, read_wav, stft,
                         write_wav)

SR = 16000
P = StftParams()


def brute_dft(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    return (frame[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


def test_silence_shape():
    spec = stft(Waveform(np.zeros(SR), SR), P)
    assert spec.values.shape == (101, 513)
    assert not np.any(spec.values)


def test_fft_size_defaults():
    assert P.n_fft(16000) == 1024
    assert LogMelParams().stft_params().n_fft(16000) == 8192


def test_linearity():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(SR) * 0.1
    a, b = stft(Waveform(w, SR), P), stft(Waveform(2 * w, SR), P)
    np.testing.assert_allclose(b.values, 2 * a.values, rtol=0, atol=1e-12)


def test_sine_peak_and_frame_matches_brute_force_dft():
    t = np.arange(SR) / SR
    w = np.sin(2 * np.pi * 440 * t)
    spec = stft(Waveform(w, SR), P)
    # frame 50 lies entirely inside the signal: centre 50 * 160, span +-512
    frame = w[50 * 160 - 512:50 * 160 + 512] * P.window(SR)
    ref = brute_dft(frame)
    np.testing.assert_allclose(spec.values[50], ref, atol=1e-8)
    assert abs(np.argmax(np.abs(ref)) - 440 * 1024 / SR) <= 1


def test_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        stft(Waveform(np.zeros(0), SR), P)
    with pytest.raises(InvalidInputError):
        stft(Waveform(np.array([0.0, np.nan, 1.0]), SR), P)
    with pytest.raises(InvalidInputError):
        Waveform(np.zeros((2, 100)), SR)


def test_round_trip_100_random_waveforms():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.uniform(0.5, 10.0) * SR)
        w = rng.uniform(-1, 1, n)
        out = istft(stft(Waveform(w, SR), P))
        assert len(out) == n
        worst = max(worst, np.max(np.abs(out.samples - w)))
    assert worst < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=600, max_value=20000), st.integers(0, 2 ** 31 - 1))
def test_round_trip_property(n, seed):
    w = np.random.default_rng(seed).standard_normal(n)
    out = istft(stft(Waveform(w, SR), P))
    assert len(out) == n
    assert np.max(np.abs(out.samples - w)) < 1e-6


def test_zero_spectrogram_inverts_to_zeros():
    spec = ComplexSpectrogram(np.zeros((101, 513), complex), P, SR, 16000)
    out = istft(spec)
    assert len(out) == 16000 and not np.any(out.samples)


def test_istft_rejects_non_overlapping_hop():
    spec = stft(Waveform(np.zeros(4000), SR), StftParams(0.064, 0.05))
    with pytest.raises(ConfigurationError):
        istft(spec)


def test_parseval_energy():
    rng = np.random.default_rng(2)
    w = rng.standard_normal(3 * SR)
    spec = stft(Waveform(w, SR), P)
    n_fft, hop = P.n_fft(SR), P.hop_samples(SR)
    power = np.abs(spec.values) ** 2
    # one-sided spectrum: interior bins stand for two conjugate bins
    one_sided = power[:, 0] + power[:, -1] + 2 * power[:, 1:-1].sum(axis=1)
    spec_energy = one_sided.sum() / n_fft
    signal_energy = np.sum(w ** 2) * np.sum(P.window(SR) ** 2) / hop
    assert abs(spec_energy / signal_energy - 1) < 0.01


def test_deterministic():
    w = Waveform(np.random.default_rng(3).standard_normal(SR), SR)
    assert np.array_equal(stft(w, P).values, stft(w, P).values)
    assert np.array_equal(logmel(w).values, logmel(w).values)


def test_logmel_shape_and_silence():
    feat = logmel(Waveform(np.zeros(10 * SR), SR))
    assert feat.values.shape == (51, 64)
    np.testing.assert_array_equal(feat.values, np.log(1e-10))


def test_logmel_gain_is_additive_offset():
    w = np.random.default_rng(4).standard_normal(10 * SR) * 0.3
    full = logmel(Waveform(w, SR)).values
    half = logmel(Waveform(w / 2, SR)).values
    np.testing.assert_allclose(full - half, np.log(4.0), atol=1e-6)


def test_torch_stft_matches_numpy():
    w = np.random.default_rng(5).standard_normal(12345)
    ts = TorchStft(P, SR)
    spec = ts.forward(torch.tensor(w)[None])[0].numpy()
    np.testing.assert_allclose(spec, stft(Waveform(w, SR), P).values, atol=1e-8)
    back = ts.inverse(torch.tensor(spec)[None], len(w))[0].numpy()
    np.testing.assert_allclose(back, w, atol=1e-6)


def test_wav_io(tmp_path):
    w = Waveform(np.random.default_rng(6).uniform(-0.5, 0.5, 3200), SR)
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav", SR)
    np.testing.assert_allclose(back.samples, w.samples, atol=1e-7)
    with pytest.raises(InvalidInputError, match="resample"):
        read_wav(tmp_path / "a.wav", 32000)
    up = read_wav(tmp_path / "a.wav", 32000, resample=True)
    assert up.sample_rate == 32000 and len(up) == 6400


def test_wav_int16(tmp_path):
    import scipy.io.wavfile
    data = (np.sin(np.arange(1000) / 10) * 16000).astype(np.int16)
    scipy.io.wavfile.write(tmp_path / "i.wav", SR, data)
    np.testing.assert_allclose(read_wav(tmp_path / "i.wav").samples, data / 32768.0)
    scipy.io.wavfile.write(tmp_path / "st.wav", SR, np.zeros((100, 2), np.int16))
    with pytest.raises(InvalidInputError, match="mono"):
        read_wav(tmp_path / "st.wav")
