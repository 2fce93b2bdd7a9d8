"""Time-frequency front ends: complex STFT for the separator, log-mel for the detectors.

Framing convention used everywhere in the package: frames of ``fft_size``
samples, a Hann window of ``window_samples`` centred inside each frame, and
reflect padding of ``fft_size // 2`` on both ends, so the frame count is
``len(x) // hop + 1`` regardless of the window length.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

SUPPORTED_MODEL_RATES = (16000, 32000)


class InvalidInputError(ValueError):
    """Raised for malformed audio or query inputs."""


class ConfigurationError(ValueError):
    """Raised when a model or transform configuration is unusable."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(
                f"expected mono samples, got array of shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def next_pow2(n: int) -> int:
    return 1 << max(0, int(np.ceil(np.log2(n))))


@dataclass(frozen=True)
class StftParams:
    window_seconds: float = 0.064
    hop_seconds: float = 0.01
    window_kind: str = "hann"
    fft_size: int | None = None

    def __post_init__(self):
        if not 0 < self.hop_seconds <= self.window_seconds:
            raise ConfigurationError(
                f"need 0 < hop <= window, got hop={self.hop_seconds}, window={self.window_seconds}")
        if self.window_kind != "hann":
            raise ConfigurationError(f"unsupported window {self.window_kind!r}")

    def window_samples(self, sr: int) -> int:
        return int(round(self.window_seconds * sr))

    def hop_samples(self, sr: int) -> int:
        return int(round(self.hop_seconds * sr))

    def n_fft(self, sr: int) -> int:
        win = self.window_samples(sr)
        n = self.fft_size if self.fft_size is not None else next_pow2(win)
        if n < win:
            raise ConfigurationError(f"fft_size {n} shorter than window ({win} samples)")
        return n

    def window(self, sr: int) -> np.ndarray:
        """Periodic Hann of ``window_samples`` zero-padded (centred) to ``n_fft``."""
        win, n = self.window_samples(sr), self.n_fft(sr)
        w = scipy.signal.get_window("hann", win, fftbins=True)
        left = (n - win) // 2
        out = np.zeros(n)
        out[left:left + win] = w
        return out

    def check_invertible(self, sr: int):
        """Hann with hop <= window / 2 plus a nonzero overlap-add envelope."""
        win, hop = self.window_samples(sr), self.hop_samples(sr)
        if hop > win // 2:
            raise ConfigurationError(
                f"hop {hop} exceeds half the window ({win}); overlap-add reconstruction "
                "is not guaranteed")
        if not scipy.signal.check_NOLA("hann", win, win - hop):
            raise ConfigurationError("window/hop pair fails the nonzero overlap-add condition")


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # (T, F) complex
    params: StftParams
    sample_rate: int
    source_length: int

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LogMelParams:
    n_mels: int = 64
    window_seconds: float = 0.4
    hop_seconds: float = 0.2
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ConfigurationError("n_mels must be positive")

    def stft_params(self) -> StftParams:
        return StftParams(self.window_seconds, self.hop_seconds)

    def resolved_f_max(self, sr: int) -> float:
        f_max = sr / 2 if self.f_max is None else self.f_max
        if not self.f_min < f_max <= sr / 2:
            raise ConfigurationError(f"need f_min < f_max <= {sr / 2}, got {self.f_min}, {f_max}")
        return f_max


@dataclass
class LogMelFeature:
    values: np.ndarray  # (T, n_mels)
    params: LogMelParams = field(default_factory=LogMelParams)


def _check_waveform(w: Waveform):
    if len(w) == 0:
        raise InvalidInputError("empty waveform")
    if not np.all(np.isfinite(w.samples)):
        raise InvalidInputError("waveform contains non-finite samples")


def _frames(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    padded = np.pad(x, n_fft // 2, mode="reflect")
    n_frames = len(x) // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(w: Waveform, p: StftParams = StftParams()) -> ComplexSpectrogram:
    _check_waveform(w)
    sr = w.sample_rate
    n_fft, hop = p.n_fft(sr), p.hop_samples(sr)
    frames = _frames(w.samples, n_fft, hop) * p.window(sr)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=-1), p, sr, len(w))


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`."""
    p, sr = spec.params, spec.sample_rate
    p.check_invertible(sr)
    n_fft, hop = p.n_fft(sr), p.hop_samples(sr)
    window = p.window(sr)
    frames = np.fft.irfft(spec.values, n=n_fft, axis=-1) * window
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        out[t * hop:t * hop + n_fft] += frames[t]
        norm[t * hop:t * hop + n_fft] += window ** 2
    start = n_fft // 2
    out = out[start:start + spec.source_length]
    norm = norm[start:start + spec.source_length]
    out = np.where(norm > 1e-11, out / np.maximum(norm, 1e-11), 0.0)
    if out.shape[0] < spec.source_length:
        out = np.pad(out, (0, spec.source_length - out.shape[0]))
    return Waveform(out, sr)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """HTK-scale triangular filters, shape (n_mels, n_fft // 2 + 1), unit peak."""
    bin_hz = np.fft.rfftfreq(n_fft, 1.0 / sr)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (centre - lower)
    falling = (upper - bin_hz[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def logmel(w: Waveform, p: LogMelParams = LogMelParams()) -> LogMelFeature:
    sr = w.sample_rate
    sp = p.stft_params()
    spec = stft(w, sp)
    fb = mel_filterbank(sr, sp.n_fft(sr), p.n_mels, p.f_min, p.resolved_f_max(sr))
    mel_power = (np.abs(spec.values) ** 2) @ fb.T
    return LogMelFeature(np.log(mel_power + p.log_floor), p)


def n_frames(n_samples: int, hop_seconds: float, sr: int) -> int:
    return n_samples // int(round(hop_seconds * sr)) + 1


class TorchStft:
    """Differentiable twin of :func:`stft` / :func:`istft` for batched training.

    Uses the same window, padding and framing, so spectrograms agree with the
    numpy path to float precision.
    """

    def __init__(self, params: StftParams, sample_rate: int):
        params.check_invertible(sample_rate)
        self.params = params
        self.sample_rate = sample_rate
        self.n_fft = params.n_fft(sample_rate)
        self.hop = params.hop_samples(sample_rate)
        self.win_length = params.window_samples(sample_rate)
        self._window = torch.from_numpy(
            scipy.signal.get_window("hann", self.win_length, fftbins=True))

    def window(self, dtype):
        return self._window.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N) real -> (B, T, F) complex."""
        spec = torch.stft(x, self.n_fft, hop_length=self.hop, win_length=self.win_length,
                          window=self.window(x.dtype), center=True, pad_mode="reflect",
                          return_complex=True)
        return spec.transpose(1, 2)

    def inverse(self, spec: torch.Tensor, length: int) -> torch.Tensor:
        """(B, T, F) complex -> (B, length) real."""
        return torch.istft(spec.transpose(1, 2), self.n_fft, hop_length=self.hop,
                           win_length=self.win_length, window=self.window(spec.real.dtype),
                           center=True, length=length)


def read_wav(path, expected_rate: int | None = None, resample: bool = False) -> Waveform:
    """Load a mono PCM (int16) or float32 WAV as float64 samples in [-1, 1]."""
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and sr != expected_rate:
        if not resample:
            raise InvalidInputError(
                f"{path}: sample rate {sr} Hz does not match model rate {expected_rate} Hz "
                "(pass --resample to convert)")
        g = np.gcd(sr, expected_rate)
        samples = scipy.signal.resample_poly(samples, expected_rate // g, sr // g)
        sr = expected_rate
    return Waveform(samples, sr)


def write_wav(path, w: Waveform):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
