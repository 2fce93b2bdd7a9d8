"""Text-queried separator: ResUNet encoder/decoder with a dual-path recurrent bottleneck.

The query embedding conditions every encoder and decoder block through FiLM.
The network predicts a sigmoid magnitude mask that is applied to the mixture
STFT; the mixture phase is reused.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import (SUPPORTED_MODEL_RATES, ComplexSpectrogram, ConfigurationError,
                    InvalidInputError, StftParams, TorchStft, Waveform, istft, stft)


class ShapeError(ValueError):
    pass


def normalize_query(text: str) -> str:
    if not isinstance(text, str) or not text.strip():
        raise InvalidInputError("text query must be a non-empty string")
    return text.strip()


class TextEncoder(Protocol):
    encoder_id: str
    embedding_dim: int

    def embed(self, texts: Sequence[str]) -> torch.Tensor:
        ...


class LookupTextEncoder(nn.Module):
    """Closed-vocabulary query encoder: one trainable vector per known query string.

    Stands in for a pretrained CLAP text tower; anything exposing ``embed`` and
    ``embedding_dim`` can replace it.
    """

    encoder_id = "lookup"

    def __init__(self, vocabulary: Sequence[str], embedding_dim: int = 64, seed: int = 0):
        super().__init__()
        vocab = [normalize_query(q) for q in vocabulary]
        if len(set(vocab)) != len(vocab):
            raise ConfigurationError("query vocabulary contains duplicates")
        self.vocabulary = list(vocab)
        self.embedding_dim = embedding_dim
        self._index = {q: i for i, q in enumerate(self.vocabulary)}
        self.table = nn.Embedding(len(vocab), embedding_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.table.weight.copy_(torch.randn(len(vocab), embedding_dim, generator=gen))

    def index(self, text: str) -> int:
        q = normalize_query(text)
        try:
            return self._index[q]
        except KeyError:
            raise InvalidInputError(
                f"query {q!r} is outside the encoder vocabulary {self.vocabulary}") from None

    def embed(self, texts: Sequence[str]) -> torch.Tensor:
        idx = torch.tensor([self.index(t) for t in texts], dtype=torch.long)
        return self.table(idx)


def encode_text(enc: TextEncoder, text: str) -> np.ndarray:
    with torch.no_grad():
        return enc.embed([text])[0].detach().cpu().numpy().astype(np.float64)


def film_modulate(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """out[c, t, f] = gamma[c] * h[c, t, f] + beta[c]; a leading batch axis is allowed."""
    c = h.shape[-3]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeError(f"FiLM parameters have {gamma.shape[-1]}/{beta.shape[-1]} channels, "
                         f"features have {c}")
    return gamma[..., :, None, None] * h + beta[..., :, None, None]


class FiLM(nn.Module):
    """Projects a query embedding to per-channel (gamma, beta)."""

    def __init__(self, embedding_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(embedding_dim, 2 * channels)
        with torch.no_grad():
            self.proj.weight.mul_(0.1)
            self.proj.bias.zero_()
            self.proj.bias[:channels] = 1.0

    def forward(self, h, emb):
        gamma, beta = self.proj(emb).split(self.channels, dim=-1)
        return film_modulate(h, gamma, beta)


@dataclass
class DprnnConfig:
    hidden_size: int = 64
    uses_residual: bool = True
    uses_layer_norm: bool = True
    zero_init_residual: bool = True  # residual branch starts silent, block = identity

    def __post_init__(self):
        if self.hidden_size <= 0:
            raise ConfigurationError("DPRNN hidden_size must be positive")


class _DualPathPass(nn.Module):
    def __init__(self, channels, cfg: DprnnConfig):
        super().__init__()
        self.rnn = nn.LSTM(channels, cfg.hidden_size, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * cfg.hidden_size, channels)
        self.norm = nn.LayerNorm(channels) if cfg.uses_layer_norm else nn.Identity()
        self.residual = cfg.uses_residual
        if cfg.uses_residual and cfg.zero_init_residual:
            last = self.norm if cfg.uses_layer_norm else self.proj
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)

    def forward(self, seq):
        # seq: (N, L, C), one independent sequence per row
        out, _ = self.rnn(seq)
        out = self.norm(self.proj(out))
        return seq + out if self.residual else out


class DPRNN(nn.Module):
    """Bi-LSTM over time for every frequency position, then over frequency for every frame."""

    def __init__(self, channels: int, cfg: DprnnConfig = DprnnConfig()):
        super().__init__()
        self.time_pass = _DualPathPass(channels, cfg)
        self.freq_pass = _DualPathPass(channels, cfg)

    def forward(self, h):
        squeeze = h.dim() == 3
        if squeeze:
            h = h.unsqueeze(0)
        b, c, t, f = h.shape
        x = h.permute(0, 3, 2, 1).reshape(b * f, t, c)
        x = self.time_pass(x).reshape(b, f, t, c)
        x = x.permute(0, 2, 1, 3).reshape(b * t, f, c)
        x = self.freq_pass(x).reshape(b, t, f, c).permute(0, 3, 1, 2)
        return x[0] if squeeze else x


def dprnn_forward(h: torch.Tensor, block: DPRNN) -> torch.Tensor:
    return block(h)


@dataclass
class SeparationConfig:
    sample_rate: int = 16000
    stft: StftParams = field(default_factory=StftParams)
    channels: tuple = (32, 64, 128, 256)
    dprnn: DprnnConfig | None = field(default_factory=DprnnConfig)
    embedding_dim: int = 64
    mask_kind: str = "magnitude_mask"

    def __post_init__(self):
        if self.sample_rate not in SUPPORTED_MODEL_RATES:
            raise ConfigurationError(
                f"model sample rate must be one of {SUPPORTED_MODEL_RATES}, got {self.sample_rate}")
        if self.mask_kind != "magnitude_mask":
            raise ConfigurationError(f"unsupported mask kind {self.mask_kind!r}")
        if len(self.channels) == 0 or any(c <= 0 for c in self.channels):
            raise ConfigurationError("channel widths must be positive")
        self.channels = tuple(int(c) for c in self.channels)
        self.stft.check_invertible(self.sample_rate)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stft"] = StftParams(**d["stft"])
        d["dprnn"] = DprnnConfig(**d["dprnn"]) if d.get("dprnn") is not None else None
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class _ConvBN(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                         nn.BatchNorm2d(cout))


class EncoderBlock(nn.Module):
    """Stride-2 downsampling conv followed by a residual conv pair."""

    def __init__(self, cin, cout, embedding_dim):
        super().__init__()
        self.down = _ConvBN(cin, cout, stride=2)
        self.conv1 = _ConvBN(cout, cout)
        self.conv2 = _ConvBN(cout, cout)
        self.film = FiLM(embedding_dim, cout)

    def forward(self, x, emb):
        x = F.relu(self.down(x))
        x = F.relu(x + self.conv2(F.relu(self.conv1(x))))
        return self.film(x, emb)


class DecoderBlock(nn.Module):
    def __init__(self, cin, cskip, cout, embedding_dim):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False)
        self.up_bn = nn.BatchNorm2d(cout)
        self.merge = _ConvBN(cout + cskip, cout)
        self.conv = _ConvBN(cout, cout)
        self.film = FiLM(embedding_dim, cout)

    def forward(self, x, skip, emb):
        x = F.relu(self.up_bn(self.up(x)))
        x = F.relu(self.merge(torch.cat([x, skip], dim=1)))
        x = F.relu(x + self.conv(x))
        return self.film(x, emb)


class Separator(nn.Module):
    """Query-conditioned magnitude-mask separator operating on STFT frames."""

    def __init__(self, config: SeparationConfig = SeparationConfig()):
        super().__init__()
        self.config = config
        ch, d = config.channels, config.embedding_dim
        self.front = TorchStft(config.stft, config.sample_rate)
        self.encoders = nn.ModuleList(
            EncoderBlock(cin, cout, d) for cin, cout in zip((1,) + ch[:-1], ch))
        self.bottleneck = DPRNN(ch[-1], config.dprnn) if config.dprnn is not None else None
        skips = (1,) + ch[:-1]
        outs = ch[:-1][::-1] + (ch[0],)
        self.decoders = nn.ModuleList(
            DecoderBlock(cin, cskip, cout, d)
            for cin, cskip, cout in zip(ch[::-1], skips[::-1], outs))
        self.head = nn.Conv2d(ch[0], 1, 1)

    @property
    def stride(self):
        return 2 ** len(self.config.channels)

    def mask(self, mag: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """(B, T, F) magnitudes, (B, D) embeddings -> (B, T, F) mask in [0, 1]."""
        b, t, f = mag.shape
        s = self.stride
        x = torch.log1p(mag).unsqueeze(1)
        x = F.pad(x, (0, -f % s, 0, -t % s))
        skips = []
        for enc in self.encoders:
            skips.append(x)
            x = enc(x, emb)
        if self.bottleneck is not None:
            x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip, emb)
        logits = self.head(x)[:, 0, :t, :f]
        return torch.sigmoid(logits)

    def forward(self, mixture: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """(B, N) mixture waveforms -> (B, N) separated waveforms."""
        spec = self.front.forward(mixture)
        m = self.mask(spec.abs(), emb)
        return self.front.inverse(spec * m, mixture.shape[-1])

    def force_mask(self, value: float):
        """Test hook: make the predicted mask a constant 0 or 1 for every input."""
        if value not in (0.0, 1.0):
            raise ValueError("mask can only be forced to 0 or 1")
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.fill_(1000.0 if value == 1.0 else -1000.0)


def separation_forward(mixture_spec: ComplexSpectrogram, emb: np.ndarray | torch.Tensor,
                       model: Separator) -> ComplexSpectrogram:
    cfg = model.config
    if mixture_spec.sample_rate != cfg.sample_rate or mixture_spec.params != cfg.stft:
        raise ConfigurationError("spectrogram parameters do not match the separator config")
    emb = torch.as_tensor(np.asarray(emb), dtype=torch.float32).reshape(1, -1)
    if emb.shape[-1] != cfg.embedding_dim:
        raise ShapeError(f"embedding has {emb.shape[-1]} dims, model expects {cfg.embedding_dim}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        mag = torch.as_tensor(np.abs(mixture_spec.values), dtype=torch.float32)[None]
        m = model.mask(mag, emb)[0].double().numpy()
    model.train(was_training)
    return ComplexSpectrogram(mixture_spec.values * m, mixture_spec.params,
                              mixture_spec.sample_rate, mixture_spec.source_length)


def separate(x: Waveform, query: str, model: Separator, enc: TextEncoder) -> Waveform:
    cfg = model.config
    if x.sample_rate != cfg.sample_rate:
        raise InvalidInputError(
            f"mixture is {x.sample_rate} Hz but the separator runs at {cfg.sample_rate} Hz")
    emb = encode_text(enc, query)
    return istft(separation_forward(stft(x, cfg.stft), emb, model))


def l1_loss(est, ref):
    """Mean absolute sample difference; accepts numpy arrays, Waveforms or tensors."""
    if isinstance(est, Waveform):
        est = est.samples
    if isinstance(ref, Waveform):
        ref = ref.samples
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if isinstance(est, torch.Tensor):
        return (est - ref).abs().mean()
    return float(np.mean(np.abs(np.asarray(est) - np.asarray(ref))))
