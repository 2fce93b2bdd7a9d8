"""Detection side: CRNN branches, the text-queried assembly and the two baselines."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio import ConfigurationError, LogMelParams, Waveform, logmel
from .separation import Separator, ShapeError, TextEncoder, separate


@dataclass(frozen=True)
class EventVocabulary:
    labels: tuple

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) == 0:
            raise ConfigurationError("vocabulary needs at least one label")
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate labels in vocabulary: {labels}")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def index(self, label):
        return self.labels.index(label)


MAESTRO_REAL_LABELS = EventVocabulary((
    "birds singing", "car", "people talking", "footsteps", "children voices", "wind blowing",
    "brakes squeaking", "large vehicle", "cutlery and dishes", "metro approaching",
    "metro leaving"))


@dataclass
class SoftLabelMatrix:
    values: np.ndarray  # (T, K)
    frame_hop_seconds: float
    vocabulary: EventVocabulary

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.vocabulary):
            raise ShapeError(f"label matrix of shape {self.values.shape} does not match "
                             f"{len(self.vocabulary)} classes")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("soft labels must lie in [0, 1]")


@dataclass
class TsedBranchConfig:
    conv_filters: int = 128
    n_mels: int = 64
    gru_hidden: int = 32
    dropout_rate: float = 0.2
    pool_factors: tuple = (5, 2, 2)
    dense_hidden: int = 32

    def __post_init__(self):
        if self.conv_filters <= 0:
            raise ConfigurationError("conv_filters must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError("dropout must be in [0, 1)")
        self.pool_factors = tuple(self.pool_factors)
        if self.pooled_bins < 1:
            raise ConfigurationError(
                f"pooling {self.pool_factors} collapses {self.n_mels} mel bins to nothing")

    @property
    def pooled_bins(self):
        bins = self.n_mels
        for p in self.pool_factors:
            bins //= p
        return bins

    def to_dict(self):
        d = asdict(self)
        d["pool_factors"] = list(self.pool_factors)
        return d


class CRNN(nn.Module):
    """Three conv blocks with frequency-only pooling, a Bi-GRU and a sigmoid head.

    Time resolution is never pooled, so the output has one row per input frame.
    """

    def __init__(self, config: TsedBranchConfig = TsedBranchConfig(), n_outputs: int = 1):
        super().__init__()
        self.config = config
        self.n_outputs = n_outputs
        f = config.conv_filters
        blocks = []
        cin = 1
        for pool in config.pool_factors:
            blocks += [nn.Conv2d(cin, f, 3, padding=1), nn.BatchNorm2d(f), nn.ReLU(),
                       nn.MaxPool2d((1, pool)), nn.Dropout(config.dropout_rate)]
            cin = f
        self.conv = nn.Sequential(*blocks)
        self.gru = nn.GRU(f * config.pooled_bins, config.gru_hidden, batch_first=True,
                          bidirectional=True)
        self.head = nn.Sequential(nn.Linear(2 * config.gru_hidden, config.dense_hidden), nn.ReLU(),
                                  nn.Dropout(config.dropout_rate),
                                  nn.Linear(config.dense_hidden, n_outputs))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) log-mel -> (B, T, n_outputs) scores in [0, 1]."""
        if feats.shape[-1] != self.config.n_mels:
            raise ShapeError(f"feature has {feats.shape[-1]} mel bins, branch expects "
                             f"{self.config.n_mels}")
        b, t, _ = feats.shape
        x = self.conv(feats.unsqueeze(1))  # (B, C, T, bins)
        x = x.permute(0, 2, 1, 3).reshape(b, t, -1)
        x, _ = self.gru(x)
        return torch.sigmoid(self.head(x))


def _as_batch(feat) -> torch.Tensor:
    values = feat.values if hasattr(feat, "values") else feat
    x = torch.as_tensor(np.asarray(values), dtype=torch.float32)
    return x.unsqueeze(0) if x.dim() == 2 else x


def branch_forward(feat, branch: CRNN) -> np.ndarray:
    """Score one log-mel feature (T, n_mels) with a single-output branch -> (T, 1)."""
    was_training = branch.training
    branch.eval()
    with torch.no_grad():
        out = branch(_as_batch(feat))[0].double().numpy()
    branch.train(was_training)
    return out


class TqSed(nn.Module):
    """K binary branches, one per vocabulary entry, each fed its own separated track.

    With ``separator=None`` the mixture goes straight into every branch; that is
    the second baseline framework.
    """

    def __init__(self, vocabulary: EventVocabulary, branch_config: TsedBranchConfig,
                 separator: Separator | None = None, encoder: TextEncoder | None = None,
                 logmel_params: LogMelParams = LogMelParams()):
        super().__init__()
        self.vocabulary = vocabulary
        self.branch_config = branch_config
        self.logmel_params = logmel_params
        self.branches = nn.ModuleList(CRNN(branch_config, 1) for _ in vocabulary)
        # kept out of the module tree so SED optimizers never see the separator
        self.__dict__["separator"] = separator
        self.__dict__["encoder"] = encoder
        if separator is not None:
            separator.requires_grad_(False)
            separator.eval()

    @property
    def framework(self):
        return "tq_sed" if self.separator is not None else "base2"

    def branch_inputs(self, x: Waveform) -> list:
        """Per-class log-mel features: of the separated track, or of the mixture itself."""
        if self.separator is None:
            feat = logmel(x, self.logmel_params).values
            return [feat] * len(self.vocabulary)
        return [logmel(separate(x, label, self.separator, self.encoder), self.logmel_params).values
                for label in self.vocabulary]

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, K, T, n_mels) per-class features -> (B, T, K) scores."""
        return torch.cat([b(feats[:, i]) for i, b in enumerate(self.branches)], dim=-1)


class Base1(nn.Module):
    """Single multi-label CRNN on the mixture."""

    framework = "base1"

    def __init__(self, vocabulary: EventVocabulary, branch_config: TsedBranchConfig,
                 logmel_params: LogMelParams = LogMelParams()):
        super().__init__()
        self.vocabulary = vocabulary
        self.branch_config = branch_config
        self.logmel_params = logmel_params
        self.crnn = CRNN(branch_config, len(vocabulary))

    def branch_inputs(self, x: Waveform) -> list:
        return [logmel(x, self.logmel_params).values]

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, 1, T, n_mels) -> (B, T, K)."""
        return self.crnn(feats[:, 0])


def predict(model, x: Waveform, hop_seconds: float | None = None) -> SoftLabelMatrix:
    feats = torch.as_tensor(np.stack(model.branch_inputs(x)), dtype=torch.float32)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        scores = model(feats)[0].double().numpy()
    model.train(was_training)
    hop = model.logmel_params.hop_seconds if hop_seconds is None else hop_seconds
    return SoftLabelMatrix(scores, hop, model.vocabulary)


def tqsed_forward(x: Waveform, model: TqSed) -> SoftLabelMatrix:
    return predict(model, x)


def base1_forward(x: Waveform, model: Base1) -> SoftLabelMatrix:
    return predict(model, x)


def mse_loss(pred, label):
    """Mean squared elementwise difference between two (T, K) matrices or tensors."""
    if isinstance(pred, SoftLabelMatrix) or isinstance(label, SoftLabelMatrix):
        if (isinstance(pred, SoftLabelMatrix) and isinstance(label, SoftLabelMatrix)
                and pred.vocabulary != label.vocabulary):
            raise ShapeError("prediction and label vocabularies differ")
        pred = getattr(pred, "values", pred)
        label = getattr(label, "values", label)
    if tuple(pred.shape) != tuple(label.shape):
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(label.shape)}")
    if isinstance(pred, torch.Tensor):
        return ((pred - label) ** 2).mean()
    return float(np.mean((np.asarray(pred) - np.asarray(label)) ** 2))


def count_parameters(model: nn.Module) -> int:
    """Learnable scalars; a frozen separator held by TqSed is not part of the module tree."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_sed_model(framework: str, vocabulary: EventVocabulary, branch_config: TsedBranchConfig,
                    separator: Separator | None = None, encoder=None,
                    logmel_params: LogMelParams = LogMelParams()):
    if framework == "tq_sed":
        if separator is None or encoder is None:
            raise ConfigurationError("tq_sed needs a separator checkpoint and its text encoder")
        return TqSed(vocabulary, branch_config, separator, encoder, logmel_params)
    if framework == "base2":
        return TqSed(vocabulary, branch_config, None, None, logmel_params)
    if framework == "base1":
        return Base1(vocabulary, branch_config, logmel_params)
    raise ConfigurationError(f"unknown framework {framework!r}")
