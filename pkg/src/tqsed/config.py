"""JSON run configuration shared by every CLI subcommand.

Schema (all sections optional; omitted keys take the library defaults)::

    {
      "seed": 0,
      "synth":       {"preset": "three_class" | "four_class_overlap" | null,
                      "n_clips": 200, <SynthConfig fields>},
      "separation":  {<SeparationConfig fields>, "dprnn": {...} | null},
      "lass_train":  {<LassTrainConfig fields>},
      "lass_eval":   {"n_eval_clips": 30},
      "sed_branch":  {<TsedBranchConfig fields>},
      "sed_train":   {<SedTrainConfig fields>},
      "folds":       {"k": 5},
      "metrics":     {"segment_seconds": 1.0, "label_binarize_threshold": 0.5,
                      "er_threshold": 0.5, "threshold_source": "evaluation" | "validation"}
    }

Unknown keys at any level are rejected before any work starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .audio import ConfigurationError, StftParams
from .datagen import SynthConfig, four_class_overlap_config, three_class_config
from .sed import TsedBranchConfig
from .separation import DprnnConfig, SeparationConfig
from .training import LassTrainConfig, SedTrainConfig

PRESETS = {"three_class": three_class_config, "four_class_overlap": four_class_overlap_config}
THRESHOLD_SOURCES = ("evaluation", "validation")


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed: set):
    if not isinstance(given, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) and k != "vocabulary" and k != "prototypes" else v
            for k, v in d.items()}


@dataclass
class RunConfig:
    seed: int = 0
    synth: dict = field(default_factory=dict)
    separation: dict = field(default_factory=dict)
    lass_train: dict = field(default_factory=dict)
    lass_eval: dict = field(default_factory=dict)
    sed_branch: dict = field(default_factory=dict)
    sed_train: dict = field(default_factory=dict)
    folds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_keys("synth", self.synth, _field_names(SynthConfig) | {"preset", "n_clips"})
        _check_keys("separation", self.separation, _field_names(SeparationConfig))
        if isinstance(self.separation.get("stft"), dict):
            _check_keys("separation.stft", self.separation["stft"], _field_names(StftParams))
        if isinstance(self.separation.get("dprnn"), dict):
            _check_keys("separation.dprnn", self.separation["dprnn"], _field_names(DprnnConfig))
        _check_keys("lass_train", self.lass_train, _field_names(LassTrainConfig))
        _check_keys("lass_eval", self.lass_eval, {"n_eval_clips"})
        _check_keys("sed_branch", self.sed_branch, _field_names(TsedBranchConfig))
        _check_keys("sed_train", self.sed_train, _field_names(SedTrainConfig))
        _check_keys("folds", self.folds, {"k"})
        _check_keys("metrics", self.metrics, {"segment_seconds", "label_binarize_threshold",
                                              "er_threshold", "threshold_source"})
        preset = self.synth.get("preset")
        if preset is not None and preset not in PRESETS:
            raise ConfigurationError(f"unknown synth preset {preset!r}; choose from {sorted(PRESETS)}")
        if self.metric("threshold_source") not in THRESHOLD_SOURCES:
            raise ConfigurationError(f"threshold_source must be one of {THRESHOLD_SOURCES}")
        # build every typed config once so value errors surface before any work
        try:
            self.synth_config()
            self.separation_config()
            self.lass_train_config()
            self.sed_branch_config()
            self.sed_train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid configuration: {exc}") from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys("<root>", d, _field_names(cls))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") \
                from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, **top) -> "RunConfig":
        d = self.to_dict()
        for key, value in top.items():
            section, _, name = key.partition(".")
            if name:
                d[section][name] = value
            else:
                d[section] = value
        return RunConfig.from_dict(d)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # typed views ---------------------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        d = {k: v for k, v in self.synth.items() if k not in ("preset", "n_clips")}
        d = _tuples(d)
        d.setdefault("seed", self.seed)
        preset = self.synth.get("preset")
        if preset is None and "vocabulary" not in d:
            preset = "three_class"
        if preset is not None:
            seed = d.pop("seed")
            return PRESETS[preset](seed=seed, **d)
        return SynthConfig(**d)

    def n_clips(self) -> int:
        return int(self.synth.get("n_clips", 200))

    def separation_config(self) -> SeparationConfig:
        d = dataclasses.asdict(SeparationConfig())
        d.update(self.separation)
        if isinstance(d.get("stft"), dict):
            d["stft"] = {**dataclasses.asdict(StftParams()), **d["stft"]}
        return SeparationConfig.from_dict(d)

    def lass_train_config(self) -> LassTrainConfig:
        d = _tuples(self.lass_train)
        d.setdefault("seed", self.seed)
        return LassTrainConfig(**d)

    def n_eval_clips(self) -> int:
        return int(self.lass_eval.get("n_eval_clips", 30))

    def sed_branch_config(self) -> TsedBranchConfig:
        return TsedBranchConfig(**_tuples(self.sed_branch))

    def sed_train_config(self) -> SedTrainConfig:
        d = _tuples(self.sed_train)
        d.setdefault("seed", self.seed)
        return SedTrainConfig(**d)

    def k_folds(self) -> int:
        return int(self.folds.get("k", 5))

    def metric(self, name):
        defaults = {"segment_seconds": 1.0, "label_binarize_threshold": 0.5,
                    "er_threshold": 0.5, "threshold_source": "evaluation"}
        return self.metrics.get(name, defaults[name])


def load_run_config(path=None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(Path(path))
