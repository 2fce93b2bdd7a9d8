"""Seeded synthetic polyphonic clips plus the manifest formats used by both training stages.

Directory layout written by :func:`synth_generate`::

    audio/<clip>.wav            mixture (sum of all stems)
    stems/<class>/<clip>.wav    one isolated stem per class
    labels/<clip>.csv           T x K soft labels, header row = class names
    manifest_lass.jsonl         {"audio_path", "caption", "duration_seconds", "clip_id"}
    manifest_sed.jsonl          {"audio_path", "label_path", "clip_id"}

Paths inside manifests are relative to the manifest's directory.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from .audio import LogMelParams, Waveform, n_frames, read_wav, write_wav
from .sed import EventVocabulary, SoftLabelMatrix


class ManifestError(ValueError):
    pass


@dataclass
class Prototype:
    """Acoustic template for one class: ``tone`` (f0), ``noise`` (f0..f1 band) or ``chirp`` (f0 -> f1)."""

    kind: str
    f0: float
    f1: float | None = None

    def band(self):
        hi = self.f0 if self.f1 is None else self.f1
        return min(self.f0, hi), max(self.f0, hi)

    def render(self, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
        """Unit-RMS signal of ``n`` samples."""
        t = np.arange(n) / sr
        if self.kind == "tone":
            return np.sqrt(2) * np.sin(2 * np.pi * self.f0 * t + rng.uniform(0, 2 * np.pi))
        if self.kind == "chirp":
            dur = n / sr
            phase = 2 * np.pi * (self.f0 * t + (self.f1 - self.f0) * t ** 2 / (2 * dur))
            return np.sqrt(2) * np.sin(phase + rng.uniform(0, 2 * np.pi))
        if self.kind == "noise":
            spec = np.fft.rfft(rng.standard_normal(n))
            freqs = np.fft.rfftfreq(n, 1 / sr)
            lo, hi = self.band()
            spec[(freqs < lo) | (freqs > hi)] = 0
            x = np.fft.irfft(spec, n)
            rms = np.sqrt(np.mean(x ** 2))
            return x / rms if rms > 0 else x
        raise ValueError(f"unknown prototype kind {self.kind!r}")


@dataclass
class SynthConfig:
    vocabulary: list
    prototypes: list
    sample_rate: int = 16000
    clip_seconds: float = 5.0
    events_per_clip: tuple = (2, 5)
    event_seconds: tuple = (0.8, 2.5)
    level_db: tuple = (-30.0, -15.0)
    overlap_bias: float = 0.5
    fade_seconds: float = 0.02
    gate_dbfs: float = -60.0
    label_hop_seconds: float = 0.2
    label_window_seconds: float = 0.4
    seed: int = 0

    def __post_init__(self):
        self.prototypes = [p if isinstance(p, Prototype) else Prototype(**p)
                           for p in self.prototypes]
        if len(self.prototypes) != len(self.vocabulary):
            raise ValueError("need exactly one prototype per class")
        bands = sorted((p.band(), name) for p, name in zip(self.prototypes, self.vocabulary))
        for (a, na), (b, nb) in zip(bands, bands[1:]):
            if b[0] <= a[1]:
                warnings.warn(f"prototype bands of {na!r} {a} and {nb!r} {b} overlap; "
                              "separation targets will not be spectrally disjoint")

    @property
    def vocab(self) -> EventVocabulary:
        return EventVocabulary(tuple(self.vocabulary))

    def to_dict(self):
        return asdict(self)


def three_class_config(seed: int = 0, **kw) -> SynthConfig:
    return SynthConfig(
        vocabulary=["tone_low", "noise_mid", "chirp_high"],
        prototypes=[Prototype("tone", 440.0), Prototype("noise", 1500.0, 2500.0),
                    Prototype("chirp", 4000.0, 6000.0)],
        seed=seed, **kw)


def four_class_overlap_config(seed: int = 0, **kw) -> SynthConfig:
    """Four tones 50 Hz apart with events forced to overlap.

    Neighbours sit about three STFT bins apart at the separator's 64 ms window
    but inside one mel filter of the 64-band detector front end, so a
    separator has information the log-mel detector alone lacks.
    """
    kw.setdefault("overlap_bias", 0.9)
    kw.setdefault("events_per_clip", (3, 6))
    kw.setdefault("level_db", (-35.0, -10.0))
    return SynthConfig(
        vocabulary=["tone_a", "tone_b", "tone_c", "tone_d"],
        prototypes=[Prototype("tone", f) for f in (2000.0, 2050.0, 2100.0, 2150.0)],
        seed=seed, **kw)


@dataclass
class SynthClip:
    clip_id: str
    mixture: np.ndarray
    stems: dict  # class -> samples
    labels: np.ndarray  # (T, K)
    events: list = field(default_factory=list)  # (class, onset_s, offset_s, level_db)


@dataclass
class SynthDataset:
    config: SynthConfig
    clips: list

    def label_matrix(self, i) -> SoftLabelMatrix:
        return SoftLabelMatrix(self.clips[i].labels, self.config.label_hop_seconds,
                               self.config.vocab)


def frame_rms(x: np.ndarray, hop: int, win: int) -> np.ndarray:
    """RMS over a rectangular window centred on every hop, zero-padded at the edges."""
    n_out = len(x) // hop + 1
    csum = np.concatenate([[0.0], np.cumsum(np.pad(x ** 2, win // 2))])
    starts = hop * np.arange(n_out)
    return np.sqrt((csum[starts + win] - csum[starts]) / win)


def _place_events(cfg: SynthConfig, rng: np.random.Generator):
    k = len(cfg.vocabulary)
    n_events = rng.integers(cfg.events_per_clip[0], cfg.events_per_clip[1] + 1)
    events = []
    for _ in range(n_events):
        for _attempt in range(20):
            c = int(rng.integers(k))
            dur = rng.uniform(*cfg.event_seconds)
            dur = min(dur, cfg.clip_seconds)
            others = [e for e in events if e[0] != c]
            if others and rng.random() < cfg.overlap_bias:
                anchor = others[rng.integers(len(others))]
                lo = max(0.0, anchor[1] - 0.5 * dur)
                hi = min(anchor[2] - 0.1 * dur, cfg.clip_seconds - dur)
                onset = rng.uniform(lo, hi) if hi > lo else hi
            else:
                onset = rng.uniform(0, cfg.clip_seconds - dur)
            onset = float(np.clip(onset, 0, cfg.clip_seconds - dur))
            offset = onset + dur
            clash = any(e[0] == c and onset < e[2] and e[1] < offset for e in events)
            if not clash:
                events.append((c, onset, offset, float(rng.uniform(*cfg.level_db))))
                break
    return sorted(events, key=lambda e: e[1])


def _render_clip(cfg: SynthConfig, index: int) -> SynthClip:
    rng = np.random.default_rng([cfg.seed, index])
    sr = cfg.sample_rate
    n = int(round(cfg.clip_seconds * sr))
    k = len(cfg.vocabulary)
    hop = int(round(cfg.label_hop_seconds * sr))
    win = int(round(cfg.label_window_seconds * sr))
    stems = np.zeros((k, n))
    labels = np.zeros((n // hop + 1, k))
    events = _place_events(cfg, rng)
    fade = int(round(cfg.fade_seconds * sr))
    for c, onset, offset, level in events:
        a, b = int(round(onset * sr)), min(n, int(round(offset * sr)))
        seg = cfg.prototypes[c].render(b - a, sr, rng)
        env = np.ones(b - a)
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(min(fade, (b - a) // 2)) / fade)
        env[:len(ramp)] = ramp
        env[len(env) - len(ramp):] = ramp[::-1]
        gain = 10 ** (level / 20)
        event = np.zeros(n)
        event[a:b] = gain * env * seg
        stems[c] += event
        labels[:, c] = np.maximum(labels[:, c], frame_rms(event, hop, win) / gain)
    for c in range(k):
        rms = frame_rms(stems[c], hop, win)
        gated = 20 * np.log10(np.maximum(rms, 1e-12)) < cfg.gate_dbfs
        labels[gated, c] = 0.0
    labels = np.clip(labels, 0.0, 1.0)
    clip_id = f"clip_{index:05d}"
    return SynthClip(clip_id, stems.sum(axis=0),
                     {name: stems[c] for c, name in enumerate(cfg.vocabulary)}, labels,
                     [(cfg.vocabulary[c], on, off, lvl) for c, on, off, lvl in events])


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def write_label_csv(path, labels: np.ndarray, vocabulary):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(vocabulary))
        for row in labels:
            w.writerow([repr(float(v)) for v in row])


def read_label_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty label file")
    header, body = rows[0], rows[1:]
    values = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    return header, values.reshape(len(body), len(header))


def synth_generate(cfg: SynthConfig, n_clips: int, out_dir=None) -> SynthDataset:
    """Generate ``n_clips`` clips; each clip uses an independent sub-seed of ``cfg.seed``.

    With ``out_dir`` the dataset is also written to disk with both manifests.
    """
    clips = [_render_clip(cfg, i) for i in range(n_clips)]
    ds = SynthDataset(cfg, clips)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: SynthDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sr = ds.config.sample_rate
    lass_lines, sed_lines = [], []
    for clip in ds.clips:
        audio_rel = f"audio/{clip.clip_id}.wav"
        label_rel = f"labels/{clip.clip_id}.csv"
        write_wav(out / audio_rel, Waveform(clip.mixture, sr))
        write_label_csv(out / label_rel, clip.labels, ds.config.vocabulary)
        sed_lines.append({"audio_path": audio_rel, "label_path": label_rel,
                          "clip_id": clip.clip_id})
        for name, stem in clip.stems.items():
            stem_rel = f"stems/{_safe(name)}/{clip.clip_id}.wav"
            write_wav(out / stem_rel, Waveform(stem, sr))
            if np.any(stem):
                lass_lines.append({"audio_path": stem_rel, "caption": name,
                                   "duration_seconds": len(stem) / sr,
                                   "clip_id": clip.clip_id})
    for fname, lines in (("manifest_lass.jsonl", lass_lines), ("manifest_sed.jsonl", sed_lines)):
        with open(out / fname, "w") as fh:
            for line in lines:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
    with open(out / "synth_config.json", "w") as fh:
        json.dump(ds.config.to_dict(), fh, indent=2, sort_keys=True)


@dataclass
class CaptionManifestEntry:
    audio_path: Path
    caption: str
    duration_seconds: float
    clip_id: str | None = None


@dataclass
class SedManifestEntry:
    audio_path: Path
    label_path: Path
    labels: SoftLabelMatrix
    clip_id: str | None = None


def _read_jsonl(path):
    path = Path(path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def load_caption_manifest(path) -> list:
    path = Path(path)
    entries = []
    for lineno, obj in _read_jsonl(path):
        missing = [k for k in ("audio_path", "caption", "duration_seconds") if k not in obj]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        if not str(obj["caption"]).strip():
            raise ManifestError(f"{path}:{lineno}: empty caption")
        audio = path.parent / obj["audio_path"]
        if not audio.exists():
            raise ManifestError(f"{path}:{lineno}: audio file {audio} does not exist")
        entries.append(CaptionManifestEntry(audio, str(obj["caption"]),
                                            float(obj["duration_seconds"]), obj.get("clip_id")))
    return entries


def write_caption_manifest(path, entries):
    path = Path(path)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({"audio_path": str(Path(e.audio_path).relative_to(path.parent)),
                                 "caption": e.caption, "duration_seconds": e.duration_seconds,
                                 "clip_id": e.clip_id}, sort_keys=True) + "\n")


def _wav_length(path) -> int:
    _, data = scipy.io.wavfile.read(path, mmap=True)
    return data.shape[0]


def load_sed_manifest(path, vocabulary: EventVocabulary,
                      logmel_params: LogMelParams = LogMelParams()) -> list:
    """Load SED entries, checking label columns and frame counts against the audio."""
    path = Path(path)
    entries = []
    for lineno, obj in _read_jsonl(path):
        missing = [k for k in ("audio_path", "label_path") if k not in obj]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        audio, label = path.parent / obj["audio_path"], path.parent / obj["label_path"]
        clip = obj.get("clip_id", audio.stem)
        for f in (audio, label):
            if not f.exists():
                raise ManifestError(f"{path}:{lineno}: file {f} does not exist")
        header, values = read_label_csv(label)
        if tuple(header) != tuple(vocabulary.labels):
            raise ManifestError(f"clip {clip}: label columns {header} do not match vocabulary "
                                f"{list(vocabulary.labels)}")
        sr, _ = scipy.io.wavfile.read(audio, mmap=True)
        expected = n_frames(_wav_length(audio), logmel_params.hop_seconds, sr)
        if values.shape[0] != expected:
            raise ManifestError(f"clip {clip}: label file has {values.shape[0]} frames, audio "
                                f"implies {expected}")
        entries.append(SedManifestEntry(audio, label, SoftLabelMatrix(
            values, logmel_params.hop_seconds, vocabulary), clip))
    return entries


def load_dataset(root, sample_rate: int | None = None) -> SynthDataset:
    """Re-read a directory written by :func:`write_dataset` into memory."""
    root = Path(root)
    with open(root / "synth_config.json") as fh:
        cfg = SynthConfig(**json.load(fh))
    clips = []
    for entry in load_sed_manifest(root / "manifest_sed.jsonl", cfg.vocab,
                                   LogMelParams(hop_seconds=cfg.label_hop_seconds)):
        mix = read_wav(entry.audio_path, sample_rate).samples
        stems = {name: read_wav(root / "stems" / _safe(name) / f"{entry.clip_id}.wav").samples
                 for name in cfg.vocabulary}
        clips.append(SynthClip(entry.clip_id, mix, stems, entry.labels.values))
    return SynthDataset(cfg, clips)
