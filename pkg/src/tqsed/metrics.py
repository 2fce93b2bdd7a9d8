"""Separation metrics (SDR, SDRi, SI-SDR) and segment-based detection metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .audio import InvalidInputError, Waveform

DB_CAP = 100.0


class UndefinedMetricError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def _ratio_db(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CAP
    if num <= 0.0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def _pair(est, ref):
    est, ref = _arr(est), _arr(ref)
    if est.shape != ref.shape:
        raise InvalidInputError(f"length mismatch: {est.shape} vs {ref.shape}")
    if not np.any(ref):
        raise InvalidInputError("reference signal is all zeros")
    return est, ref


def sdr(est, ref) -> float:
    """10 log10(|ref|^2 / |ref - est|^2), clipped to +-100 dB."""
    est, ref = _pair(est, ref)
    return _ratio_db(np.dot(ref, ref), np.sum((ref - est) ** 2))


def si_sdr(est, ref) -> float:
    est, ref = _pair(est, ref)
    alpha = np.dot(est, ref) / np.dot(ref, ref)
    target = alpha * ref
    return _ratio_db(np.dot(target, target), np.sum((est - target) ** 2))


def sdri(est, ref, mixture) -> float:
    return sdr(est, ref) - sdr(mixture, ref)


@dataclass
class SeparationScores:
    """Per-clip separation results; means are what a results table reports."""

    sdr: list = field(default_factory=list)
    si_sdr: list = field(default_factory=list)
    mixture_sdr: list = field(default_factory=list)

    def add(self, est, ref, mixture):
        self.sdr.append(sdr(est, ref))
        self.si_sdr.append(si_sdr(est, ref))
        self.mixture_sdr.append(sdr(mixture, ref))

    @classmethod
    def from_rows(cls, rows):
        """Replay stored per-clip values (mappings with sdr, si_sdr, mixture_sdr)."""
        out = cls()
        for r in rows:
            out.sdr.append(float(r["sdr"]))
            out.si_sdr.append(float(r["si_sdr"]))
            out.mixture_sdr.append(float(r["mixture_sdr"]))
        return out

    @property
    def sdri(self):
        return [a - b for a, b in zip(self.sdr, self.mixture_sdr)]

    def summary(self) -> dict:
        if not self.sdr:
            raise UndefinedMetricError("no clips evaluated")
        return {"n_clips": len(self.sdr), "sdr": float(np.mean(self.sdr)),
                "sdri": float(np.mean(self.sdri)), "si_sdr": float(np.mean(self.si_sdr)),
                "mixture_sdr": float(np.mean(self.mixture_sdr))}


# --- segment-based detection metrics -------------------------------------------------

def _values(m):
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def frames_per_segment(segment_seconds: float, hop_seconds: float) -> int:
    if segment_seconds < hop_seconds - 1e-12:
        raise ValueError(f"segment length {segment_seconds} s is shorter than the frame hop "
                         f"{hop_seconds} s")
    return max(1, int(round(segment_seconds / hop_seconds)))


def segment_max(frames: np.ndarray, n: int) -> np.ndarray:
    """Collapse (T, K) frame values to (ceil(T / n), K) by taking the max in each segment."""
    t, k = frames.shape
    n_seg = -(-t // n)
    padded = np.full((n_seg * n, k), -np.inf)
    padded[:t] = frames
    return padded.reshape(n_seg, n, k).max(axis=1)


def binarize_reference(ref, threshold: float = 0.5) -> np.ndarray:
    """Soft reference labels count as active at or above ``threshold``."""
    return _values(ref) >= threshold


@dataclass
class SegmentCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int

    def __add__(self, other: "SegmentCounts") -> "SegmentCounts":
        return SegmentCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                             self.substitutions + other.substitutions,
                             self.deletions + other.deletions,
                             self.insertions + other.insertions, self.n_ref + other.n_ref)


def counts_from_segments(pred: np.ndarray, ref: np.ndarray) -> SegmentCounts:
    """Boolean (S, K) segment activities -> per-class TP/FP/FN and per-segment S/D/I."""
    tp = (pred & ref).sum(axis=0)
    fp = (pred & ~ref).sum(axis=0)
    fn = (~pred & ref).sum(axis=0)
    seg_fp = (pred & ~ref).sum(axis=1)
    seg_fn = (~pred & ref).sum(axis=1)
    s = np.minimum(seg_fp, seg_fn)
    return SegmentCounts(tp, fp, fn, int(s.sum()), int((seg_fn - s).sum()),
                         int((seg_fp - s).sum()), int(ref.sum()))


def segment_counts(pred_scores, ref, thresholds, segment_seconds: float = 1.0,
                   hop_seconds: float | None = None,
                   label_binarize_threshold: float = 0.5) -> SegmentCounts:
    """Count segment-level errors for one clip.

    A frame is predicted active when its score is strictly above the class
    threshold; a class is active in a segment when any of its frames is.
    """
    scores, refv = _values(pred_scores), _values(ref)
    if scores.shape != refv.shape:
        raise ValueError(f"prediction shape {scores.shape} differs from reference {refv.shape}")
    if hop_seconds is None:
        hop_seconds = getattr(pred_scores, "frame_hop_seconds", None) or ref.frame_hop_seconds
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (scores.shape[1],))
    n = frames_per_segment(segment_seconds, hop_seconds)
    pred_seg = segment_max(scores, n) > thresholds
    ref_seg = segment_max(binarize_reference(refv, label_binarize_threshold).astype(float), n) > 0
    return counts_from_segments(pred_seg, ref_seg)


def error_rate(c: SegmentCounts) -> float:
    if c.n_ref == 0:
        raise UndefinedMetricError("error rate undefined without active reference segments")
    return (c.substitutions + c.deletions + c.insertions) / c.n_ref


def f1_from_counts(tp, fp, fn):
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    den = 2 * tp + fp + fn
    return np.where(den > 0, 2 * tp / np.where(den > 0, den, 1), 0.0)


def candidate_thresholds(frame_scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores, plus 0 and 1."""
    u = np.unique(frame_scores)
    mids = (u[:-1] + u[1:]) / 2 if len(u) > 1 else np.empty(0)
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


@dataclass
class OptimalF1:
    thresholds: np.ndarray
    per_class_f1: np.ndarray
    macro_f1: float
    excluded: list  # class indices with no positive reference segment


def _as_clip_list(x):
    if isinstance(x, (list, tuple)):
        return [_values(c) for c in x]
    return [_values(x)]


def _segment_pool(scores, refs, segment_seconds, hop_seconds, label_binarize_threshold):
    n = frames_per_segment(segment_seconds, hop_seconds)
    seg_scores, seg_refs = [], []
    for s, r in zip(scores, refs):
        if s.shape != r.shape:
            raise ValueError(f"prediction shape {s.shape} differs from reference {r.shape}")
        seg_scores.append(segment_max(s, n))
        seg_refs.append(segment_max(binarize_reference(r, label_binarize_threshold)
                                    .astype(float), n) > 0)
    return np.concatenate(seg_scores), np.concatenate(seg_refs)


def optimal_threshold_f1(scores, ref, segment_seconds: float = 1.0, hop_seconds: float = 0.2,
                         label_binarize_threshold: float = 0.5) -> OptimalF1:
    """Per-class threshold maximizing segment-based F1 over an evaluation set.

    ``scores`` and ``ref`` are a (T, K) matrix or a list of them (one per clip).
    Ties go to the largest maximizing threshold.
    """
    scores, refs = _as_clip_list(scores), _as_clip_list(ref)
    if len(scores) != len(refs):
        raise ValueError("scores and references have different clip counts")
    seg_s, seg_r = _segment_pool(scores, refs, segment_seconds, hop_seconds,
                                 label_binarize_threshold)
    frame_scores = np.concatenate(scores)
    k = seg_s.shape[1]
    thresholds = np.full(k, 0.5)
    f1 = np.zeros(k)
    excluded = []
    for c in range(k):
        pos = np.sort(seg_s[seg_r[:, c], c])
        neg = np.sort(seg_s[~seg_r[:, c], c])
        if len(pos) == 0:
            excluded.append(c)
            continue
        cand = candidate_thresholds(frame_scores[:, c])
        # counts of segment maxima strictly above each candidate
        tp = len(pos) - np.searchsorted(pos, cand, side="right")
        fp = len(neg) - np.searchsorted(neg, cand, side="right")
        fn = len(pos) - tp
        scores_c = f1_from_counts(tp, fp, fn)
        best = scores_c.max()
        i = np.flatnonzero(scores_c == best)[-1]
        thresholds[c], f1[c] = cand[i], best
    kept = [c for c in range(k) if c not in excluded]
    if not kept:
        raise UndefinedMetricError("no class has a positive reference segment")
    return OptimalF1(thresholds, f1, float(np.mean(f1[kept])), excluded)


def f1_at_thresholds(scores, ref, thresholds, segment_seconds=1.0, hop_seconds=0.2,
                     label_binarize_threshold=0.5) -> np.ndarray:
    scores, refs = _as_clip_list(scores), _as_clip_list(ref)
    seg_s, seg_r = _segment_pool(scores, refs, segment_seconds, hop_seconds,
                                 label_binarize_threshold)
    c = counts_from_segments(seg_s > np.asarray(thresholds), seg_r)
    return f1_from_counts(c.tp, c.fp, c.fn)


def pooled_error_rate(scores, ref, thresholds, segment_seconds=1.0, hop_seconds=0.2,
                      label_binarize_threshold=0.5) -> float:
    total = None
    for s, r in zip(_as_clip_list(scores), _as_clip_list(ref)):
        c = segment_counts(s, r, thresholds, segment_seconds, hop_seconds,
                           label_binarize_threshold)
        total = c if total is None else total + c
    return error_rate(total)


def cross_fitted_f1(fold_scores, fold_refs, segment_seconds=1.0, hop_seconds=0.2,
                    label_binarize_threshold=0.5):
    """Segment F1 where each fold is thresholded with values fitted on the other folds.

    ``fold_scores``/``fold_refs`` are lists (one per fold) of clip lists. Returns
    (per-class F1 from pooled counts, per-fold thresholds, excluded classes).
    """
    total, fold_thresholds = None, []
    for i, (scores, refs) in enumerate(zip(fold_scores, fold_refs)):
        rest_s = [c for j, f in enumerate(fold_scores) if j != i for c in f]
        rest_r = [c for j, f in enumerate(fold_refs) if j != i for c in f]
        try:
            thr = optimal_threshold_f1(rest_s, rest_r, segment_seconds, hop_seconds,
                                       label_binarize_threshold).thresholds
        except (UndefinedMetricError, ValueError):
            thr = np.full(_values(scores[0]).shape[1], 0.5)
        fold_thresholds.append(thr)
        seg_s, seg_r = _segment_pool(_as_clip_list(list(scores)), _as_clip_list(list(refs)),
                                     segment_seconds, hop_seconds, label_binarize_threshold)
        c = counts_from_segments(seg_s > thr, seg_r)
        total = c if total is None else total + c
    excluded = [k for k in range(len(total.tp)) if total.tp[k] + total.fn[k] == 0]
    return f1_from_counts(total.tp, total.fp, total.fn), fold_thresholds, excluded


# --- co-occurrence statistics ----------------------------------------------------------

@dataclass
class OverlapRow:
    label: str
    percentages: list  # share of active frames with 0, 1, 2, 3+ other active classes
    duration_seconds: float
    never_active: bool


def overlap_statistics(ref, hop_seconds: float, labels: Sequence[str] | None = None,
                       max_bucket: int = 3, binarize_threshold: float = 0.5) -> list:
    """Distribution of co-occurring event counts over each class's active frames."""
    clips = _as_clip_list(ref)
    active = np.concatenate([binarize_reference(c, binarize_threshold) for c in clips])
    k = active.shape[1]
    labels = list(labels) if labels is not None else [str(i) for i in range(k)]
    per_frame = active.sum(axis=1)
    rows = []
    for c in range(k):
        frames = active[:, c]
        others = np.minimum(per_frame[frames] - 1, max_bucket)
        hist = np.bincount(others, minlength=max_bucket + 1).astype(np.float64)
        n = frames.sum()
        pct = (100.0 * hist / n) if n else np.zeros(max_bucket + 1)
        rows.append(OverlapRow(labels[c], [float(p) for p in pct], float(n * hop_seconds),
                               bool(n == 0)))
    return rows


def polyphonic_fraction(ref, binarize_threshold: float = 0.5) -> float:
    """Share of active (class, frame) cells that co-occur with another active class."""
    active = np.concatenate([binarize_reference(c, binarize_threshold)
                             for c in _as_clip_list(ref)])
    per_frame = active.sum(axis=1)
    cells = active.sum()
    return float((active & (per_frame[:, None] > 1)).sum() / cells) if cells else 0.0


# --- report --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Serializable evaluation summary.

    ``macro_f1`` is the mean of the non-null ``per_class_f1`` entries; classes
    with no positive reference segment are null and listed in ``excluded_classes``.
    """

    kind: str
    framework: str | None = None
    separation: dict | None = None
    er: float | None = None
    macro_f1: float | None = None
    labels: list = field(default_factory=list)
    per_class_f1: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    excluded_classes: list = field(default_factory=list)
    per_fold: list = field(default_factory=list)
    overlap: list = field(default_factory=list)
    threshold_source: str | None = None
    config_hash: str | None = None
    separator_checksum: str | None = None
    parameters: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def detection_report(scores, ref, labels, segment_seconds=1.0, hop_seconds=0.2,
                     er_threshold=0.5, label_binarize_threshold=0.5, thresholds=None,
                     **extra) -> MetricsReport:
    """ER at a fixed threshold; F1 at per-class optimal thresholds (or the given ones)."""
    opt = optimal_threshold_f1(scores, ref, segment_seconds, hop_seconds,
                               label_binarize_threshold)
    if thresholds is None:
        thr, f1, source = opt.thresholds, opt.per_class_f1, "fitted_on_eval"
    else:
        thr = np.asarray(thresholds, dtype=np.float64)
        f1 = f1_at_thresholds(scores, ref, thr, segment_seconds, hop_seconds,
                              label_binarize_threshold)
        source = "given"
    kept = [c for c in range(len(labels)) if c not in opt.excluded]
    er = pooled_error_rate(scores, ref, np.full(len(labels), er_threshold), segment_seconds,
                           hop_seconds, label_binarize_threshold)
    return MetricsReport(kind="sed", er=float(er), macro_f1=float(np.mean(f1[kept])),
                         labels=list(labels),
                         per_class_f1=[None if c in opt.excluded else float(v)
                                       for c, v in enumerate(f1)],
                         thresholds=[float(v) for v in thr], excluded_classes=opt.excluded,
                         threshold_source=source, **extra)
