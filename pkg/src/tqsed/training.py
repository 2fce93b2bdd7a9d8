"""Training loops for the separator (L1 on waveforms) and the detectors (MSE on soft labels)."""
from __future__ import annotations

import copy
import csv
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .audio import InvalidInputError, Waveform, read_wav
from .checkpoint import save_separator, state_checksum
from .metrics import SeparationScores
from .sed import build_sed_model, mse_loss
from .separation import l1_loss, separate

@contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic torch kernels for reproducible loss logs."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    prev = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.set_num_threads(threads)


# --- mixing --------------------------------------------------------------------------

def make_mixture(source, interference, snr_db: float, peak: float = 0.9):
    """Scale ``interference`` to ``snr_db`` below ``source`` and add.

    If the mixture peak exceeds ``peak`` both mixture and target are attenuated
    by the same gain. ``snr_db = inf`` mutes the interference.
    """
    s = np.asarray(getattr(source, "samples", source), dtype=np.float64)
    n = np.asarray(getattr(interference, "samples", interference), dtype=np.float64)
    if s.shape != n.shape:
        raise InvalidInputError(f"length mismatch: {s.shape} vs {n.shape}")
    e_s, e_n = np.dot(s, s), np.dot(n, n)
    if e_s <= 0:
        raise InvalidInputError("source has zero energy")
    if math.isinf(snr_db) and snr_db > 0 or e_n <= 0:
        gain = 0.0
    else:
        gain = math.sqrt(e_s / (e_n * 10 ** (snr_db / 10)))
    mixture = s + gain * n
    top = np.max(np.abs(mixture))
    norm = peak / top if top > peak else 1.0
    return mixture * norm, s * norm


# --- LR schedule ---------------------------------------------------------------------

@dataclass
class LrSchedulerState:
    initial_lr: float
    current_lr: float
    best_metric: float = math.inf
    epochs_since_improvement: int = 0
    halvings_done: int = 0

    @classmethod
    def start(cls, lr: float):
        return cls(lr, lr)


def scheduler_step(state: LrSchedulerState, epoch_metric: float, patience: int = 10,
                   max_halvings: int = 10):
    """Reduce-on-plateau with halving; returns (new_state, stop).

    Lower metric is better. After ``patience`` epochs without strict improvement
    the rate halves; once ``max_halvings`` halvings are spent, the next exhausted
    patience stops training.
    """
    if not math.isfinite(epoch_metric):
        raise ValueError(f"epoch metric must be finite, got {epoch_metric}")
    if epoch_metric < state.best_metric:
        return replace(state, best_metric=epoch_metric, epochs_since_improvement=0), False
    waited = state.epochs_since_improvement + 1
    if waited < patience:
        return replace(state, epochs_since_improvement=waited), False
    if state.halvings_done >= max_halvings:
        return replace(state, epochs_since_improvement=waited), True
    h = state.halvings_done + 1
    return replace(state, current_lr=state.initial_lr / 2 ** h, halvings_done=h,
                   epochs_since_improvement=0), False


# --- folds ---------------------------------------------------------------------------

@dataclass
class FoldAssignment:
    folds: dict  # clip id -> fold index
    k: int
    seed: int

    def members(self, fold: int) -> list:
        return [c for c, f in self.folds.items() if f == fold]


def kfold_split(clip_ids, k: int = 5, seed: int = 0) -> FoldAssignment:
    clip_ids = list(clip_ids)
    if len(clip_ids) < k:
        raise InvalidInputError(f"need at least {k} clips for {k}-fold split, got {len(clip_ids)}")
    order = np.random.default_rng(seed).permutation(len(clip_ids))
    return FoldAssignment({clip_ids[j]: int(pos % k) for pos, j in enumerate(order)}, k, seed)


# --- logs ----------------------------------------------------------------------------

@dataclass
class LossLog:
    rows: list = field(default_factory=list)  # (step_or_epoch, split, loss, lr)

    def add(self, step, split, loss, lr):
        self.rows.append((int(step), split, float(loss), float(lr)))

    def losses(self, split="train"):
        return [r[2] for r in self.rows if r[1] == split]

    def write_csv(self, path, key="step"):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow([key, "split", "loss", "lr"])
            for step, split, loss, lr in self.rows:
                w.writerow([step, split, repr(loss), repr(lr)])


# --- separator training ----------------------------------------------------------------

@dataclass
class LassTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 24
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    segment_seconds: float = 0.47
    snr_range_db: tuple = (-5.0, 5.0)
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_steps < 0:
            raise ValueError("learning rate and batch size must be positive, max_steps >= 0")


def stems_from_dataset(ds, clip_indices=None) -> list:
    """(caption, samples) pairs for every non-silent stem of the selected clips."""
    idx = range(len(ds.clips)) if clip_indices is None else clip_indices
    return [(name, ds.clips[i].stems[name]) for i in idx
            for name in ds.config.vocabulary if np.any(ds.clips[i].stems[name])]


def stems_from_manifest(entries, sample_rate: int, max_skips: int = 10) -> list:
    stems, skipped = [], 0
    for e in entries:
        try:
            stems.append((e.caption, read_wav(e.audio_path, sample_rate).samples))
        except (OSError, ValueError) as exc:
            skipped += 1
            warnings.warn(f"skipping unreadable audio {e.audio_path}: {exc}")
            if skipped > max_skips:
                raise InvalidInputError(f"more than {max_skips} unreadable files; aborting") from exc
    return stems


def _crop_with_energy(x, n, rng, min_rms=10 ** (-50 / 20), tries=10):
    if len(x) <= n:
        return np.pad(x, (0, n - len(x)))
    for _ in range(tries):
        a = rng.integers(len(x) - n + 1)
        seg = x[a:a + n]
        if np.sqrt(np.mean(seg ** 2)) > min_rms:
            return seg
    energy = np.convolve(x ** 2, np.ones(n), mode="valid")
    a = int(np.argmax(energy))
    return x[a:a + n]


def sample_lass_batch(stems, batch_size, n_samples, rng, snr_range=(-5.0, 5.0)):
    """Target stem plus one interfering stem of a different class per example."""
    captions = sorted({c for c, _ in stems})
    by_class = {c: [s for cc, s in stems if cc == c] for c in captions}
    if len(captions) < 2:
        raise InvalidInputError("need stems from at least two classes to build mixtures")
    mixes, targets, queries = [], [], []
    for _ in range(batch_size):
        c = captions[rng.integers(len(captions))]
        target = _crop_with_energy(by_class[c][rng.integers(len(by_class[c]))], n_samples, rng)
        others = [o for o in captions if o != c]
        o = others[rng.integers(len(others))]
        pool = by_class[o]
        interf = pool[rng.integers(len(pool))]
        a = rng.integers(max(1, len(interf) - n_samples + 1))
        interf = interf[a:a + n_samples]
        interf = np.pad(interf, (0, n_samples - len(interf)))
        mix, tgt = make_mixture(target, interf, rng.uniform(*snr_range))
        mixes.append(mix)
        targets.append(tgt)
        queries.append(c)
    return (torch.tensor(np.stack(mixes), dtype=torch.float32),
            torch.tensor(np.stack(targets), dtype=torch.float32), queries)


@dataclass
class LassResult:
    log: LossLog
    checkpoints: list  # paths or in-memory state dicts, one per checkpoint_every steps


def train_lass(stems, separator, encoder, cfg: LassTrainConfig = LassTrainConfig(),
               out_dir=None) -> LassResult:
    """Adam on mean L1 between separated and target waveforms, one step per batch."""
    if not stems:
        raise InvalidInputError("empty training manifest")
    sr = separator.config.sample_rate
    n = int(round(cfg.segment_seconds * sr))
    rng = np.random.default_rng(cfg.seed)
    result = LassResult(LossLog(), [])
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        params = list(separator.parameters()) + list(encoder.parameters())
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        separator.train()
        for step in range(1, cfg.max_steps + 1):
            mix, target, queries = sample_lass_batch(stems, cfg.batch_size, n, rng,
                                                     cfg.snr_range_db)
            est = separator(mix, encoder.embed(queries))
            loss = l1_loss(est, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.log.add(step, "train", loss.item(), cfg.learning_rate)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                result.checkpoints.append(_snapshot(separator, encoder, out_dir, step))
        if cfg.max_steps == 0 or not result.checkpoints:
            result.checkpoints.append(_snapshot(separator, encoder, out_dir, cfg.max_steps))
    separator.eval()
    return result


def _snapshot(separator, encoder, out_dir, step):
    if out_dir is None:
        return {"step": step, "separator": copy.deepcopy(separator.state_dict()),
                "encoder": copy.deepcopy(encoder.state_dict())}
    path = Path(out_dir) / f"separator_step{step:07d}.ckpt"
    save_separator(path, separator, encoder)
    return path


def evaluate_separation(ds, clip_indices, separator, encoder) -> SeparationScores:
    """Query every class present in each clip; reference = that class's stem."""
    scores = SeparationScores()
    sr = ds.config.sample_rate
    for i in clip_indices:
        clip = ds.clips[i]
        mix = Waveform(clip.mixture, sr)
        for name in ds.config.vocabulary:
            ref = clip.stems[name]
            if not np.any(ref):
                continue
            est = separate(mix, name, separator, encoder)
            scores.add(est.samples, ref, clip.mixture)
    return scores


# --- detector training ---------------------------------------------------------------

@dataclass
class SedTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.2
    plateau_patience_epochs: int = 10
    max_halvings: int = 10
    max_epochs: int = 1000
    seed: int = 0
    folds_to_run: tuple | None = None
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.plateau_patience_epochs <= 0:
            raise ValueError("learning rate, batch size and patience must be positive")


def prepare_features(model, ds, clip_indices=None) -> dict:
    """clip index -> (n_inputs, T, n_mels) features the model consumes (separation done once)."""
    sr = ds.config.sample_rate
    idx = range(len(ds.clips)) if clip_indices is None else clip_indices
    return {i: np.stack(model.branch_inputs(Waveform(ds.clips[i].mixture, sr))).astype(np.float32)
            for i in idx}


@dataclass
class FoldResult:
    fold: int
    model: torch.nn.Module
    log: LossLog
    valid_ids: list
    predictions: dict  # clip index -> (T, K) scores
    epochs: int


@dataclass
class SedResult:
    framework: str
    folds: list
    separator_checksum_before: str | None = None
    separator_checksum_after: str | None = None


def _predict(model, feats):
    model.eval()
    with torch.no_grad():
        return model(torch.as_tensor(feats)).double().numpy()


def train_sed(framework, ds, folds: FoldAssignment, cfg: SedTrainConfig = SedTrainConfig(),
              branch_config=None, separator=None, encoder=None, features=None,
              logmel_params=None) -> SedResult:
    """K-fold training; each fold trains on the rest and early-stops on its own split.

    ``features`` may carry precomputed branch inputs (see :func:`prepare_features`);
    otherwise they are computed once from a freshly built model.
    """
    from .audio import LogMelParams
    from .sed import TsedBranchConfig

    branch_config = branch_config or TsedBranchConfig()
    branch_config = replace(branch_config, dropout_rate=cfg.dropout)
    logmel_params = logmel_params or LogMelParams(hop_seconds=ds.config.label_hop_seconds)
    vocab = ds.config.vocab
    checksum_before = state_checksum(separator) if separator is not None else None
    ids = [c.clip_id for c in ds.clips]
    index_of = {cid: i for i, cid in enumerate(ids)}
    labels = {i: c.labels.astype(np.float32) for i, c in enumerate(ds.clips)}
    fold_list = cfg.folds_to_run if cfg.folds_to_run is not None else range(folds.k)
    result = SedResult(framework, [], checksum_before)
    with deterministic_mode(cfg.deterministic):
        if features is None:
            probe = build_sed_model(framework, vocab, branch_config, separator, encoder,
                                    logmel_params)
            features = prepare_features(probe, ds)
        for i, f in features.items():
            if f.shape[1] != labels[i].shape[0]:
                raise InvalidInputError(f"{ids[i]}: {f.shape[1]} feature frames vs "
                                        f"{labels[i].shape[0]} label frames")
        for fold in fold_list:
            torch.manual_seed(cfg.seed * 1000 + fold)
            rng = np.random.default_rng([cfg.seed, fold])
            model = build_sed_model(framework, vocab, branch_config, separator, encoder,
                                    logmel_params)
            valid = sorted(index_of[c] for c in folds.members(fold))
            train = sorted(index_of[c] for c in ids if folds.folds[c] != fold)
            result.folds.append(_train_fold(model, features, labels, train, valid, cfg, rng, fold))
    if separator is not None:
        result.separator_checksum_after = state_checksum(separator)
    return result


def _train_fold(model, features, labels, train, valid, cfg, rng, fold) -> FoldResult:
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = LrSchedulerState.start(cfg.learning_rate)
    log = LossLog()
    xv = np.stack([features[i] for i in valid])
    yv = torch.as_tensor(np.stack([labels[i] for i in valid]))
    v0 = mse_loss(torch.as_tensor(_predict(model, xv), dtype=torch.float32), yv).item()
    log.add(0, "valid", v0, state.current_lr)
    best = (v0, copy.deepcopy(model.state_dict()))
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(train)
        total = 0.0
        for a in range(0, len(order), cfg.batch_size):
            batch = order[a:a + cfg.batch_size]
            x = torch.as_tensor(np.stack([features[i] for i in batch]))
            y = torch.as_tensor(np.stack([labels[i] for i in batch]))
            loss = mse_loss(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        log.add(epoch, "train", total / len(order), state.current_lr)
        v = mse_loss(torch.as_tensor(_predict(model, xv), dtype=torch.float32), yv).item()
        log.add(epoch, "valid", v, state.current_lr)
        if v < best[0]:
            best = (v, copy.deepcopy(model.state_dict()))
        state, stop = scheduler_step(state, v, cfg.plateau_patience_epochs, cfg.max_halvings)
        for group in opt.param_groups:
            group["lr"] = state.current_lr
        if stop:
            break
    model.load_state_dict(best[1])
    model.eval()
    preds = dict(zip(valid, _predict(model, xv)))
    return FoldResult(fold, model, log, valid, preds, epoch)
