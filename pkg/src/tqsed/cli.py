"""Command-line entry point: ``tqsed <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--out-dir`` (default
``$TQSED_OUTPUT_ROOT/<subcommand>``, falling back to ``./tqsed_runs``) and prints
one JSON line on stdout. Failures print a JSON error object on stderr, exit
nonzero and leave an ``INCOMPLETE`` marker next to any partial artifacts.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .audio import InvalidInputError, Waveform, read_wav, write_wav
from .checkpoint import load_sed, load_separator, save_sed, save_separator, state_checksum
from .config import RunConfig, load_run_config
from .datagen import _safe, load_caption_manifest, load_dataset, read_label_csv, synth_generate
from .metrics import (MetricsReport, SeparationScores, cross_fitted_f1, detection_report,
                      error_rate, optimal_threshold_f1, overlap_statistics, polyphonic_fraction,
                      segment_counts)
from .sed import count_parameters, predict
from .separation import LookupTextEncoder, Separator, separate
from .training import kfold_split, stems_from_manifest, train_lass, train_sed

OUTPUT_ROOT_ENV = "TQSED_OUTPUT_ROOT"
INCOMPLETE = "INCOMPLETE"
COMMANDS = ("synth", "train-lass", "eval-lass", "separate", "train-sed", "eval-sed", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tqsed", description="Text-queried separation and sound event detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out-dir", help=f"artifact directory (default ${OUTPUT_ROOT_ENV}/<cmd>)")
        sp.add_argument("--seed", type=int, help="override the configuration seed")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded deterministic kernels")
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    sp.add_argument("--n-clips", type=int)

    sp = common(sub.add_parser("train-lass", help="train the text-queried separator"))
    sp.add_argument("--data", required=True, help="dataset directory written by synth")

    sp = common(sub.add_parser("eval-lass", help="separation metrics on held-out clips"))
    sp.add_argument("--data", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="separator checkpoint")
    g.add_argument("--estimates", help="directory of <class>/<clip>.wav estimates to score")
    sp.add_argument("--all-clips", action="store_true", help="score every clip, not only the held-out tail")

    sp = common(sub.add_parser("separate", help="extract the sound described by a query"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--input", required=True, help="mono WAV file")
    sp.add_argument("--resample", action="store_true", help="resample input to the model rate")

    sp = common(sub.add_parser("train-sed", help="k-fold detector training"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--framework", choices=("tq_sed", "base1", "base2"), default="tq_sed")
    sp.add_argument("--conv-filters", type=int, choices=(16, 32, 64, 128))
    sp.add_argument("--separator", help="separator checkpoint (required for tq_sed)")

    sp = common(sub.add_parser("eval-sed", help="ER / optimal-threshold F1 / overlap report"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--predictions", help="train-sed output directory (out-of-fold scores)")
    sp.add_argument("--checkpoint", help="score --data with this detector checkpoint instead")
    sp.add_argument("--separator", help="separator checkpoint for a tq_sed detector")
    sp.add_argument("--framework", choices=("tq_sed", "base1", "base2"))

    sp = common(sub.add_parser("report", help="render MetricsReport JSON files as tables"))
    sp.add_argument("reports", nargs="+", help="MetricsReport JSON files")
    sp.add_argument("--plot", action="store_true", help="also draw per-class F1 bars (PNG)")
    return p


# --- helpers -------------------------------------------------------------------------

def _out_dir(args) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "tqsed_runs")) / args.command


def _effective_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.deterministic is not None:
        over["lass_train.deterministic"] = args.deterministic
        over["sed_train.deterministic"] = args.deterministic
    if getattr(args, "conv_filters", None) is not None:
        over["sed_branch.conv_filters"] = args.conv_filters
    if getattr(args, "n_clips", None) is not None:
        over["synth.n_clips"] = args.n_clips
    return cfg.with_overrides(**over) if over else cfg


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _eval_split(n_total: int, n_eval: int):
    n_eval = min(n_eval, n_total)
    return list(range(n_total - n_eval)), list(range(n_total - n_eval, n_total))


def _write_predictions(path: Path, scores: np.ndarray, labels):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", *labels])
        for i, row in enumerate(scores):
            w.writerow([i, *(repr(float(v)) for v in row)])


def _read_predictions(path: Path):
    header, values = read_label_csv(path)
    return header[1:], values[:, 1:]


# --- subcommands -----------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> dict:
    ds = synth_generate(cfg.synth_config(), cfg.n_clips(), out_dir=out)
    frac = polyphonic_fraction([c.labels for c in ds.clips]) if ds.clips else 0.0
    return {"n_clips": len(ds.clips), "vocabulary": list(ds.config.vocabulary),
            "polyphonic_fraction": frac}


def cmd_train_lass(args, cfg: RunConfig, out: Path) -> dict:
    data = Path(args.data)
    entries = load_caption_manifest(data / "manifest_lass.jsonl")
    clip_ids = sorted({e.clip_id for e in entries})
    ds_ids = [json.loads(line)["clip_id"] for line in
              (data / "manifest_sed.jsonl").read_text().splitlines() if line.strip()]
    train_idx, _ = _eval_split(len(ds_ids), cfg.n_eval_clips())
    train_ids = {ds_ids[i] for i in train_idx} if ds_ids else set(clip_ids)
    sep_cfg = cfg.separation_config()
    stems = stems_from_manifest([e for e in entries if e.clip_id in train_ids],
                                sep_cfg.sample_rate)
    vocab = sorted({c for c, _ in stems})
    tcfg = cfg.lass_train_config()
    torch.manual_seed(tcfg.seed)
    separator = Separator(sep_cfg)
    encoder = LookupTextEncoder(vocab, sep_cfg.embedding_dim, seed=tcfg.seed)
    ckpt_dir = out / "checkpoints" if tcfg.checkpoint_every else None
    result = train_lass(stems, separator, encoder, tcfg, out_dir=ckpt_dir)
    result.log.write_csv(out / "loss_lass.csv")
    save_separator(out / "separator.ckpt", separator, encoder)
    losses = result.log.losses()
    return {"steps": len(losses), "final_loss": losses[-1] if losses else None,
            "n_train_stems": len(stems), "separator_checksum": state_checksum(separator),
            "checkpoint": str(out / "separator.ckpt")}


def cmd_eval_lass(args, cfg: RunConfig, out: Path) -> dict:
    ds = load_dataset(args.data)
    sr = ds.config.sample_rate
    idx = range(len(ds.clips)) if args.all_clips else _eval_split(len(ds.clips),
                                                                 cfg.n_eval_clips())[1]
    separator = encoder = checksum = None
    if args.checkpoint:
        separator, encoder = load_separator(args.checkpoint)
        checksum = state_checksum(separator)
        if separator.config.sample_rate != sr:
            raise InvalidInputError(f"dataset rate {sr} Hz differs from model rate "
                                    f"{separator.config.sample_rate} Hz")
    scores = SeparationScores()
    rows = []
    for i in idx:
        clip = ds.clips[i]
        for name in ds.config.vocabulary:
            ref = clip.stems[name]
            if not np.any(ref):
                continue
            if separator is not None:
                est = separate(Waveform(clip.mixture, sr), name, separator, encoder).samples
            else:
                est = read_wav(Path(args.estimates) / _safe(name) / f"{clip.clip_id}.wav",
                               sr).samples
            scores.add(est, ref, clip.mixture)
            rows.append([clip.clip_id, name, scores.sdr[-1], scores.sdri[-1], scores.si_sdr[-1],
                         scores.mixture_sdr[-1]])
    with open(out / "per_clip_lass.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "query", "sdr", "sdri", "si_sdr", "mixture_sdr"])
        w.writerows([r[:2] + [repr(float(v)) for v in r[2:]] for r in rows])
    system = "estimates" if separator is None else (
        "separator" if separator.config.dprnn is not None else "separator_no_dprnn")
    report = MetricsReport(kind="separation", framework=system, separation=scores.summary(),
                           config_hash=cfg.hash(), separator_checksum=checksum,
                           parameters=None if separator is None else
                           sum(p.numel() for p in separator.parameters()))
    (out / "metrics_lass.json").write_text(report.to_json())
    return {**report.separation, "report": str(out / "metrics_lass.json")}


def cmd_separate(args, cfg: RunConfig, out: Path) -> dict:
    separator, encoder = load_separator(args.checkpoint)
    x = read_wav(args.input, separator.config.sample_rate, resample=args.resample)
    y = separate(x, args.query, separator, encoder)
    path = out / f"{Path(args.input).stem}_{_safe(args.query.strip())}.wav"
    write_wav(path, y)
    return {"output": str(path), "n_samples": len(y), "sample_rate": y.sample_rate}


def cmd_train_sed(args, cfg: RunConfig, out: Path) -> dict:
    ds = load_dataset(args.data)
    separator = encoder = None
    if args.framework == "tq_sed":
        if not args.separator:
            raise InvalidInputError("--framework tq_sed needs --separator <checkpoint>")
        separator, encoder = load_separator(args.separator)
    scfg = cfg.sed_train_config()
    branch = cfg.sed_branch_config()
    folds = kfold_split([c.clip_id for c in ds.clips], cfg.k_folds(), seed=scfg.seed)
    result = train_sed(args.framework, ds, folds, scfg, branch, separator, encoder)
    vocab = list(ds.config.vocabulary)
    for fold in result.folds:
        save_sed(out / f"sed_fold{fold.fold}.ckpt", fold.model, result.separator_checksum_before)
        fold.log.write_csv(out / f"loss_sed_fold{fold.fold}.csv", key="epoch")
        for i, scores in fold.predictions.items():
            _write_predictions(out / "predictions" / f"{ds.clips[i].clip_id}.csv", scores, vocab)
    params = count_parameters(result.folds[0].model) if result.folds else None
    summary = {"framework": args.framework, "folds": folds.folds, "k": folds.k,
               "folds_run": [f.fold for f in result.folds], "parameters": params,
               "separator_checksum": result.separator_checksum_before,
               "config_hash": cfg.hash(), "branch": branch.to_dict()}
    _write_json(out / "train_sed.json", summary)
    if result.separator_checksum_before != result.separator_checksum_after:
        raise RuntimeError("separator weights changed during detector training")
    return {"framework": args.framework, "parameters": params,
            "epochs": [f.epochs for f in result.folds],
            "separator_checksum": result.separator_checksum_before}


def cmd_eval_sed(args, cfg: RunConfig, out: Path) -> dict:
    ds = load_dataset(args.data)
    vocab = list(ds.config.vocabulary)
    hop = ds.config.label_hop_seconds
    by_id = {c.clip_id: c for c in ds.clips}
    if args.checkpoint:
        separator = encoder = None
        if args.separator:
            separator, encoder = load_separator(args.separator)
        model = load_sed(args.checkpoint, separator, encoder)
        sr = ds.config.sample_rate
        preds = {c.clip_id: predict(model, Waveform(c.mixture, sr)).values for c in ds.clips}
        fold_of = {cid: 0 for cid in preds}
        meta = {"framework": model.framework, "parameters": count_parameters(model),
                "config_hash": cfg.hash(),
                "separator_checksum": state_checksum(separator) if separator else None}
    else:
        if not args.predictions:
            raise InvalidInputError("eval-sed needs --predictions or --checkpoint")
        pdir = Path(args.predictions)
        meta = json.loads((pdir / "train_sed.json").read_text())
        preds = {}
        for cid in sorted(by_id):
            f = pdir / "predictions" / f"{cid}.csv"
            if f.exists():
                header, values = _read_predictions(f)
                if header != vocab:
                    raise InvalidInputError(f"{f}: columns {header} differ from {vocab}")
                preds[cid] = values
        if not preds:
            raise InvalidInputError(f"no prediction files under {pdir / 'predictions'}")
        fold_of = {cid: meta["folds"][cid] for cid in preds}
    ids = sorted(preds)
    scores = [preds[c] for c in ids]
    refs = [by_id[c].labels for c in ids]
    seg = cfg.metric("segment_seconds")
    lbt = cfg.metric("label_binarize_threshold")
    er_thr = cfg.metric("er_threshold")
    report = detection_report(scores, refs, vocab, seg, hop, er_thr, lbt,
                              framework=meta["framework"], parameters=meta.get("parameters"),
                              config_hash=meta.get("config_hash"),
                              separator_checksum=meta.get("separator_checksum"))
    report.threshold_source = "fitted_on_eval"
    fold_ids = sorted(set(fold_of.values()))
    if cfg.metric("threshold_source") == "validation" and len(fold_ids) > 1:
        f1, fold_thr, excluded = cross_fitted_f1(
            [[preds[c] for c in ids if fold_of[c] == f] for f in fold_ids],
            [[by_id[c].labels for c in ids if fold_of[c] == f] for f in fold_ids], seg, hop, lbt)
        kept = [k for k in range(len(vocab)) if k not in excluded]
        report.per_class_f1 = [None if k in excluded else float(v) for k, v in enumerate(f1)]
        report.macro_f1 = float(np.mean(f1[kept]))
        report.thresholds = [float(v) for v in np.mean(fold_thr, axis=0)]
        report.excluded_classes = excluded
        report.threshold_source = "fitted_on_other_folds"
    for f in fold_ids:
        fs = [preds[c] for c in ids if fold_of[c] == f]
        fr = [by_id[c].labels for c in ids if fold_of[c] == f]
        entry = {"fold": f, "n_clips": len(fs)}
        try:
            entry["macro_f1"] = optimal_threshold_f1(fs, fr, seg, hop, lbt).macro_f1
            counts = [segment_counts(s, r, er_thr, seg, hop, lbt) for s, r in zip(fs, fr)]
            entry["er"] = error_rate(sum(counts[1:], counts[0]))
        except ValueError:
            entry["macro_f1"] = entry["er"] = None
        report.per_fold.append(entry)
    report.overlap = [vars(r) for r in overlap_statistics(refs, hop, vocab,
                                                          binarize_threshold=lbt)]
    (out / "metrics_sed.json").write_text(report.to_json())
    return {"framework": report.framework, "er": report.er, "macro_f1": report.macro_f1,
            "threshold_source": report.threshold_source,
            "report": str(out / "metrics_sed.json")}


def _fmt(v, digits=3):
    return "" if v is None else f"{v:.{digits}f}"


def cmd_report(args, cfg: RunConfig, out: Path) -> dict:
    reports = [(Path(p).stem, MetricsReport.from_json(Path(p).read_text()))
                for p in args.reports]
    written = []
    sep_rows = [(n, r) for n, r in reports if r.kind == "separation"]
    if sep_rows:
        with open(out / "table_separation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["system", "sdr_db", "sdri_db", "si_sdr_db", "mixture_sdr_db", "n_clips",
                        "config_hash", "separator_checksum"])
            for name, r in sep_rows:
                s = r.separation
                w.writerow([r.framework or name, _fmt(s["sdr"]), _fmt(s["sdri"]),
                            _fmt(s["si_sdr"]), _fmt(s["mixture_sdr"]), s["n_clips"],
                            r.config_hash or "", r.separator_checksum or ""])
        written.append("table_separation.csv")
    det = [(n, r) for n, r in reports if r.kind == "sed"]
    if det:
        with open(out / "table_detection.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["framework", "parameters_m", "er", "macro_f1_pct", "threshold_source",
                        "config_hash", "separator_checksum"])
            for name, r in det:
                w.writerow([r.framework or name,
                            _fmt(r.parameters / 1e6, 2) if r.parameters else "",
                            _fmt(r.er), _fmt(100 * r.macro_f1, 2), r.threshold_source or "",
                            r.config_hash or "", r.separator_checksum or ""])
        labels = det[0][1].labels
        with open(out / "per_class_f1.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", *(r.framework or n for n, r in det)])
            for k, label in enumerate(labels):
                w.writerow([label, *(_fmt(100 * r.per_class_f1[k], 2)
                                     if r.per_class_f1[k] is not None else "" for _, r in det)])
        written += ["table_detection.csv", "per_class_f1.csv"]
        overlap = next((r.overlap for _, r in det if r.overlap), None)
        if overlap:
            with open(out / "overlap.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["label", "overlap_0_pct", "overlap_1_pct", "overlap_2_pct",
                            "overlap_3plus_pct", "duration_s"])
                for row in overlap:
                    w.writerow([row["label"], *(_fmt(p, 2) for p in row["percentages"]),
                                _fmt(row["duration_seconds"], 1)])
            written.append("overlap.csv")
        if args.plot:
            _plot_f1(det, out / "per_class_f1.png")
            written.append("per_class_f1.png")
    return {"written": written, "n_reports": len(reports)}


def _plot_f1(det, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = det[0][1].labels
    width = 0.8 / len(det)
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(labels)), 3.5))
    for j, (name, r) in enumerate(det):
        vals = [100 * v if v is not None else 0.0 for v in r.per_class_f1]
        ax.bar(np.arange(len(labels)) + j * width, vals, width, label=r.framework or name)
    ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("F1 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


HANDLERS = {"synth": cmd_synth, "train-lass": cmd_train_lass, "eval-lass": cmd_eval_lass,
            "separate": cmd_separate, "train-sed": cmd_train_sed, "eval-sed": cmd_eval_sed,
            "report": cmd_report}


def main(argv=None) -> int:
    out = None
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = _effective_config(args)
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        marker = out / INCOMPLETE
        marker.write_text(f"{command} did not finish; artifacts here may be partial\n")
        summary = HANDLERS[command](args, cfg, out)
        marker.unlink()
        print(json.dumps({"command": command, "status": "ok", "out_dir": str(out), **summary},
                         sort_keys=True))
        return 0
    except UsageError as exc:
        err = {"status": "error", "error": "UsageError", "message": str(exc), "command": command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure must surface as JSON
        err = {"status": "error", "error": type(exc).__name__, "message": str(exc),
               "command": command, "partial_artifacts": str(out) if out else None}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
