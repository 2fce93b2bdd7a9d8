import contextlib
import csv
import io
import json

import numpy as np
import pytest

from tqsed.audio import read_wav
from tqsed.cli import INCOMPLETE, OUTPUT_ROOT_ENV, main
from tqsed.config import RunConfig
from tqsed.metrics import MetricsReport

CONFIG = {
    "seed": 3,
    "synth": {"preset": "three_class", "n_clips": 10, "clip_seconds": 2.0},
    "separation": {"channels": [4, 8], "dprnn": {"hidden_size": 8}},
    "lass_train": {"max_steps": 4, "batch_size": 2, "learning_rate": 1e-3},
    "lass_eval": {"n_eval_clips": 3},
    "sed_branch": {"conv_filters": 16},
    "sed_train": {"max_epochs": 2, "batch_size": 4},
    "folds": {"k": 2},
}


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    parse = lambda s: json.loads(s) if s.strip() else None  # noqa: E731
    return code, parse(out.getvalue()), parse(err.getvalue())


def pipeline(root, config=CONFIG):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(config))
    steps = [
        ("synth", "--config", cfg, "--out-dir", root / "data"),
        ("train-lass", "--config", cfg, "--data", root / "data", "--out-dir", root / "lass"),
        ("train-sed", "--config", cfg, "--data", root / "data", "--framework", "tq_sed",
         "--separator", root / "lass" / "separator.ckpt", "--out-dir", root / "tq"),
        ("eval-sed", "--config", cfg, "--data", root / "data", "--predictions", root / "tq",
         "--out-dir", root / "tq_eval"),
    ]
    outs = []
    for argv in steps:
        code, out, err = run(*argv)
        assert code == 0, err
        assert out["status"] == "ok" and out["command"] == argv[0]
        outs.append(out)
    return outs


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    pipeline(root)
    return root


def test_full_pipeline_report_is_consistent(built):
    report = MetricsReport.from_json((built / "tq_eval" / "metrics_sed.json").read_text())
    kept = [v for v in report.per_class_f1 if v is not None]
    assert report.macro_f1 == pytest.approx(np.mean(kept), abs=1e-12)
    assert report.framework == "tq_sed" and report.threshold_source == "fitted_on_eval"
    assert report.separator_checksum is not None and report.config_hash is not None
    for row in report.overlap:
        if not row["never_active"]:
            assert sum(row["percentages"]) == pytest.approx(100.0, abs=0.01)
    assert not (built / "tq" / INCOMPLETE).exists()
    assert (built / "tq" / "sed_fold0.ckpt").exists() and (built / "tq" / "sed_fold1.ckpt").exists()


def test_eval_lass_oracle_estimates_hit_cap(built, tmp_path):
    code, out, _ = run("eval-lass", "--data", built / "data", "--estimates",
                       built / "data" / "stems", "--all-clips", "--out-dir", tmp_path)
    assert code == 0 and out["sdr"] == 100.0
    with open(tmp_path / "per_clip_lass.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["sdr"]) == 100.0 for r in rows)


def test_separate_preserves_length(built, tmp_path):
    wav = built / "data" / "audio" / "clip_00000.wav"
    code, out, _ = run("separate", "--checkpoint", built / "lass" / "separator.ckpt",
                       "--query", "tone_low", "--input", wav, "--out-dir", tmp_path)
    assert code == 0
    assert len(read_wav(out["output"])) == len(read_wav(wav)) == out["n_samples"]


def test_separate_wrong_rate_needs_resample(built, tmp_path):
    import scipy.io.wavfile
    scipy.io.wavfile.write(tmp_path / "x.wav", 8000, np.zeros(8000, np.float32))
    code, _, err = run("separate", "--checkpoint", built / "lass" / "separator.ckpt",
                       "--query", "tone_low", "--input", tmp_path / "x.wav", "--out-dir", tmp_path)
    assert code == 1 and err["error"] == "InvalidInputError" and "resample" in err["message"]
    code, out, _ = run("separate", "--checkpoint", built / "lass" / "separator.ckpt",
                       "--query", "tone_low", "--input", tmp_path / "x.wav", "--resample",
                       "--out-dir", tmp_path)
    assert code == 0 and out["n_samples"] == 16000


def test_validation_thresholds_are_labelled(built, tmp_path):
    cfg = dict(CONFIG, metrics={"threshold_source": "validation"})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = run("eval-sed", "--config", tmp_path / "c.json", "--data",
                       built / "data", "--predictions", built / "tq", "--out-dir", tmp_path)
    assert code == 0 and out["threshold_source"] == "fitted_on_other_folds"
    report = MetricsReport.from_json((tmp_path / "metrics_sed.json").read_text())
    assert len(report.per_fold) == 2


def test_report_tables_and_plot(built, tmp_path):
    code, out, _ = run("report", built / "tq_eval" / "metrics_sed.json", "--plot",
                       "--out-dir", tmp_path)
    assert code == 0
    assert set(out["written"]) == {"table_detection.csv", "per_class_f1.csv", "overlap.csv",
                                   "per_class_f1.png"}
    with open(tmp_path / "table_detection.csv") as fh:
        row = next(csv.DictReader(fh))
    report = json.loads((built / "tq_eval" / "metrics_sed.json").read_text())
    assert row["config_hash"] == report["config_hash"]
    assert row["separator_checksum"] == report["separator_checksum"]


def test_tq_sed_without_separator_leaves_marker(built, tmp_path):
    code, _, err = run("train-sed", "--data", built / "data", "--framework", "tq_sed",
                       "--out-dir", tmp_path)
    assert code == 1 and err["status"] == "error"
    assert err["partial_artifacts"] == str(tmp_path)
    assert (tmp_path / INCOMPLETE).exists()


def test_usage_and_config_errors(tmp_path):
    code, _, err = run("nonsense")
    assert code == 2 and err["error"] == "UsageError"
    (tmp_path / "bad.json").write_text(json.dumps({"synth": {"n_clips": 1, "colour": "red"}}))
    code, _, err = run("synth", "--config", tmp_path / "bad.json", "--out-dir",
                       tmp_path / "o")
    assert code == 1 and err["error"] == "ConfigurationError" and "colour" in err["message"]
    assert not (tmp_path / "o").exists()


def test_synth_zero_clips_and_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    code, out, _ = run("synth", "--n-clips", "0")
    assert code == 0 and out["n_clips"] == 0
    root = tmp_path / "synth"
    assert (root / "manifest_lass.jsonl").read_text() == ""
    assert (root / "manifest_sed.jsonl").read_text() == ""
    assert not (root / "audio").exists()


def test_run_config_schema():
    cfg = RunConfig.from_dict(CONFIG)
    assert cfg.separation_config().channels == (4, 8)
    assert cfg.sed_branch_config().conv_filters == 16
    assert cfg.lass_train_config().seed == 3
    assert cfg.with_overrides(seed=4).hash() != cfg.hash()
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).hash() == cfg.hash()
    with pytest.raises(ValueError, match="dprnn"):
        RunConfig.from_dict({"separation": {"dprnn": {"hidden": 3}}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"sed_branch": {"conv_filters": -1}})


def test_pipeline_is_byte_deterministic(built, tmp_path):
    pipeline(tmp_path)
    for rel in ("lass/loss_lass.csv", "tq/loss_sed_fold0.csv", "tq/loss_sed_fold1.csv",
                "tq_eval/metrics_sed.json", "lass/separator.ckpt"):
        assert (tmp_path / rel).read_bytes() == (built / rel).read_bytes(), rel
