"""Checkpoint archives: a zip holding ``meta.json`` (format tag, kind, config, extras)
and one ``.npy`` blob per parameter/buffer tensor.

Archives are written with fixed timestamps so identical weights give identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_TAG = "tqsed-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointFormatError(ValueError):
    pass


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, kind: str, config: dict, state_dict: dict, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT_TAG, "kind": kind, "config": config, "extra": extra or {},
            "tensors": sorted(state_dict)}
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name in sorted(state_dict):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, state_dict[name].detach().cpu().numpy(),
                                      allow_pickle=False)
            _write(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path, expected_kind: str | None = None):
    """Return (meta, state_dict). Unknown format tags and kind mismatches raise."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT_TAG:
            raise CheckpointFormatError(
                f"{path}: unsupported checkpoint format {meta.get('format')!r}, "
                f"expected {FORMAT_TAG!r}")
        if expected_kind is not None and meta.get("kind") != expected_kind:
            raise CheckpointFormatError(
                f"{path}: checkpoint holds a {meta.get('kind')!r}, expected {expected_kind!r}")
        state = {name: torch.from_numpy(np.lib.format.read_array(
            io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False))
            for name in meta["tensors"]}
    return meta, state


def save_separator(path, separator, encoder):
    state = {f"separator.{k}": v for k, v in separator.state_dict().items()}
    state.update({f"encoder.{k}": v for k, v in encoder.state_dict().items()})
    save_checkpoint(path, "separator", separator.config.to_dict(), state, {
        "encoder_id": encoder.encoder_id, "vocabulary": list(encoder.vocabulary),
        "embedding_dim": encoder.embedding_dim, "checksum": state_checksum(separator)})


def load_separator(path):
    from .separation import LookupTextEncoder, SeparationConfig, Separator

    meta, state = load_checkpoint(path, "separator")
    sep = Separator(SeparationConfig.from_dict(meta["config"]))
    enc = LookupTextEncoder(meta["extra"]["vocabulary"], meta["extra"]["embedding_dim"])
    sep.load_state_dict({k[len("separator."):]: v for k, v in state.items()
                         if k.startswith("separator.")})
    enc.load_state_dict({k[len("encoder."):]: v for k, v in state.items()
                         if k.startswith("encoder.")})
    sep.eval()
    enc.eval()
    return sep, enc


def save_sed(path, model, separator_checksum: str | None = None):
    from dataclasses import asdict

    config = {"framework": model.framework, "vocabulary": list(model.vocabulary.labels),
              "branch": model.branch_config.to_dict(), "logmel": asdict(model.logmel_params)}
    save_checkpoint(path, "sed", config, model.state_dict(),
                    {"separator_checksum": separator_checksum})


def load_sed(path, separator=None, encoder=None):
    from .audio import LogMelParams
    from .sed import EventVocabulary, TsedBranchConfig, build_sed_model

    meta, state = load_checkpoint(path, "sed")
    cfg = meta["config"]
    want = meta["extra"].get("separator_checksum")
    if cfg["framework"] == "tq_sed" and separator is not None and want is not None:
        have = state_checksum(separator)
        if have != want:
            raise CheckpointFormatError(
                f"{path}: trained against separator {want[:12]}, got {have[:12]}")
    model = build_sed_model(cfg["framework"], EventVocabulary(tuple(cfg["vocabulary"])),
                            TsedBranchConfig(**cfg["branch"]), separator, encoder,
                            LogMelParams(**cfg["logmel"]))
    model.load_state_dict(state)
    model.eval()
    return model
