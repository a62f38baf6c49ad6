"""Shared checkpoint archive format.

A checkpoint is a ZIP holding `manifest.json` (format version, model family,
arch config, tensor index) and `tensors.bin` (raw little-endian float32
payloads at the offsets the manifest declares). Entries are stored
uncompressed with fixed timestamps, so identical weights produce
byte-identical archives.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .nets import SegModel, build_from_config

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    family: str
    config: dict
    tensors: dict[str, np.ndarray]


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, family: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    index = []
    blob = bytearray()
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": len(blob),
            "nbytes": arr.nbytes,
        })
        blob += arr.tobytes()
    manifest = {
        "format_version": FORMAT_VERSION,
        "family": family,
        "config": config,
        "tensors": index,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        _write_entry(zf, "tensors.bin", bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if "format_version" not in manifest:
        raise CheckpointError(f"{path}: manifest lacks a format_version field")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest['format_version']}"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != expected:
            raise CheckpointError(
                f"{path}: tensor {entry['name']} declares shape {shape} "
                f"but {entry['nbytes']} bytes"
            )
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} payload truncated")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return Checkpoint(family=manifest["family"], config=manifest["config"], tensors=tensors)


def save_model(path, model: SegModel) -> None:
    """Serialize a SegModel (family + arch config + state dict)."""
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, model.family, model.config_dict(), tensors)


def load_model(path) -> SegModel:
    """Rebuild a SegModel from an archive, re-injecting LoRA when recorded."""
    ckpt = load_checkpoint(path)
    model = build_from_config(ckpt.family, ckpt.config)
    state = {k: torch.from_numpy(v) for k, v in ckpt.tensors.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensor index does not match the model: {exc}") from exc
    model.eval()
    return model
