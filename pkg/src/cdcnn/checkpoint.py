"""Binary checkpoints: magic, version, JSON header, little-endian f64 tensors.

Layout::

    b"CDCN" | u32 version | u32 header length | header (UTF-8 JSON)
    | tensors as f64 LE, in header order

The header lists ``[name, shape]`` per tensor plus the model config and
the network variant. A human-readable copy of the header is written next
to the checkpoint as ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, Network, _declaration_key

MAGIC = b"CDCN"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def _header(params: dict, model_config: ModelConfig, balanced: bool, extra: dict | None) -> dict:
    names = sorted(params, key=_declaration_key)
    return {
        "model": asdict(model_config),
        "balanced": bool(balanced),
        "tensors": [[n, list(params[n].shape)] for n in names],
        **({"meta": extra} if extra else {}),
    }


def save_checkpoint(path, params: dict, model_config: ModelConfig, balanced: bool = True,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    header = _header(params, model_config, balanced, meta)
    Network(model_config, "cdcnn", balanced).check_params(params)
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n, _ in header["tensors"]]
    try:
        path.write_bytes(b"".join(parts))
        sidecar(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    return path


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path):
    """Returns ``(params, model_config, balanced, meta)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(data[12:12 + n].decode())
        model_config = ModelConfig(**header["model"])
        balanced = bool(header["balanced"])
        tensors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    offset = 12 + n
    params = {}
    for name, shape in tensors:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after the last tensor")
    try:
        Network(model_config, "cdcnn", balanced).check_params(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return params, model_config, balanced, header.get("meta", {})
