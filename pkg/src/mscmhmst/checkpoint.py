"""Binary checkpoint: magic, header length, JSON header, raw float64 data.

Layout::

    b"MSCKPT\\x00\\x01"                 8 bytes
    header length                       uint64 little-endian
    header                              UTF-8 JSON, sorted keys
    parameter values                    little-endian float64, manifest order

The header records the format version, the model config, one manifest
entry per array (name, shape, byte offset into the data block) and the
total parameter count.  ``experiment`` carries what evaluation needs to
rebuild the data pipeline (split lengths, sensor ids, normalisation).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError
from .model import MSCMHMSTModel, ModelConfig, build_variant

MAGIC = b"MSCKPT\x00\x01"
FORMAT_VERSION = 1


def encode(model: MSCMHMSTModel, manifest_hash: str = "", experiment: dict | None = None) -> bytes:
    arrays, offset, chunks = [], 0, []
    for name, p in model.params.items():
        raw = p.data.astype("<f8").tobytes()
        arrays.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    header = {
        "format": "mscmhmst-checkpoint",
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "arrays": arrays,
        "total_parameters": model.count_parameters(),
        "data_bytes": offset,
        "manifest_sha256": manifest_hash,
        "experiment": experiment or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(
    path: str | Path, model: MSCMHMSTModel, manifest_hash: str = "", experiment: dict | None = None
) -> None:
    Path(path).write_bytes(encode(model, manifest_hash, experiment))


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from None
    if not isinstance(header, dict) or header.get("version") != FORMAT_VERSION:
        raise CheckpointError("unsupported checkpoint version")
    for key in ("config", "arrays", "total_parameters", "data_bytes"):
        if key not in header:
            raise CheckpointError(f"checkpoint header lacks {key!r}")
    return header, 16 + n


def decode(blob: bytes) -> tuple[MSCMHMSTModel, dict]:
    header, start = read_header(blob)
    data = blob[start:]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(
            f"checkpoint data block is {len(data)} bytes, header says {header['data_bytes']}"
        )
    try:
        model = build_variant(ModelConfig.from_dict(header["config"]))
    except (ConfigurationError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from None
    state = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        if off + 8 * count > len(data):
            raise CheckpointError(f"array {entry['name']!r} runs past the data block")
        state[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
    try:
        model.params.load_state_dict(state)
    except ConfigurationError as exc:
        raise CheckpointError(str(exc)) from None
    if model.count_parameters() != header["total_parameters"]:
        raise CheckpointError("parameter total does not match header")
    return model, header


def load_checkpoint(path: str | Path) -> tuple[MSCMHMSTModel, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)
