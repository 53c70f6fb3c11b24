"""
Binary checkpoint format (version 1), all integers little-endian:

    offset  size  field
    0       4     magic b"MOER"
    4       4     format version, u32
    8       8     header length H in bytes, u64
    16      H     UTF-8 JSON header
    16+H    ...   payload: raw float64 little-endian arrays, manifest order

The header is ``{"config": {...}, "config_hash": sha256-hex,
"arrays": [{"name", "shape", "offset"}, ...], "payload_bytes": int}``.
``offset`` is relative to the payload start. JSON is written with sorted keys
and no whitespace, so equal models give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from reroute.model import ModelConfig, MoEModel, param_shapes

MAGIC = b"MOER"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


def to_bytes(model: MoEModel) -> bytes:
    cfg = model.config
    manifest, offset = [], 0
    for name, shape in param_shapes(cfg).items():
        manifest.append({"name": name, "shape": list(shape), "offset": offset})
        offset += int(np.prod(shape)) * 8
    header = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "arrays": manifest,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(model.params[m["name"]], dtype="<f8").tobytes() for m in manifest]
    return b"".join(parts)


def from_bytes(blob: bytes) -> MoEModel:
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError(f"file too short for header prefix ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise TruncatedCheckpointError("header truncated")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        stored_hash = header["config_hash"]
        manifest = header["arrays"]
        payload_bytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed header: {exc}") from exc
    if cfg.digest() != stored_hash:
        raise ConfigHashMismatchError("config hash does not match stored config")
    if len(blob) - start < payload_bytes:
        raise TruncatedCheckpointError(f"payload has {len(blob) - start} of {payload_bytes} bytes")
    if len(blob) - start > payload_bytes:
        raise ManifestError("trailing bytes after payload")

    expected = param_shapes(cfg)
    if [m.get("name") for m in manifest] != list(expected):
        raise ManifestError("array manifest does not match config")
    params = {}
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]]:
            raise ManifestError(f"{m['name']}: shape {shape} != {expected[m['name']]}")
        count = int(np.prod(shape))
        lo = start + int(m["offset"])
        if lo < start or lo + 8 * count > len(blob):
            raise ManifestError(f"{m['name']}: offset out of range")
        params[m["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=lo).reshape(shape).astype(np.float64)
    return MoEModel(cfg, params)


def save_checkpoint(model: MoEModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)


def load_checkpoint(path) -> MoEModel:
    return from_bytes(Path(path).read_bytes())
