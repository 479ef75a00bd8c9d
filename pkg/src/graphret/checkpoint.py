"""Versioned binary container for named float64 tensors.

Layout: 8-byte magic, little-endian u32 header length, JSON header, then
each tensor's raw little-endian float64 data in header order.  Loaders
reject version, component, or shape mismatches.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, ValidationError

MAGIC = b"GRCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path, component: str, dims: dict, tensors: dict[str, np.ndarray]):
    header = {
        "format_version": FORMAT_VERSION,
        "component": component,
        "hidden_dim": int(dims["hidden_dim"]),
        "layers": int(dims["layers"]),
        "text_dim": int(dims["text_dim"]),
        "extra": {k: int(v) for k, v in dims.items() if k not in ("hidden_dim", "layers", "text_dim")},
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path, expected_component: str | None = None):
    """Return (header, {name: array}).  Raises on any structural mismatch."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = p.read_bytes()
    if raw[:8] != MAGIC:
        raise ValidationError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValidationError(f"corrupt checkpoint header: {path}")
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {header.get('format_version')} in {path}"
        )
    if expected_component is not None and header.get("component") != expected_component:
        raise ValidationError(
            f"expected component {expected_component!r}, found {header.get('component')!r} in {path}"
        )
    tensors = {}
    offset = 12 + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValidationError(f"checkpoint payload truncated: {path}")
        tensors[spec["name"]] = (
            np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        )
        offset = end
    if offset != len(raw):
        raise ValidationError(f"trailing bytes after tensor payload: {path}")
    return header, tensors
