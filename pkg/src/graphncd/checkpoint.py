"""Binary checkpoint container.

Byte layout, in order:

  bytes 0..7    header length L as little-endian unsigned 64-bit integer
  bytes 8..8+L  UTF-8 JSON header: {"format_version": 1, "meta": {...},
                "tensors": [{"name": str, "rows": int, "cols": int}, ...]}
                serialized with sorted keys and no whitespace
  remainder     for each tensor in header order, rows*cols float64 values,
                little-endian, row-major, concatenated with no padding

Serialization is fully deterministic: identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or truncated checkpoint file."""


def save_checkpoint(path: str, tensors: list[tuple[str, np.ndarray]], meta: dict) -> None:
    entries = []
    blobs = []
    for name, arr in tensors:
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        if a.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D, got shape {a.shape}")
        entries.append({"name": name, "rows": int(a.shape[0]), "cols": int(a.shape[1])})
        blobs.append(a.astype("<f8").tobytes(order="C"))
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": entries},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (meta, {name: array}) or raises CheckpointError."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 8:
        raise CheckpointError(f"{path}: too short for a header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}")
    tensors: dict[str, np.ndarray] = {}
    offset = 8 + hlen
    for entry in header["tensors"]:
        rows, cols = int(entry["rows"]), int(entry["cols"])
        nbytes = rows * cols * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        flat = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8")
        tensors[entry["name"]] = flat.reshape(rows, cols).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header.get("meta", {}), tensors
