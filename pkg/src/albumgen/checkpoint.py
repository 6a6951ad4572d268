"""Checkpoint archive: named tensors plus a config dict, bit-exact round trip.

Layout:
    bytes 0..3   magic ``CHZ1``
    bytes 4..7   header length (uint32, little-endian)
    header       UTF-8 JSON: {"version", "config", "tensors": [
                     {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw little-endian array bytes, offsets relative to the
                 first payload byte
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CHZ1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_archive(path, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write arrays (insertion order preserved) and config to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str if arr.dtype.byteorder != "=" else "<" + arr.dtype.str[1:],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "version": FORMAT_VERSION,
        "config": config or {},
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, config). Raises CheckpointError on a bad file."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CHZ1 archive")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    payload = raw[8 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        start, n = ent["offset"], ent["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: tensor {ent['name']!r} runs past end of file")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(ent["dtype"]))
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return arrays, header.get("config", {})
