"""Versioned binary checkpoints.

Layout (all little-endian)::

    bytes 0..3   magic  b"PKCK"
    bytes 4..5   format version (uint16)
    bytes 6..7   reserved
    bytes 8..39  sha256 of everything that follows
    bytes 40..   payload: uint64 JSON-header length, JSON header,
                 then raw array blobs in header order

The header carries the run config echo, the network recipe, the RNG state
and one record per array. Dense weights are stored in full together with
bit-packed masks: online pruning needs the dense tensor so pruned weights
can return. Loads verify the checksum before any state is applied.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Dict, Optional

import numpy as np

from .errors import (CheckpointChecksumError, CheckpointError,
                     CheckpointTruncatedError, CheckpointVersionError)

MAGIC = b"PKCK"
VERSION = 1


def _pack_array(arr: np.ndarray, name: str, kind: str):
    if arr.dtype == bool:
        payload = np.packbits(arr.reshape(-1))
        record = {"name": name, "kind": kind, "dtype": "packed-bool",
                  "shape": list(arr.shape)}
        return record, payload.tobytes()
    arr_le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    record = {"name": name, "kind": kind, "dtype": arr_le.dtype.str,
              "shape": list(arr.shape)}
    return record, arr_le.tobytes()


def _unpack_array(record: dict, blob: bytes) -> np.ndarray:
    shape = tuple(record["shape"])
    if record["dtype"] == "packed-bool":
        n = int(np.prod(shape)) if shape else 1
        bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=n)
        return bits.astype(bool).reshape(shape)
    return np.frombuffer(blob, dtype=np.dtype(record["dtype"])).reshape(shape).copy()


def save_checkpoint(path: str, snapshot: dict, network_meta: dict,
                    config_raw: Optional[dict] = None) -> None:
    """Write a resumable checkpoint.

    ``snapshot`` is the dict produced by the training loop: epoch, params,
    buffers, masks, momentum, data_rng. ``network_meta`` is the structural
    recipe needed to rebuild the module graph.
    """
    records = []
    blobs = []
    for kind, table in (("param", snapshot["params"]),
                        ("buffer", snapshot["buffers"]),
                        ("momentum", snapshot["momentum"])):
        for name in sorted(table):
            rec, blob = _pack_array(np.asarray(table[name]), name, kind)
            records.append(rec)
            blobs.append(blob)
    for name in sorted(snapshot["masks"]):
        mask = snapshot["masks"][name]
        if mask is None:
            continue
        rec, blob = _pack_array(np.asarray(mask, dtype=bool), name, "mask")
        records.append(rec)
        blobs.append(blob)

    header = {
        "epoch": int(snapshot["epoch"]),
        "rng": snapshot["data_rng"],
        "network": network_meta,
        "config": config_raw,
        "records": records,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    blob = MAGIC + VERSION.to_bytes(2, "little") + b"\x00\x00" + digest + payload
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    """Read and verify a checkpoint; returns the snapshot dict plus the
    stored network recipe and config echo."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 40:
        raise CheckpointTruncatedError(f"{path}: file shorter than header")
    if raw[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {raw[:4]!r}")
    version = int.from_bytes(raw[4:6], "little")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {VERSION}")
    digest = raw[8:40]
    payload = raw[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    if len(payload) < 8:
        raise CheckpointTruncatedError(f"{path}: payload shorter than header length")
    header_len = int.from_bytes(payload[:8], "little")
    if len(payload) < 8 + header_len:
        raise CheckpointTruncatedError(f"{path}: truncated JSON header")
    try:
        header = json.loads(payload[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc

    arrays: Dict[str, Dict[str, np.ndarray]] = {
        "param": {}, "buffer": {}, "momentum": {}, "mask": {}}
    offset = 8 + header_len
    for rec in header["records"]:
        if rec["dtype"] == "packed-bool":
            n = int(np.prod(rec["shape"])) if rec["shape"] else 1
            nbytes = (n + 7) // 8
        else:
            n = int(np.prod(rec["shape"])) if rec["shape"] else 1
            nbytes = n * np.dtype(rec["dtype"]).itemsize
        blob = payload[offset:offset + nbytes]
        if len(blob) != nbytes:
            raise CheckpointTruncatedError(
                f"{path}: record {rec['name']!r} truncated")
        arrays[rec["kind"]][rec["name"]] = _unpack_array(rec, blob)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")

    return {
        "epoch": header["epoch"],
        "params": arrays["param"],
        "buffers": arrays["buffer"],
        "momentum": arrays["momentum"],
        "masks": arrays["mask"],
        "data_rng": header["rng"],
        "network": header["network"],
        "config": header.get("config"),
    }
