"""Versioned checkpoint container with content hashing and lineage.

Layout: an 8-byte magic, an 8-byte little-endian header length, a JSON
header, then the raw little-endian parameter bytes in manifest order. The
header records a sha256 over (metadata, parameter bytes); loading recomputes
it, so silent corruption or edits surface as CheckpointError instead of as a
quietly different model. Each checkpoint carries the content hash of its
parent and the summarised chain of ancestors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"C2TSECKP"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"float32", "float64", "int64", "int8"}


@dataclasses.dataclass
class Checkpoint:
    """In-memory view of a container file."""

    kind: str
    config: dict
    arrays: dict  # name -> np.ndarray, insertion-ordered
    stage: str | None
    mode: str | None
    step: int
    seed: int | None
    parent_hash: str | None
    lineage: list
    content_hash: str


def _meta_for_hash(kind, config, stage, mode, step, params) -> bytes:
    meta = {
        "kind": kind,
        "config": config,
        "stage": stage,
        "mode": mode,
        "step": step,
        "params": [[p["name"], p["shape"], p["dtype"]] for p in params],
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def compute_content_hash(kind, config, arrays, stage=None, mode=None, step=0) -> str:
    """Hash of a checkpoint's identity without writing it to disk."""
    params, blobs = _param_table(arrays)
    h = hashlib.sha256()
    h.update(_meta_for_hash(kind, config, stage, mode, step, params))
    for blob in blobs:
        h.update(blob)
    return "sha256:" + h.hexdigest()


def _param_table(arrays):
    params = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"refusing to store array {name!r} of dtype {dtype}")
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        params.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    return params, blobs


def save_checkpoint(
    path,
    kind: str,
    config: dict,
    arrays: dict,
    *,
    stage: str | None = None,
    mode: str | None = None,
    step: int = 0,
    seed: int | None = None,
    parent_hash: str | None = None,
    lineage: list | None = None,
) -> str:
    """Write a container; returns its content hash."""
    params, blobs = _param_table(arrays)
    h = hashlib.sha256()
    h.update(_meta_for_hash(kind, config, stage, mode, step, params))
    for blob in blobs:
        h.update(blob)
    content_hash = "sha256:" + h.hexdigest()

    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "stage": stage,
        "mode": mode,
        "step": step,
        "seed": seed,
        "parent_hash": parent_hash,
        "lineage": list(lineage or []),
        "params": params,
        "content_hash": content_hash,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return content_hash


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a container; CheckpointError on any mismatch."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: damaged header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    body = blob[16 + header_len :]
    arrays = {}
    for p in header["params"]:
        raw = body[p["offset"] : p["offset"] + p["nbytes"]]
        if len(raw) != p["nbytes"]:
            raise CheckpointError(f"{path}: truncated parameter {p['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(p["dtype"]).newbyteorder("<")).reshape(p["shape"])
        arrays[p["name"]] = arr.astype(p["dtype"])

    recomputed = compute_content_hash(
        header["kind"], header["config"], arrays, header["stage"], header["mode"], header["step"]
    )
    if recomputed != header["content_hash"]:
        raise CheckpointError(f"{path}: content hash mismatch (file tampered or corrupt)")

    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        arrays=arrays,
        stage=header["stage"],
        mode=header["mode"],
        step=header["step"],
        seed=header["seed"],
        parent_hash=header["parent_hash"],
        lineage=header["lineage"],
        content_hash=header["content_hash"],
    )


def lineage_of(ckpt: Checkpoint) -> list:
    """Ancestor chain plus the checkpoint itself, oldest first."""
    own = {
        "stage": ckpt.stage,
        "mode": ckpt.mode,
        "hash": ckpt.content_hash,
        "seed": ckpt.seed,
        "step": ckpt.step,
    }
    return list(ckpt.lineage) + [own]
