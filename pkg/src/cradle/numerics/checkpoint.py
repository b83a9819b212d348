"""Flat binary tensor checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"CRDLCKPT"
    version      uint32    FORMAT_VERSION
    n_tensors    uint32
    n_tensors x  table entry:
        name_len uint16, name utf-8 bytes,
        ndim     uint8,  dims uint64 * ndim
    payload      float64 little-endian, row-major, tensors in table order
    checksum     32 bytes  sha256 of everything before it

A JSON sidecar (``<path>.json``) carries the manifest.  Writes go to a
temporary file that is renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRDLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _atomic_write(path, blob):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_tensors(tensors):
    head = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(head) + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def decode_tensors(blob):
    if len(blob) < 48 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is corrupt or truncated (checksum mismatch)")
    version, n = struct.unpack_from("<II", body, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * size
        if end > len(body):
            raise CheckpointError("checkpoint payload truncated")
        out[name] = np.frombuffer(body[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return out


def save_checkpoint(tensors, manifest, path):
    path = Path(path)
    manifest = dict(manifest, format_version=FORMAT_VERSION,
                    shapes={k: list(np.shape(v)) for k, v in tensors.items()})
    _atomic_write(path, encode_tensors(tensors))
    _atomic_write(manifest_path(path), json.dumps(manifest, indent=2, sort_keys=True).encode())


def load_checkpoint(path, expect=None):
    """Load tensors and manifest; ``expect`` maps manifest fields to required values."""
    path = Path(path)
    try:
        blob = path.read_bytes()
        manifest = json.loads(manifest_path(path).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    tensors = decode_tensors(blob)
    for field, want in (expect or {}).items():
        if manifest.get(field) != want:
            raise CheckpointError(
                f"checkpoint manifest mismatch on {field!r}: file has {manifest.get(field)!r}, expected {want!r}"
            )
    for name, shape in manifest.get("shapes", {}).items():
        if name not in tensors or list(tensors[name].shape) != shape:
            raise CheckpointError(f"checkpoint tensor {name!r} does not match manifest shape {shape}")
    return tensors, manifest
