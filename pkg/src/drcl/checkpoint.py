"""Versioned binary checkpoints for flat parameter vectors.

Layout::

    b"DRCLCKPT"                 8 bytes magic
    version                     uint32 little-endian
    header length               uint32 little-endian
    header                      UTF-8 JSON: d, layout, config_hash, payload_sha256, meta
    payload                     d little-endian float64
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointHashError, CheckpointVersionError, FormatError, TruncatedFileError

MAGIC = b"DRCLCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path, params: np.ndarray, meta: dict | None = None, layout=None,
                    config_hash: str = "") -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    if params.ndim != 1:
        raise FormatError(f"checkpoints hold flat vectors, got shape {params.shape}")
    payload = params.tobytes()
    header = {
        "d": int(params.size),
        "layout": [list(map(int, s[:2])) + [bool(s[2])] for s in (layout or [])],
        "config_hash": config_hash,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload)


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[np.ndarray, dict]:
    """Read a checkpoint; returns ``(params, header)``.

    Raises :class:`TruncatedFileError` for short files,
    :class:`CheckpointVersionError` for unknown versions,
    :class:`CheckpointHashError` for digest or config-hash mismatches and
    :class:`FormatError` for any other inconsistency.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError(f"checkpoint {path}: expected at least {_PREFIX.size} bytes, got {len(buf)}",
                                 expected=_PREFIX.size, actual=len(buf))
    magic, version, head_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"checkpoint {path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint {path}: version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + head_len
    if len(buf) < start:
        raise TruncatedFileError(f"checkpoint {path}: header cut short", expected=start, actual=len(buf))
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
        d = int(header["d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint {path}: unreadable header ({exc})") from exc
    payload = buf[start:]
    if len(payload) < 8 * d:
        raise TruncatedFileError(f"checkpoint {path}: expected {start + 8 * d} bytes, got {len(buf)}",
                                 expected=start + 8 * d, actual=len(buf))
    if len(payload) != 8 * d:
        raise FormatError(f"checkpoint {path}: header declares d={d} but payload holds {len(payload) / 8:g} floats")
    if header.get("layout") and sum(r * c + (c if b else 0) for r, c, b in header["layout"]) != d:
        raise FormatError(f"checkpoint {path}: layout does not add up to d={d}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointHashError(f"checkpoint {path}: payload digest mismatch")
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise CheckpointHashError(
            f"checkpoint {path}: config hash {header.get('config_hash')} != expected {expected_hash}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64), header
