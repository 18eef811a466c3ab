"""On-disk artifact helpers shared by every pipeline stage.

Checkpoints use one container layout: a little-endian u32 byte length,
a UTF-8 JSON header, then float32 array blobs concatenated in the order
the header declares.  Writes go through a temp file + rename so an
interrupted command never leaves a truncated artifact at the target
path.  Nothing here writes timestamps: identical inputs must produce
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ArtifactFormatError


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_blob_file(path: str | Path, header: dict, arrays: list[np.ndarray]) -> None:
    """Serialize header + named f32 blobs; header['arrays'] records shapes."""
    header = dict(header)
    header["arrays"] = [list(a.shape) for a in arrays]
    head = canonical_json(header).encode("utf-8")
    parts = [struct.pack("<I", len(head)), head]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_blob_file(path: str | Path, expected_format: str) -> tuple[dict, list[np.ndarray]]:
    """Inverse of write_blob_file; arrays come back as float64."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ArtifactFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + hlen:
        raise ArtifactFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactFormatError(f"{path}: bad header: {exc}") from exc
    if header.get("format") != expected_format:
        raise ArtifactFormatError(
            f"{path}: expected format {expected_format!r}, found {header.get('format')!r}")
    offset = 4 + hlen
    arrays: list[np.ndarray] = []
    for shape in header.get("arrays", []):
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise ArtifactFormatError(f"{path}: truncated blob at offset {offset}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays.append(arr.astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(raw):
        raise ArtifactFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def snap_f32(a: np.ndarray) -> np.ndarray:
    """Round-trip through float32 so in-memory values match their
    serialized form bit for bit."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)
