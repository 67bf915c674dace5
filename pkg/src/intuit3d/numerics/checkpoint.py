"""Parameter checkpoints: JSON header followed by a little-endian float64 blob.

Layout::

    b"I3DCKPT1"                     8-byte magic
    uint64 LE                       header length in bytes
    header (UTF-8 JSON)             {"seed", "step", "meta", "records": [...]}
    blob                            concatenated '<f8' arrays in record order

Each record carries its name, shape, byte offset, byte length and a CRC32
of its bytes so that corruption can be pinned to a record.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"I3DCKPT1"


class CheckpointError(ValueError):
    pass


def save_params(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    seed: int = 0,
    step: int = 0,
    meta: Mapping[str, Any] | None = None,
) -> None:
    records = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"seed": int(seed), "step": int(step), "meta": dict(meta or {}), "records": records},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Returns ``(params, header)``; raises :class:`CheckpointError` on corruption."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    blob = data[16 + hlen :]
    params = {}
    for rec in header["records"]:
        start, n = rec["offset"], rec["nbytes"]
        raw = blob[start : start + n]
        if len(raw) != n:
            raise CheckpointError(f"{path}: record {rec['name']!r} truncated ({len(raw)} of {n} bytes)")
        if zlib.crc32(raw) != rec["crc32"]:
            raise CheckpointError(f"{path}: record {rec['name']!r} failed its checksum")
        expected = int(np.prod(rec["shape"], dtype=np.int64)) * 8
        if expected != n:
            raise CheckpointError(f"{path}: record {rec['name']!r} shape does not match its size")
        params[rec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).astype(np.float64)
    return params, header
