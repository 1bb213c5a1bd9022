"""Checkpoint files for :class:`PolicyParams`.

Binary layout: the 8-byte magic ``GRPOLAB\\x00``, a little-endian uint32 header
length, a UTF-8 JSON header, then the flat weights as little-endian float64
in partition order.  The JSON layout carries the same header plus the weights
as decimal strings.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .policy import PolicyParams, Vocabulary

FORMAT_VERSION = 1
MAGIC = b"GRPOLAB\x00"


class CheckpointError(ValueError):
    pass


def _header(params: PolicyParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "context_window": params.context_window,
        "embed_dim": params.embed_dim,
        "hidden_dim": params.hidden_dim,
        "vocab": list(params.vocab.tokens),
        "partitions": [[name, list(shape)] for name, shape in params.shapes.items()],
    }


def _from_header(header: dict, weights: np.ndarray) -> PolicyParams:
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')!r}")
    try:
        return PolicyParams(
            Vocabulary(tuple(header["vocab"])),
            int(header["context_window"]),
            int(header["embed_dim"]),
            int(header["hidden_dim"]),
            weights,
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header missing {exc.args[0]!r}") from None


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_bytes(params: PolicyParams) -> bytes:
    header = json.dumps(_header(params), sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + params.weights.astype("<f8").tobytes()


def from_bytes(data: bytes) -> PolicyParams:
    if data[:8] != MAGIC:
        raise CheckpointError("not a binary checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    weights = np.frombuffer(data[12 + n:], dtype="<f8").astype(np.float64)
    return _from_header(header, weights)


def to_json(params: PolicyParams) -> str:
    doc = _header(params)
    doc["weights"] = [repr(float(w)) for w in params.weights]
    return json.dumps(doc, sort_keys=True)


def from_json(text: str) -> PolicyParams:
    doc = json.loads(text)
    weights = np.array([float(w) for w in doc.pop("weights")], dtype=np.float64)
    return _from_header(doc, weights)


def save(params: PolicyParams, path: str | os.PathLike) -> None:
    """Write a checkpoint; ``.json`` suffix selects the text layout."""
    if str(path).endswith(".json"):
        atomic_write_bytes(path, to_json(params).encode())
    else:
        atomic_write_bytes(path, to_bytes(params))


def load(path: str | os.PathLike) -> PolicyParams:
    data = Path(path).read_bytes()
    if data[:8] == MAGIC:
        return from_bytes(data)
    try:
        return from_json(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
