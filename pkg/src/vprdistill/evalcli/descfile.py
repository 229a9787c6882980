"""Descriptor files: a JSON header followed by little-endian float32 rows.

Layout::

    b"VPRDESC\\0" | uint64 LE header length | header JSON | count * dim <f4

The header carries ``format_version``, ``dim``, ``count``, ``model_digest``
and the row ids. Descriptors are produced in float32, so the round trip is
exact for matrices coming out of a model.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import FormatError, ProvenanceError
from .retrieval import RetrievalIndex

MAGIC = b"VPRDESC\0"
FORMAT_VERSION = 1


def save_descriptors(index: RetrievalIndex, path: str | Path) -> None:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "dim": index.dim,
        "count": len(index),
        "model_digest": index.model_digest,
        "ids": list(index.ids),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    rows = np.ascontiguousarray(index.matrix, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + struct.pack("<Q", len(blob)) + blob + rows)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_descriptors(path: str | Path, expected_digest: str | None = None) -> RetrievalIndex:
    """Read a descriptor file.

    With ``expected_digest`` set, a file written for another model raises
    :class:`ProvenanceError`.
    """
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a descriptor file")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise FormatError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    try:
        header = json.loads(data[off : off + n].decode("utf-8"))
        version, dim, count = header["format_version"], int(header["dim"]), int(header["count"])
        ids = [str(i) for i in header["ids"]]
        digest = str(header.get("model_digest", ""))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(ids) != count or dim < 0:
        raise FormatError(f"{path}: header lists {len(ids)} ids for count {count}")
    body = data[off + n :]
    if len(body) != 4 * dim * count:
        raise FormatError(f"{path}: expected {4 * dim * count} bytes of rows, found {len(body)}")
    if expected_digest is not None and digest != expected_digest:
        raise ProvenanceError(f"{path}: descriptors come from model {digest[:12]}, expected {expected_digest[:12]}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)
    return RetrievalIndex(ids, matrix, digest)
