"""Reading and writing TT tensors and sample sets.

Binary TT container (all integers little-endian)::

    offset  size        field
    0       8           magic  b"TTQTENS\\x00"
    8       4           uint32 version (currently 1)
    12      4           uint32 d
    16      8*d         uint64 dims n_1..n_d
    ..      8*(d+1)     uint64 ranks r_0..r_d
    ..      8*sum(...)  float64 cores, core 1 first, each in C (row-major)
                        order of its (r_{k-1}, n_k, r_k) array

JSON debug format: an object ``{"format": "ttq-json", "version": 1,
"dims": [...], "ranks": [...], "cores": [...]}`` where every core is a
nested list of shape ``(r_{k-1}, n_k, r_k)``.  Floats are written with
``repr`` precision so the round trip is exact.

Sample set text format: first line ``d n_1 ... n_d m``, then ``m`` lines
``i_1 ... i_d value`` with 1-based indices and values in ``repr``
precision.  Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .completion import SampleSet
from .tensor import TTTensor

__all__ = [
    "MAGIC",
    "VERSION",
    "FormatError",
    "dumps_tt",
    "loads_tt",
    "save_tt",
    "load_tt",
    "tt_to_json",
    "tt_from_json",
    "save_tt_json",
    "load_tt_json",
    "save_samples",
    "load_samples",
]

MAGIC = b"TTQTENS\x00"
VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


def dumps_tt(X: TTTensor) -> bytes:
    d = X.ndim
    parts = [MAGIC, struct.pack("<II", VERSION, d)]
    parts.append(np.asarray(X.dims, dtype="<u8").tobytes())
    parts.append(np.asarray(X.ranks, dtype="<u8").tobytes())
    for G in X.cores:
        parts.append(np.ascontiguousarray(G, dtype="<f8").tobytes(order="C"))
    return b"".join(parts)


def loads_tt(buf: bytes) -> TTTensor:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise FormatError("not a TT container (bad magic)")
    version, d = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if d < 1:
        raise FormatError("d must be positive")
    off = 16
    need = off + 8 * d + 8 * (d + 1)
    if len(buf) < need:
        raise FormatError("truncated header")
    dims = np.frombuffer(buf, dtype="<u8", count=d, offset=off).astype(np.int64)
    off += 8 * d
    ranks = np.frombuffer(buf, dtype="<u8", count=d + 1, offset=off).astype(np.int64)
    off += 8 * (d + 1)
    cores = []
    for k in range(d):
        shape = (int(ranks[k]), int(dims[k]), int(ranks[k + 1]))
        size = shape[0] * shape[1] * shape[2]
        if len(buf) < off + 8 * size:
            raise FormatError(f"truncated core {k}")
        cores.append(np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64))
        off += 8 * size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes")
    try:
        return TTTensor(cores)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_tt(X: TTTensor, path) -> None:
    Path(path).write_bytes(dumps_tt(X))


def load_tt(path) -> TTTensor:
    return loads_tt(Path(path).read_bytes())


def tt_to_json(X: TTTensor) -> str:
    obj = {
        "format": "ttq-json",
        "version": VERSION,
        "dims": list(X.dims),
        "ranks": list(X.ranks),
        "cores": [G.tolist() for G in X.cores],
    }
    return json.dumps(obj)


def tt_from_json(text: str) -> TTTensor:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from exc
    if obj.get("format") != "ttq-json" or obj.get("version") != VERSION:
        raise FormatError("not a ttq-json document")
    dims, ranks = obj["dims"], obj["ranks"]
    cores = [np.array(c, dtype=np.float64) for c in obj["cores"]]
    if len(cores) != len(dims) or len(ranks) != len(dims) + 1:
        raise FormatError("dims, ranks and cores disagree in length")
    for k, G in enumerate(cores):
        if G.shape != (ranks[k], dims[k], ranks[k + 1]):
            raise FormatError(f"core {k} has shape {G.shape}")
    return TTTensor(cores)


def save_tt_json(X: TTTensor, path) -> None:
    Path(path).write_text(tt_to_json(X))


def load_tt_json(path) -> TTTensor:
    return tt_from_json(Path(path).read_text())


def save_samples(S: SampleSet, path) -> None:
    lines = [" ".join(str(v) for v in (S.ndim, *S.dims, len(S)))]
    for idx, v in zip(S.indices + 1, S.values):
        lines.append(" ".join(str(int(i)) for i in idx) + " " + repr(float(v)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples(path) -> SampleSet:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append(line.split())
    if not rows:
        raise FormatError("empty sample file")
    head = rows[0]
    try:
        d = int(head[0])
        if len(head) != d + 2:
            raise FormatError("header must read 'd n_1 ... n_d m'")
        dims = tuple(int(t) for t in head[1 : d + 1])
        m = int(head[-1])
        body = rows[1:]
        if len(body) != m:
            raise FormatError(f"header announces {m} samples, found {len(body)}")
        if any(len(r) != d + 1 for r in body):
            raise FormatError("sample lines must have d indices and one value")
        idx = np.array([[int(t) for t in r[:d]] for r in body], dtype=np.int64).reshape(m, d) - 1
        vals = np.array([float(r[d]) for r in body])
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from exc
    try:
        return SampleSet(idx, vals, dims)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
