"""Named-tensor container.

Layout::

    PRUNELAB-NT <version> <header bytes>\\n
    <JSON header>\\n
    <payloads, little-endian, concatenated in header order>

The header lists every tensor as ``{name, dtype, shape, offset, nbytes}``
(offsets relative to the start of the payload block) plus a free-form
``meta`` dict. Two payload types exist: ``f32`` (IEEE-754 binary32) and
``u8`` (masks).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "PRUNELAB-NT"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _code(arr: np.ndarray) -> str:
    if arr.dtype in (np.uint8, np.bool_):
        return "u8"
    if np.issubdtype(arr.dtype, np.floating):
        return "f32"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "tensors": entries, "meta": meta or {}}, indent=1, sort_keys=True
    ).encode("utf-8") + b"\n"
    first = f"{MAGIC} {VERSION} {len(header)}\n".encode("ascii")
    return first + header + b"".join(payloads)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = blob.find(b"\n")
    try:
        magic, version, hlen = blob[:nl].decode("ascii").split()
        hlen = int(hlen)
    except ValueError as exc:
        raise CheckpointError("not a named-tensor container") from exc
    if magic != MAGIC:
        raise CheckpointError("not a named-tensor container")
    if int(version) != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    header = json.loads(blob[nl + 1 : nl + 1 + hlen])
    base = nl + 1 + hlen
    out = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        start = base + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float32) if e["dtype"] == "f32" else arr.copy()
    return out, header["meta"]


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
