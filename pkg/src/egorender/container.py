"""Single-file JSON-header + little-endian binary block container.

Layout::

    b"EGRC" | u32 version | u32 header_len | header JSON (utf-8) | blocks...

The header holds the caller's metadata under ``"meta"`` and a ``"blocks"``
list of ``{name, dtype, shape, offset, nbytes}`` entries; offsets are
relative to the first byte after the header.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"EGRC"
VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1", "<u2", "<i2"}


class ContainerError(ValueError):
    pass


def write_container(path, meta: dict, blocks: Dict[str, np.ndarray]) -> None:
    entries = []
    payload = []
    offset = 0
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        arr = arr.astype(dt, copy=False)
        if dt.str not in _ALLOWED:
            raise ContainerError(f"block {name!r}: unsupported dtype {dt.str}")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "blocks": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not an EGRC container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version > VERSION:
        raise ContainerError(f"{path}: container version {version} is newer than supported {VERSION}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    blocks = {}
    for e in header["blocks"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated block {e['name']!r}")
        blocks[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], blocks
