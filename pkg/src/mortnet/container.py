"""Byte-deterministic array container used for cohort files and checkpoints.

Layout::

    b"MNTC" | u16 format version | u32 header length | JSON header | array payload

The JSON header is written with sorted keys and lists every array's name,
dtype, shape and byte offset into the payload. Arrays are stored
little-endian, C order. Writing the same content twice yields identical bytes
(``np.savez`` does not guarantee that because zip entries carry timestamps).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MNTC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class ContainerError(ValueError):
    pass


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind not in "fiub":
            raise ContainerError(f"array {name!r}: unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated file")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a mortnet container")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    payload = memoryview(data)[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays
