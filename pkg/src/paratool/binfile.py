"""Versioned container for named float64 blocks.

Layout::

    magic (4 bytes) | version (u32 LE) | header length (u64 LE) | JSON header | blocks

The header lists every block as ``{"name", "shape", "offset"}`` with offsets
relative to the start of the block region, so a reader can seek straight to
the blocks it wants without touching the rest.  Blocks are raw little-endian
doubles in C order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class FormatError(ValueError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


def write_blocks(path: Path, magic: bytes, meta: dict, blocks: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename) so readers never see half a file."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries, offset = [], 0
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"meta": meta, "blocks": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_header(fh, magic: bytes) -> tuple[dict, int]:
    raw = fh.read(_PREFIX.size)
    if len(raw) < _PREFIX.size:
        raise TruncatedFile("file shorter than its fixed prefix")
    got_magic, version, hlen = _PREFIX.unpack(raw)
    if got_magic != magic or version != FORMAT_VERSION:
        raise VersionMismatch(
            f"expected {magic!r} v{FORMAT_VERSION}, found {got_magic!r} v{version}"
        )
    body = fh.read(hlen)
    if len(body) < hlen:
        raise TruncatedFile("header cut short")
    try:
        header = json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise VersionMismatch("unreadable header") from None
    return header, _PREFIX.size + hlen


def read_blocks(path: Path, magic: bytes, names: Iterable[str] | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (meta, blocks); with ``names`` only those blocks are read."""
    path = Path(path)
    with path.open("rb") as fh:
        header, base = read_header(fh, magic)
        entries = {e["name"]: e for e in header["blocks"]}
        wanted = list(entries) if names is None else list(names)
        missing = [n for n in wanted if n not in entries]
        if missing:
            raise KeyError(f"blocks not in file: {missing}")
        out = {}
        for name in wanted:
            e = entries[name]
            count = int(np.prod(e["shape"], dtype=np.int64))
            fh.seek(base + e["offset"])
            raw = fh.read(count * 8)
            if len(raw) < count * 8:
                raise TruncatedFile(f"block {name!r} cut short")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return header["meta"], out


def read_meta(path: Path, magic: bytes) -> dict:
    with Path(path).open("rb") as fh:
        header, _ = read_header(fh, magic)
    return header["meta"]
