"""NTSR tensor files and parameter checkpoints.

Layout of one record: ``b"NTSR"``, version (u32), rank (u32), one u64 per
extent, then the values as float64. Everything little-endian. A checkpoint
is a sequence of records plus a text manifest naming them in order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"NTSR"
VERSION = 1


class NTSRFormatError(ValueError):
    pass


def write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8", order="C")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_record(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise NTSRFormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise NTSRFormatError(f"unsupported NTSR version {version}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise NTSRFormatError(f"truncated payload: expected {8 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_record(fh, np.asarray(arr))


def load(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)


def dumps(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_record(buf, arr)
    return buf.getvalue()


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write ``<path>`` (concatenated records) and ``<path>.manifest``."""
    path = Path(path)
    lines = []
    for key, value in sorted((meta or {}).items()):
        lines.append(f"# {key} = {value}")
    with open(path, "wb") as fh:
        for name, arr in state.items():
            write_record(fh, arr)
            lines.append(f"{name} {' '.join(str(d) for d in np.shape(arr))}".rstrip())
    path.with_name(path.name + ".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    manifest = path.with_name(path.name + ".manifest").read_text().splitlines()
    names, meta = [], {}
    for line in manifest:
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            names.append(line.split()[0])
    state = {}
    with open(path, "rb") as fh:
        for name in names:
            state[name] = read_record(fh)
        if fh.read(1):
            raise NTSRFormatError(f"{path}: trailing data after {len(names)} records")
    return state, meta
