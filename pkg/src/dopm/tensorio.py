"""Binary tensor files, multi-record checkpoints, and graymap export.

A tensor record is: magic ``DOPT``, format version as u16, rank as
u16, one u64 extent per axis, then the float64 payload, all
little-endian, row-major. Checkpoints are one file of concatenated
records plus a text manifest naming each record in order.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DOPT"
FORMAT_VERSION = 1

# refuse payloads that cannot fit in a sane address space
_MAX_BYTES = 1 << 42


def _encode(arr: np.ndarray) -> bytes:
    # ascontiguousarray would promote rank 0 to rank 1; tobytes copies anyway
    a = np.asarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.astype("<f8", copy=False).tobytes()


def _decode(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("bad magic: not a DOPT tensor record")
    offset += 4
    if len(buf) < offset + 4:
        raise ValueError("truncated tensor record header")
    version, rank = struct.unpack_from("<HH", buf, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if len(buf) < offset + 8 * rank:
        raise ValueError("truncated tensor record extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = math.prod(shape) if shape else 1
    if count * 8 > _MAX_BYTES:
        raise ValueError(f"extent overflow: {shape} exceeds supported payload size")
    end = offset + count * 8
    if len(buf) < end:
        raise ValueError("truncated tensor payload")
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return flat.astype(np.float64).reshape(shape), end


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_encode(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = _decode(buf, 0)
    if end != len(buf):
        raise ValueError(f"trailing data after tensor record in {path}")
    return arr


def write_records(path, arrays) -> None:
    """Write concatenated tensor records to one file."""
    with open(path, "wb") as fh:
        for arr in arrays:
            fh.write(_encode(arr))


def read_records(path) -> list[np.ndarray]:
    """Read every concatenated tensor record from one file."""
    buf = Path(path).read_bytes()
    out = []
    offset = 0
    while offset < len(buf):
        arr, offset = _decode(buf, offset)
        out.append(arr)
    return out


# -- checkpoints -------------------------------------------------------

_MANIFEST_HEADER = "dopm-checkpoint v1"


def save_checkpoint(directory, named_arrays: dict, meta: dict) -> None:
    """Write named tensors plus string metadata under a directory.

    Layout: ``manifest.txt`` lists metadata and one ``tensor`` line per
    record (name then extents); ``params.dopt`` holds the records in
    manifest order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [_MANIFEST_HEADER]
    for key in sorted(meta):
        lines.append(f"meta.{key} = {meta[key]}")
    for name, arr in named_arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        dims = " ".join(str(e) for e in np.asarray(arr).shape)
        lines.append(f"tensor {name} {dims}".rstrip())
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    write_records(d / "params.dopt", list(named_arrays.values()))


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Read a checkpoint directory back into (named arrays, metadata)."""
    d = Path(directory)
    text = (d / "manifest.txt").read_text().splitlines()
    if not text or text[0] != _MANIFEST_HEADER:
        raise ValueError(f"not a checkpoint manifest: {d / 'manifest.txt'}")
    meta = {}
    names = []
    shapes = []
    for line in text[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("meta."):
            key, _, value = line[5:].partition("=")
            meta[key.strip()] = value.strip()
        elif line.startswith("tensor "):
            parts = line.split()
            names.append(parts[1])
            shapes.append(tuple(int(x) for x in parts[2:]))
        else:
            raise ValueError(f"unrecognized manifest line: {line!r}")
    arrays = read_records(d / "params.dopt")
    if len(arrays) != len(names):
        raise ValueError(
            f"checkpoint has {len(arrays)} records but manifest lists {len(names)}"
        )
    out = {}
    for name, shape, arr in zip(names, shapes, arrays):
        if arr.shape != shape:
            raise ValueError(f"shape mismatch for {name}: manifest {shape}, record {arr.shape}")
        out[name] = arr
    return out, meta


# -- graymap export ----------------------------------------------------


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2-D map as a binary P5 graymap, min-max scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"graymap input must be rank 2, got rank {v.ndim}")
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = np.round((v - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(v)
    h, w = v.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.astype(np.uint8).tobytes())
