"""Binary trajectory container.

Layout (little-endian)::

    b"DINOTRJ1"
    u32 nx, u32 ny, f64 lx, f64 ly, f64 dt, u32 frame_count, u32 dtype_tag
    frame_count * nx * ny samples, row-major, dtype per tag (1 = f32, 2 = f64)
    u32 metadata length, UTF-8 JSON metadata
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .field import Grid2D, Trajectory

__all__ = ["save_trajectory", "load_trajectory", "file_checksum", "TrajectoryFormatError"]

MAGIC = b"DINOTRJ1"
_HEADER = struct.Struct("<IIdddII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TrajectoryFormatError(ValueError):
    pass


def save_trajectory(traj: Trajectory, path, dtype=None) -> Path:
    path = Path(path)
    frames = traj.frames if dtype is None else traj.frames.astype(dtype)
    tag = _TAGS.get(frames.dtype)
    if tag is None:
        raise TrajectoryFormatError(f"unsupported frame dtype {frames.dtype}")
    g = traj.grid
    meta = json.dumps(traj.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(g.nx, g.ny, g.lx, g.ly, traj.dt, len(frames), tag))
        fh.write(np.ascontiguousarray(frames, dtype=_DTYPES[tag]).tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
    return path


def load_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {raw[:8]!r}")
    off = 8
    if len(raw) < off + _HEADER.size:
        raise TrajectoryFormatError(f"{path}: truncated header")
    nx, ny, lx, ly, dt, count, tag = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    if tag not in _DTYPES:
        raise TrajectoryFormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    nbytes = count * nx * ny * dtype.itemsize
    if len(raw) < off + nbytes + 4:
        raise TrajectoryFormatError(f"{path}: payload length mismatch")
    frames = np.frombuffer(raw, dtype=dtype, count=count * nx * ny, offset=off)
    frames = frames.reshape(count, nx, ny).astype(dtype.newbyteorder("="))
    off += nbytes
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + mlen:
        raise TrajectoryFormatError(f"{path}: metadata length mismatch")
    meta = json.loads(raw[off:].decode("utf-8"))
    return Trajectory(Grid2D(nx, ny, lx, ly), dt, frames, meta)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
