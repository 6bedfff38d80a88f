"""Versioned binary checkpoints.

Layout, all integers little-endian:

    magic b"VRCK" | version u32 | config digest (32 raw bytes)
    | param blob section | optimizer blob section | schedule string

A blob section is a u32 count followed by that many blobs; one blob is
u16 name length, name (utf-8), u8 ndim, ndim x u32 dims, then the raw
float64 values. The schedule is a u32-length-prefixed JSON string. Round
trips are bit-exact by construction (raw IEEE bytes, no text floats).
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError

MAGIC = b"VRCK"
VERSION = 1


def _write_blobs(f, arrays: Dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode()
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_blobs(f) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, name_len).decode()
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        dims = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
        n_values = int(np.prod(dims)) if dims else 1
        raw = _read_exact(f, n_values * 8)
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return out


def save_checkpoint(path: str, config_digest: bytes, params: Dict[str, np.ndarray],
                    opt_state: Dict[str, np.ndarray], schedule: dict) -> None:
    if len(config_digest) != 32:
        raise CheckpointError(f"config digest must be 32 bytes, got {len(config_digest)}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(config_digest)
        _write_blobs(f, params)
        _write_blobs(f, opt_state)
        payload = json.dumps(schedule, sort_keys=True).encode()
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


def load_checkpoint(path: str) -> Tuple[bytes, Dict[str, np.ndarray], Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version}, this build reads {VERSION}")
        digest = _read_exact(f, 32)
        params = _read_blobs(f)
        opt_state = _read_blobs(f)
        (sched_len,) = struct.unpack("<I", _read_exact(f, 4))
        schedule = json.loads(_read_exact(f, sched_len).decode())
    return digest, params, opt_state, schedule
