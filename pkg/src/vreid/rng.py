"""Keyed random streams.

Every random decision in the pipeline draws from a Philox generator keyed
by a (seed, *labels) tuple, so streams are independent of call order and an
interrupted run resumed from a checkpoint sees exactly the numbers the
uninterrupted run saw.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by (seed, *labels).

    Labels may be strings or integers; the identity of the stream is the
    exact label sequence.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    key = np.frombuffer(h.digest(), dtype=np.uint64)[:2]
    return np.random.Generator(np.random.Philox(key=key))
