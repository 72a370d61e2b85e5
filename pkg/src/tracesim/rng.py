"""Counter-based random streams keyed by (seed, task_id, purpose, step).

Every draw in a run comes from a Philox generator whose key is a digest of
the stream coordinates, so a task's randomness never depends on how many
other tasks ran before it or on which worker processed it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, task_id: str, purpose: str, step: int = 0) -> np.ndarray:
    h = hashlib.blake2b(f"{int(seed)}\x1f{task_id}\x1f{purpose}\x1f{int(step)}".encode(), digest_size=16)
    return np.frombuffer(h.digest(), dtype="<u8").copy()


def stream(seed: int, task_id: str, purpose: str, step: int = 0) -> np.random.Generator:
    """Fresh generator positioned at counter 0 of the keyed stream."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, task_id, purpose, step)))
