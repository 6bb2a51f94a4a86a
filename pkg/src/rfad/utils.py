"""Seeding and hashing helpers shared across modules."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def stable_hash(obj) -> str:
    """sha256 hex of a JSON-able object (sorted keys) or raw bytes/arrays."""
    h = hashlib.sha256()
    if isinstance(obj, np.ndarray):
        h.update(str(obj.dtype).encode())
        h.update(str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, (bytes, bytearray)):
        h.update(obj)
    else:
        h.update(json.dumps(obj, sort_keys=True, default=str).encode())
    return h.hexdigest()


def hash_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def one_hot_centered(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot rows with 1/C subtracted so each row sums to zero."""
    out = np.full((len(labels), num_classes), -1.0 / num_classes)
    out[np.arange(len(labels)), labels] += 1.0
    return out
