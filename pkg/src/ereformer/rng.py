"""Reproducible random streams keyed by (seed, name).

Each named draw gets its own Philox counter-based stream, so adding a new
parameter never perturbs the initial values of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str = "") -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def trunc_normal(seed: int, name: str, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    rng = stream(seed, name)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
