"""Deterministic seed derivation shared across modules."""
from __future__ import annotations

import hashlib

import numpy as np


def subseed(*parts) -> int:
    """Stable 63-bit seed derived from a root seed and string/int tags."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def generator(*parts) -> np.random.Generator:
    return np.random.default_rng(subseed(*parts))
