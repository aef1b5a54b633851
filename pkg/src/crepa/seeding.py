"""Deterministic seed derivation.

All randomness in the package flows from a single master seed through
named sub-streams, so adding a consumer never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive(seed: int, *labels) -> int:
    """Derive a 64-bit child seed from ``seed`` and a label path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def np_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *labels))


def torch_gen(seed: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive(seed, *labels) & _MASK63)
    return g


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used as the weight fingerprint."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
