"""Labelled seed derivation from a single root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, label: str, *index: int) -> int:
    """64-bit seed for component ``label`` (and optional integer indices).

    Distinct labels or indices give unrelated streams, so each component
    stays reproducible on its own whatever else a run does.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root) & 0xFFFFFFFFFFFFFFFF).encode())
    h.update(b"\x00" + label.encode())
    for i in index:
        h.update(b"\x00" + str(int(i)).encode())
    return int.from_bytes(h.digest(), "little")


def derive_rng(root: int, label: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label, *index))
