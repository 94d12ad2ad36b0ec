"""Deterministic seed derivation for subsystems and per-item streams."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base_seed: int, *roles) -> int:
    """Hash (base seed, role path) to a stable 64-bit stream seed.

    Roles are joined into a text path, so ``derive_seed(7, "data", 3)``
    is reproducible across platforms and process restarts.
    """
    path = "/".join(str(r) for r in roles)
    digest = hashlib.sha256(f"{base_seed}/{path}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(base_seed: int, *roles) -> np.random.Generator:
    """Generator seeded from the derived stream seed."""
    return np.random.default_rng(derive_seed(base_seed, *roles))
