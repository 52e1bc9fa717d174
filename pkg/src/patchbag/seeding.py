"""Deterministic seed derivation: one master seed fans out to every stage
and per-region RNG by name hashing, so results never depend on iteration
order or on how many stages ran before."""

from __future__ import annotations

import hashlib


def derive_seed(base_seed: int, *names: str) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode())
    for name in names:
        h.update(b"\x00" + name.encode())
    return int.from_bytes(h.digest(), "little")
