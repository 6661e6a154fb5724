"""Stable hashes used wherever routing needs reproducible pseudo-randomness."""

from __future__ import annotations

import hashlib
import json
from typing import Any

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def unit_interval(*parts: object) -> float:
    """Deterministic draw in [0, 1) from the joined string form of ``parts``."""
    key = "\x1f".join(str(p) for p in parts)
    return fnv1a_64(key) / 2.0**64


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:length]


def derive_seed(seed: int, *names: object) -> int:
    """Child seed for an independent random stream named by ``names``."""
    digest = hashlib.sha256(canonical_json([seed, *map(str, names)]).encode()).digest()
    return int.from_bytes(digest[:8], "big")
