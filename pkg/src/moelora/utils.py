"""Small shared helpers: seed derivation and canonical JSON."""

from __future__ import annotations

import hashlib
import json


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed for a named component of a seeded run.

    Hash-based so that adding components never shifts the streams of
    existing ones, and identical (master, parts) always map to the same
    seed on every platform.
    """
    key = json.dumps([int(master), *[str(p) for p in parts]], separators=(",", ":"))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def canonical_json(obj) -> str:
    """Deterministic JSON used for hashing and line-delimited records."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(obj) -> str:
    """Short stable hash of a JSON-serializable config tree."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]
