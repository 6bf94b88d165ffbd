"""Hashing, seeding and small array helpers used by every pipeline stage."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    """Digest of the raw little-endian bytes of an array (C order)."""
    a = np.ascontiguousarray(arr)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return sha256_bytes(a.tobytes())


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_json(obj) -> str:
    return sha256_bytes(canonical_json(obj).encode("utf-8"))


def derive_seed(master_seed: int, stage: str) -> int:
    """Deterministic per-stage seed from the run's master seed.

    Stable across platforms and sessions (pure SHA-256, no hash
    randomization), so every artifact is reproducible from the config alone.
    """
    digest = hashlib.sha256(f"{master_seed}/{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v.astype(np.float64).ravel()))


def linf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v.astype(np.float64)))) if v.size else 0.0


def vector_norm(v: np.ndarray, norm_type: str) -> float:
    if norm_type == "l2":
        return l2_norm(v)
    if norm_type == "linf":
        return linf_norm(v)
    raise ValueError(f"unknown norm type {norm_type!r}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized dot product of two flattened vectors."""
    af = a.astype(np.float64).ravel()
    bf = b.astype(np.float64).ravel()
    na = np.linalg.norm(af)
    nb = np.linalg.norm(bf)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(af @ bf / (na * nb))
