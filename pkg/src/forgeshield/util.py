"""Seeding, hashing, and small serialization helpers."""

from __future__ import annotations

import hashlib
import json
import random
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

TOOLKIT_VERSION = "0.1.0"


def seed_everything(seed: int) -> None:
    """Seed python, numpy, and torch RNGs for a reproducible section."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def derive_seed(base: int, *tokens) -> int:
    """Derive a stable child seed from a base seed and string-able tokens.

    Used so that per-record or per-stage RNG streams do not depend on
    iteration order or worker count.
    """
    h = hashlib.sha256()
    h.update(str(int(base)).encode())
    for tok in tokens:
        h.update(b"\x1f")
        h.update(str(tok).encode())
    return int.from_bytes(h.digest()[:8], "big") % (2**63)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def stable_json(obj) -> str:
    """Canonical JSON used for config hashing and manifest payloads."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return sha256_bytes(stable_json(obj).encode())[:16]


def parse_fraction(value) -> Fraction:
    """Parse an intensity such as "3/255", 0.01, or Fraction(3, 255).

    Decimal floats go through their string form so that e.g. 0.01 becomes
    the exact rational 1/100 rather than the nearest binary float.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(repr(value))
    if isinstance(value, str):
        return Fraction(value.strip())
    raise ValueError(f"cannot interpret {value!r} as a fraction")


def format_fraction(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"
