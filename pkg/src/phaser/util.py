"""Small shared helpers: seeding, stable hashing, canonical JSON, geomean."""

from __future__ import annotations

import json
import math

import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed):
    """Seeded numpy Generator. seed may be an int or a tuple of ints."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def child_seed(seed, *key):
    """Derive an independent integer seed from (seed, key...).

    Key parts may be ints or strings. Stable across processes and
    Python versions, unlike hash().
    """
    return stable_hash(int(seed), *key)


def mix64(x):
    """splitmix64 finalizer. Deterministic 64-bit mixing."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return (x ^ (x >> 31)) & MASK64


def stable_hash(*parts):
    """Order-sensitive 64-bit hash of a flat sequence of ints/strings."""
    h = 0x243F6A8885A308D3
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = mix64(h ^ b)
        else:
            h = mix64(h ^ (int(part) & MASK64))
    return h


def canonical_json(obj):
    """Deterministic JSON encoding: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def geomean(values):
    """Geometric mean of positive numbers.

    Exact for the degenerate cases the reward arithmetic relies on:
    a single value, or all values equal, comes back as float(value),
    and two values go through a correctly rounded sqrt.
    """
    vals = list(values)
    if not vals:
        raise ValueError("geomean of empty sequence")
    if any(v <= 0 for v in vals):
        raise ValueError("geomean requires positive values")
    first = vals[0]
    if all(v == first for v in vals):
        return float(first)
    if len(vals) == 2:
        return math.sqrt(vals[0] * vals[1])
    return math.exp(sum(math.log(v) for v in vals) / len(vals))


def json_number(x):
    """Collapse exact rationals to int when integral, else float.

    Keeps episode logs byte-stable: ints print without a decimal point
    and floats use repr, both deterministic for identical values.
    """
    from fractions import Fraction

    if isinstance(x, bool):
        raise TypeError("bool is not a reward value")
    if isinstance(x, int):
        return x
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    f = float(x)
    return int(f) if f.is_integer() and abs(f) < 2**53 else f
