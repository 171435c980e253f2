"""Small input-validation helpers in the spirit of sklearn.utils.validation."""
from __future__ import annotations

import zlib

import numpy as np

from .exceptions import InputError


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``.

    ``None`` gives fresh entropy, an int seeds a new PCG64 generator and an
    existing Generator is passed through untouched.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.default_rng(seed)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    raise InputError(f"cannot build a random generator from {seed!r}")


def substream(seed, name):
    """Named, reproducible sub-stream of a master integer seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def check_probability_vector(p, n=None, name="distribution"):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise InputError(f"{name} must be one-dimensional")
    if n is not None and p.shape[0] != n:
        raise InputError(f"{name} has length {p.shape[0]}, expected {n}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError(f"{name} must be finite and nonnegative")
    s = p.sum()
    if abs(s - 1.0) > 1e-8:
        raise InputError(f"{name} sums to {s}, not 1")
    return p


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        kind = "positive" if strict else "nonnegative"
        raise InputError(f"{name} must be {kind}, got {value}")
    return value


def check_positive_int(value, name, minimum=1):
    if int(value) != value or int(value) < minimum:
        raise InputError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)
