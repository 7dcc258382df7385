"""Input validation helpers shared across the package.

All helpers raise ``ValueError`` (or ``TypeError`` for wrong types) with
messages that name the offending argument, and return the validated,
possibly converted value so call sites can stay one-liners.
"""

from __future__ import annotations

import numbers

import numpy as np

__all__ = [
    "ensure_array",
    "ensure_finite",
    "ensure_positive",
    "ensure_in_range",
    "ensure_int",
]


def ensure_array(x, name, *, shape=None, last_dim=None, dtype=np.float64):
    """Convert ``x`` to an ndarray and validate its shape.

    Args:
        x: Array-like input.
        name: Argument name used in error messages.
        shape: Exact shape to require, with ``-1`` entries as wildcards.
        last_dim: Required size of the trailing dimension (any rank).
        dtype: Target dtype for the conversion.

    Returns:
        The converted array.
    """
    arr = np.asarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            want not in (-1, got) for want, got in zip(shape, arr.shape)
        ):
            raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if last_dim is not None:
        if arr.ndim < 1 or arr.shape[-1] != last_dim:
            raise ValueError(
                f"{name} must have a trailing dimension of size {last_dim}, "
                f"got shape {arr.shape}"
            )
    return arr


def ensure_finite(x, name):
    """Require every element of ``x`` to be finite."""
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return x


def ensure_positive(value, name):
    """Require a strictly positive scalar."""
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def ensure_in_range(value, name, lo, hi):
    """Require ``lo <= value <= hi`` for a scalar."""
    if not isinstance(value, numbers.Real) or not (lo <= value <= hi):
        raise ValueError(f"{name} must be in [{lo}, {hi}], got {value!r}")
    return value


def ensure_int(value, name, *, minimum=None):
    """Require an integer, optionally bounded below."""
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value
