"""Input validation helpers shared across the package.

Conventions: geometry and image math run in float64; validation never
copies an array that is already well-formed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_float_array",
    "check_finite",
    "check_positive",
    "check_shape",
    "check_unit",
    "normalize",
]


def as_float_array(x, shape=None, name="array") -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray, optionally checking shape.

    ``shape`` entries of -1 match any extent.
    """
    a = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None:
        check_shape(a, shape, name=name)
    return a


def check_shape(a: np.ndarray, shape, name="array") -> None:
    if len(a.shape) != len(shape) or any(
        want not in (-1, got) for want, got in zip(shape, a.shape)
    ):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {a.shape}")


def check_finite(a: np.ndarray, name="array") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains non-finite values")


def check_positive(a: np.ndarray, name="array", strict=True) -> None:
    bad = not np.all(a > 0) if strict else not np.all(a >= 0)
    if bad:
        raise ValueError(f"{name}: must be {'>' if strict else '>='} 0")


def check_unit(v: np.ndarray, name="vector", atol=1e-6) -> None:
    n = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=-1)
    if not np.allclose(n, 1.0, atol=atol):
        raise ValueError(f"{name}: expected unit length, |v| in [{n.min()}, {n.max()}]")


def normalize(v: np.ndarray, axis=-1, eps=1e-12) -> np.ndarray:
    """Normalize along ``axis``; degenerate vectors keep a tiny-norm guard."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)
