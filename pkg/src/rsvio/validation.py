"""Input validation helpers and error types shared across the package."""

from __future__ import annotations

import numpy as np


class DegenerateRayError(ValueError):
    """Projection ray is (nearly) parallel to the normalization plane."""


class DegenerateTrackError(ValueError):
    """A depth column of the ray matrix is unusable (singular normal block)."""


class SolutionAtInfinityError(RuntimeError):
    """Homogeneous solution has a vanishing scale component."""


class InsufficientDataError(ValueError):
    """Not enough correspondences/frames for the requested operation."""


class FileFormatError(ValueError):
    """An input file does not match the documented schema."""


def as_array(a, shape=None, name="array") -> np.ndarray:
    """Convert to a float64 ndarray, optionally enforcing an exact shape."""
    out = np.asarray(a, dtype=np.float64)
    if shape is not None and out.shape != tuple(shape):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: contains non-finite values")
    return out


def check_rotation(R, name="R", atol=1e-6) -> np.ndarray:
    """Validate a proper rotation matrix (orthonormal, det +1)."""
    R = as_array(R, (3, 3), name)
    if not np.allclose(R.T @ R, np.eye(3), atol=atol):
        raise ValueError(f"{name}: not orthonormal (||R^T R - I|| too large)")
    if np.linalg.det(R) < 0.0:
        raise ValueError(f"{name}: improper rotation (det < 0)")
    return R


def check_intrinsics(K, name="K") -> np.ndarray:
    """Validate an upper-triangular pinhole matrix with positive focals."""
    K = as_array(K, (3, 3), name)
    lower = np.tril(K, -1)
    if not np.allclose(lower, 0.0):
        raise ValueError(f"{name}: must be upper triangular")
    if K[0, 0] <= 0 or K[1, 1] <= 0:
        raise ValueError(f"{name}: focal entries must be positive")
    if not np.isclose(K[2, 2], 1.0):
        raise ValueError(f"{name}: K[2,2] must be 1")
    return K


def check_covariance(V, dim, name="covariance", atol=1e-9) -> np.ndarray:
    """Validate a symmetric positive semi-definite matrix."""
    V = as_array(V, (dim, dim), name)
    if not np.allclose(V, V.T, atol=atol):
        raise ValueError(f"{name}: not symmetric")
    w = np.linalg.eigvalsh(V)
    if w.min() < -atol * max(1.0, abs(w.max())):
        raise ValueError(f"{name}: not positive semi-definite")
    return V


def readonly(a: np.ndarray) -> np.ndarray:
    """Mark an array immutable (shared by frozen dataclasses)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a
