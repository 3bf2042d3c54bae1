"""Input validation helpers shared across estimators and solvers."""

import numpy as np


def as_float_vector(x, dim=None, name="x"):
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_float_matrix(x, shape=None, name="x"):
    """Coerce to a finite 2-D float64 array, optionally of fixed shape."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_spd(a, name="matrix"):
    """Validate a symmetric positive-definite matrix and return it symmetrized.

    Raises ValueError when the Cholesky factorization fails.
    """
    a = as_float_matrix(a, name=name)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} is not symmetric")
    a = symmetrize(a)
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not positive definite") from exc
    return a


def spd_floor(a, floor):
    """Push the minimum eigenvalue of a symmetric matrix up to `floor`."""
    a = symmetrize(np.asarray(a, dtype=np.float64))
    eigvals = np.linalg.eigvalsh(a)
    lift = floor - float(eigvals.min())
    if lift > 0.0:
        a = a + lift * np.eye(a.shape[0])
    return a
