"""Input validation helpers used across the estimators."""

import numpy as np

from .exceptions import GridMismatch


def uniform_grid(n_points):
    """Equispaced grid with ``n_points`` points on [0, 1], endpoints exact."""
    grid = np.linspace(0.0, 1.0, int(n_points))
    grid[0], grid[-1] = 0.0, 1.0
    return grid


def cell_midpoints(n_cells):
    """Midpoints of ``n_cells`` equal cells partitioning [0, 1]."""
    return (np.arange(n_cells) + 0.5) / n_cells


def trapezoid_weights(grid):
    """Quadrature weights ``w`` such that ``w @ f`` is the trapezoid rule on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid must be one-dimensional with at least two points")
    d = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += d / 2.0
    w[1:] += d / 2.0
    return w


def check_matrix(X, name="X", min_rows=1, n_columns=None):
    """Return ``X`` as a finite 2-d float array, raising ``ValueError`` otherwise."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[np.newaxis, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if n_columns is not None and X.shape[1] != n_columns:
        raise GridMismatch(f"{name} has {X.shape[1]} columns, expected {n_columns}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_same_grid(a, b, atol=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or not np.allclose(a, b, rtol=0.0, atol=atol):
        raise GridMismatch("curves are not sampled on the same grid")
