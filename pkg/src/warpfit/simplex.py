"""Compositional representation of discretized warping functions.

A warping function sampled on ``m + 1`` grid points has ``m`` positive
increments summing to one, i.e. it is a composition. The centred log-ratio
(CLR) map sends those increments to an unconstrained zero-sum vector and
back, so optimizers and linear methods can work on warps without ever
leaving the space of monotone, boundary-respecting functions.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import cell_midpoints, check_matrix, uniform_grid
from .exceptions import NonMonotone, ZeroIncrement

# smallest increment clr_inverse will emit; keeps cumulative sums strictly increasing
_MIN_INCREMENT = 1e-12


@dataclass(frozen=True, eq=False)
class WarpingFunction:
    """Strictly increasing piecewise-linear map of [0, 1] onto itself.

    Parameters
    ----------
    grid : ndarray of shape (n_knots,)
        Knot locations, strictly increasing, ``grid[0] == 0`` and
        ``grid[-1] == 1``. Usually the common equispaced data grid.
    values : ndarray of shape (n_knots,)
        Warp values at the knots, with the same constraints.
    """

    grid: np.ndarray
    values: np.ndarray
    flags: tuple = field(default=(), compare=False)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        values = np.array(self.values, dtype=float)
        if grid.shape != values.shape or grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid and values must be 1-d arrays of equal length >= 2")
        for name, arr in (("grid", grid), ("values", values)):
            if not np.all(np.isfinite(arr)):
                raise NonMonotone(f"{name} contains non-finite entries")
            if arr[0] != 0.0 or arr[-1] != 1.0:
                raise NonMonotone(f"{name} must start at 0 and end at 1")
            if np.any(np.diff(arr) <= 0.0):
                raise NonMonotone(f"{name} must be strictly increasing")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def identity(cls, grid):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, grid.copy())

    @property
    def increments(self):
        return np.diff(self.values)

    def __call__(self, t):
        return np.interp(t, self.grid, self.values)

    def resample(self, grid):
        """Evaluate on a new knot grid (linear interpolation)."""
        grid = np.asarray(grid, dtype=float)
        values = self(grid)
        values[0], values[-1] = 0.0, 1.0
        return WarpingFunction(grid, values, self.flags)

    def distortion(self):
        """Trapezoidal ``integral (h(t) - t)^2 dt`` over the knots."""
        return float(np.trapezoid((self.values - self.grid) ** 2, self.grid))

    def __repr__(self):
        return f"WarpingFunction(n_knots={self.grid.size}, flags={self.flags})"


def clr_forward(h, eps=1e-12, floor=False):
    """Centred log-ratio coordinates of a warp's increments.

    Parameters
    ----------
    h : WarpingFunction or array-like
        Warp, or its values on an equispaced grid.
    eps : float
        Increments at or below ``eps`` are treated as zero.
    floor : bool
        If True, floor small increments at ``eps`` and renormalize instead of
        raising. Only meant for internally generated warps.

    Returns
    -------
    ndarray of shape (m,)
        Zero-sum vector ``log(dh / geometric_mean(dh))``.
    """
    values = h.values if isinstance(h, WarpingFunction) else np.asarray(h, dtype=float)
    dh = np.diff(values)
    if np.any(dh <= eps):
        if not floor:
            bad = np.flatnonzero(dh <= eps)
            raise ZeroIncrement(f"increments {bad.tolist()} are not positive")
        dh = np.maximum(dh, eps)
        dh = dh / dh.sum()
    logs = np.log(dh)
    return logs - logs.mean()


def _softmax_increments(s):
    s = np.asarray(s, dtype=float)
    z = np.exp(s - s.max())
    p = z / z.sum()
    if p.min() < _MIN_INCREMENT:
        p = np.maximum(p, _MIN_INCREMENT)
        p = p / p.sum()
    return p


def clr_inverse(s, grid=None):
    """Map a CLR vector back to a warping function.

    Input is centred first; since the map is shift invariant this does not
    change the result. The returned warp always satisfies the boundary and
    strict monotonicity constraints.

    Parameters
    ----------
    s : array-like of shape (m,)
        Finite CLR coordinates.
    grid : array-like of shape (m + 1,), optional
        Knot grid of the result; equispaced on [0, 1] by default.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("s must be a non-empty 1-d vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("s must be finite")
    s = s - s.mean()
    p = _softmax_increments(s)
    values = np.concatenate(([0.0], np.cumsum(p)))
    values[-1] = 1.0
    if grid is None:
        grid = uniform_grid(s.size + 1)
    return WarpingFunction(grid, values)


def log_derivative_curve(s):
    """Discretized log-derivative of the warp encoded by ``s``.

    The CLR vector already is the log-derivative on the cell midpoints up to
    an additive constant (absorbed by the normalization in ``clr_inverse``);
    it is returned centred, paired with the midpoint locations available
    from :func:`midpoints`.
    """
    s = np.asarray(s, dtype=float)
    return s - s.mean()


def midpoints(m):
    """Cell midpoints on which phase (log-derivative) curves live."""
    return cell_midpoints(m)


def clr_matrix(H, floor=False):
    """Row-wise CLR of an ``(N, m + 1)`` matrix of warp values."""
    H = check_matrix(H, "H")
    return np.vstack([clr_forward(row, floor=floor) for row in H])


def clr_inverse_matrix(S):
    """Row-wise inverse CLR of an ``(N, m)`` matrix."""
    S = check_matrix(S, "S")
    return np.vstack([clr_inverse(row).values for row in S])


class CLRTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer between warp values and CLR coordinates.

    ``transform`` takes an ``(N, m + 1)`` array of warp values on the common
    grid and returns ``(N, m)`` CLR vectors; ``inverse_transform`` undoes it.
    """

    def __init__(self, eps=1e-12):
        self.eps = eps

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_matrix(X, "X")
        return np.vstack([clr_forward(row, eps=self.eps) for row in X])

    def inverse_transform(self, S):
        return clr_inverse_matrix(S)
