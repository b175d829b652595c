"""Functional principal components for amplitude and phase curves.

Curves are vectors on a fixed grid; inner products use quadrature weights
(trapezoid on the amplitude grid, midpoint rule on the cell midpoints where
CLR/phase vectors live). Eigenfunctions are orthonormal in that inner
product, so scores are plain weighted projections.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import cell_midpoints, check_matrix, trapezoid_weights, uniform_grid
from .exceptions import DegenerateSample, GridMismatch
from .simplex import clr_inverse
from .register import invert_warp

AMPLITUDE_JND_HZ = 10.0
PHASE_JND = 0.05
_NEGATIVE_EIGENVALUE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Mean function, eigenfunctions (rows) and eigenvalues of one process."""

    grid: np.ndarray
    weights: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_components(self):
        return self.eigenvalues.size

    def project(self, samples, n_components=None):
        return project(self, samples, n_components)

    def curve(self, scores):
        """``mean + sum_p scores[p] * eigenfunction[p]`` for leading components."""
        scores = np.asarray(scores, dtype=float)
        k = scores.shape[-1]
        return self.mean + scores @ self.eigenfunctions[:k]

    def to_dict(self):
        return {
            "grid": self.grid.tolist(),
            "weights": self.weights.tolist(),
            "mean": self.mean.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in
                     ("grid", "weights", "mean", "eigenfunctions", "eigenvalues")))


def phase_grid(m):
    """Grid and midpoint-rule weights for length-``m`` CLR vectors."""
    return cell_midpoints(m), np.full(m, 1.0 / m)


def amplitude_grid(n_points):
    grid = uniform_grid(n_points)
    return grid, trapezoid_weights(grid)


def _fix_signs(vectors):
    # largest-magnitude entry of each eigenfunction made positive
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, np.newaxis]


def fit_fpca(samples, grid=None, weights=None):
    """Mean, covariance eigendecomposition and eigenfunctions of a sample.

    Parameters
    ----------
    samples : array-like of shape (N, G)
        One curve per row on the common grid.
    grid : array-like of shape (G,), optional
        Defaults to the equispaced grid on [0, 1].
    weights : array-like of shape (G,), optional
        Quadrature weights; trapezoid on ``grid`` by default.

    Returns
    -------
    EigenBasis
        All ``G`` eigenpairs, eigenvalues nonincreasing and clamped at zero.
    """
    X = check_matrix(samples, "samples")
    n, G = X.shape
    if n < 2:
        raise DegenerateSample("FPCA needs at least two curves")
    grid = uniform_grid(G) if grid is None else np.asarray(grid, dtype=float)
    weights = trapezoid_weights(grid) if weights is None else np.asarray(weights, dtype=float)
    if grid.shape != (G,) or weights.shape != (G,):
        raise GridMismatch("grid/weights length does not match the samples")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    root = np.sqrt(weights)
    sym = root[:, np.newaxis] * cov * root[np.newaxis, :]
    sym = 0.5 * (sym + sym.T)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    vals = np.where(vals < 0.0, 0.0, vals)
    eigenfunctions = _fix_signs((vecs / root[:, np.newaxis]).T)
    return EigenBasis(grid, weights, mean, eigenfunctions, vals)


def project(basis, samples, n_components=None):
    """Scores ``integral (x - mean) * eigenfunction_p`` for the leading components."""
    X = np.asarray(samples, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != basis.grid.size:
        raise GridMismatch(f"sample has {X.shape[1]} points, basis grid has {basis.grid.size}")
    k = basis.n_components if n_components is None else int(n_components)
    scores = ((X - basis.mean) * basis.weights) @ basis.eigenfunctions[:k].T
    return scores[0] if single else scores


def component_deviations(basis, metric="peak"):
    """Largest deviation each component can produce at one standard deviation.

    ``'peak'`` is ``sqrt(lambda_p) * max|phi_p|``; ``'rms'`` is ``sqrt(lambda_p)``.
    """
    sd = np.sqrt(basis.eigenvalues)
    if metric == "peak":
        return sd * np.max(np.abs(basis.eigenfunctions), axis=1)
    if metric == "rms":
        return sd
    raise ValueError("metric must be 'peak' or 'rms'")


def count_detectable(deviations, threshold):
    """Number of components whose deviation reaches ``threshold``, at least 1."""
    deviations = np.asarray(deviations, dtype=float)
    return max(1, int(np.count_nonzero(deviations >= threshold)))


def select_components(basis, mode="amplitude", threshold=None, metric="peak"):
    """Number of perceptually detectable components.

    Amplitude deviations are compared with ``threshold`` in the curve's units
    (default 10 Hz). Phase deviations live on the log-derivative scale and
    are mapped to relative tempo distortion ``exp(d) - 1`` first (default
    threshold 5%).
    """
    dev = component_deviations(basis, metric)
    if mode == "amplitude":
        threshold = AMPLITUDE_JND_HZ if threshold is None else threshold
    elif mode == "phase":
        threshold = PHASE_JND if threshold is None else threshold
        dev = np.expm1(dev)
    else:
        raise ValueError("mode must be 'amplitude' or 'phase'")
    return count_detectable(dev, threshold)


def variance_table(basis):
    """Percentage of total variance per component and its running total."""
    vals = np.asarray(basis.eigenvalues if hasattr(basis, "eigenvalues") else basis, dtype=float)
    total = vals.sum()
    if total <= 0:
        shares = np.zeros_like(vals)
    else:
        shares = 100.0 * vals / total
    return shares, np.cumsum(shares)


def reconstruct(amplitude, amplitude_scores, phase, phase_scores, duration=1.0):
    """Curve implied by amplitude and phase scores, on physical time.

    ``w = mean_w + sum A_w phi``; ``s = mean_s + sum A_s psi``;
    ``h = clr_inverse(s)``; ``y(t) = w(h^{-1}(t / T))`` on ``t = T * u``.

    Returns
    -------
    times : ndarray
        ``duration * u`` on the amplitude grid.
    values : ndarray
    """
    grid = amplitude.grid
    if phase.grid.size != grid.size - 1:
        raise GridMismatch("phase basis must have one point fewer than the amplitude grid")
    w = amplitude.curve(amplitude_scores)
    s = phase.curve(phase_scores)
    h = clr_inverse(s, grid)
    h_inv = invert_warp(h)
    values = np.interp(h_inv(grid), grid, w)
    return duration * grid, values


class FunctionalPCA(TransformerMixin, BaseEstimator):
    """FPCA with perceptual (just-noticeable-difference) truncation.

    Parameters
    ----------
    process : {'amplitude', 'phase'}, default='amplitude'
        ``'phase'`` expects ``(N, m)`` CLR vectors on cell midpoints.
    n_components : int, optional
        Fixed number of components; by default chosen by the JND rule.
    threshold : float, optional
        JND threshold; 10 (Hz) for amplitude and 0.05 for phase by default.
    metric : {'peak', 'rms'}, default='peak'
    """

    def __init__(self, process="amplitude", n_components=None, threshold=None, metric="peak"):
        self.process = process
        self.n_components = n_components
        self.threshold = threshold
        self.metric = metric

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        if self.process == "amplitude":
            grid, weights = amplitude_grid(X.shape[1])
        elif self.process == "phase":
            grid, weights = phase_grid(X.shape[1])
        else:
            raise ValueError("process must be 'amplitude' or 'phase'")
        self.basis_ = fit_fpca(X, grid, weights)
        if self.n_components is None:
            self.n_components_ = select_components(
                self.basis_, self.process, self.threshold, self.metric
            )
        else:
            self.n_components_ = int(self.n_components)
        self.explained_variance_ = self.basis_.eigenvalues[: self.n_components_]
        self.explained_variance_ratio_ = variance_table(self.basis_)[0][: self.n_components_] / 100
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        return project(self.basis_, check_matrix(X, "X"), self.n_components_)

    def inverse_transform(self, scores):
        check_is_fitted(self, "basis_")
        scores = np.atleast_2d(np.asarray(scores, dtype=float))
        return self.basis_.mean + scores @ self.basis_.eigenfunctions[: scores.shape[1]]
