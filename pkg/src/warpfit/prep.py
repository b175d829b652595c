"""Ingest raw curves, screen missing readings, smooth onto a common grid."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import uniform_grid
from .exceptions import (
    DuplicateId,
    MissingCovariate,
    ParseError,
    SingularFit,
    TooFewPoints,
)

logger = logging.getLogger(__name__)

MIN_OBSERVATIONS = 4
# seconds -> tens of milliseconds
DURATION_SCALE = 100.0
CV_BANDWIDTHS = np.geomspace(0.02, 0.3, 10)
COVARIATE_KEYS = ("speaker", "sentence", "class")
# local design is declared singular below this weighted-spread / bandwidth^2 ratio
_SINGULAR_TOL = 1e-10


@dataclass
class RawCurve:
    """One raw curve: reading times in seconds, values in Hz (NaN = missing)."""

    id: str
    times: np.ndarray
    values: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.id = str(self.id)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError(f"curve {self.id}: times and values must be 1-d and equally long")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"curve {self.id}: times must be strictly increasing")

    @property
    def n_missing(self):
        return int(np.count_nonzero(~np.isfinite(self.values)))

    @property
    def span(self):
        return float(self.times[-1] - self.times[0]) if self.times.size else 0.0


@dataclass
class SampledCurve:
    """A curve smoothed onto the equispaced grid over normalized time [0, 1].

    ``duration`` is the raw time span in tens of milliseconds.
    """

    id: str
    grid: np.ndarray
    values: np.ndarray
    duration: float
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid[0] != 0.0 or self.grid[-1] != 1.0:
            raise ValueError("grid must span [0, 1]")
        if self.values.shape != self.grid.shape or not np.all(np.isfinite(self.values)):
            raise ValueError(f"curve {self.id}: values must be finite and match the grid")
        if not self.duration > 0:
            raise ValueError(f"curve {self.id}: duration must be positive")


def screen_missing(raw, max_missing_fraction=0.05):
    """Return True if the curve is kept, False if too many readings are missing.

    A curve is rejected iff its missing fraction is at least
    ``max_missing_fraction``.
    """
    if not 0.0 <= max_missing_fraction < 1.0:
        raise ValueError("max_missing_fraction must lie in [0, 1)")
    n = raw.values.size
    if n == 0:
        return False
    return raw.n_missing / n < max_missing_fraction


def _normalized_observations(raw):
    keep = np.isfinite(raw.values)
    if np.count_nonzero(keep) < MIN_OBSERVATIONS:
        raise TooFewPoints(
            f"curve {raw.id}: {np.count_nonzero(keep)} usable readings, need {MIN_OBSERVATIONS}"
        )
    span = raw.span
    if span <= 0:
        raise TooFewPoints(f"curve {raw.id}: zero time span")
    u = (raw.times[keep] - raw.times[0]) / span
    return u, raw.values[keep], span


def local_linear(u, y, at, bandwidth, weights_mask=None):
    """Gaussian-weighted local-linear fit of ``(u, y)`` evaluated at ``at``.

    Parameters
    ----------
    u, y : ndarray of shape (n,)
        Design points and responses.
    at : ndarray of shape (g,)
        Evaluation points.
    bandwidth : float
        Standard deviation of the Gaussian kernel, in the units of ``u``.
    weights_mask : ndarray of shape (g, n), optional
        Multiplied into the kernel weights (used for leave-one-out).

    Raises
    ------
    SingularFit
        If the weighted local design is numerically rank deficient at any
        evaluation point.
    """
    d = u[np.newaxis, :] - at[:, np.newaxis]
    z = d / bandwidth
    # rescale per row so the largest weight is 1; the fit is scale invariant
    z2 = 0.5 * z * z
    if weights_mask is not None:
        z2 = np.where(weights_mask > 0, z2, np.inf)
    w = np.exp(-(z2 - z2.min(axis=1, keepdims=True)))
    s0 = w.sum(axis=1)
    s1 = (w * d).sum(axis=1)
    s2 = (w * d * d).sum(axis=1)
    t0 = w @ y
    t1 = (w * d) @ y
    det = s0 * s2 - s1 * s1
    if np.any(det <= _SINGULAR_TOL * (s0 * bandwidth) ** 2):
        bad = at[det <= _SINGULAR_TOL * (s0 * bandwidth) ** 2]
        raise SingularFit(
            f"local design rank deficient at {bad.size} point(s), e.g. u={bad[0]:.4g}; "
            "bandwidth too small"
        )
    return (s2 * t0 - s1 * t1) / det


def loo_error(raw, bandwidth):
    """Leave-one-out mean squared error of the local-linear smoother."""
    u, y, _ = _normalized_observations(raw)
    mask = 1.0 - np.eye(u.size)
    try:
        fitted = local_linear(u, y, u, bandwidth, weights_mask=mask)
    except SingularFit:
        return np.inf
    return float(np.mean((fitted - y) ** 2))


def select_bandwidth(raw, candidates=CV_BANDWIDTHS):
    """Candidate bandwidth with the smallest leave-one-out error."""
    errors = [loo_error(raw, h) for h in candidates]
    best = int(np.argmin(errors))
    if not np.isfinite(errors[best]):
        raise SingularFit(f"curve {raw.id}: no candidate bandwidth gives a regular fit")
    return float(candidates[best])


def smooth_curve(raw, bandwidth=0.05, grid_size=16):
    """Smooth a raw curve onto ``grid_size`` equispaced points of [0, 1].

    Missing readings are dropped from the local fits. The Gaussian kernel
    scale is ``bandwidth`` times the curve's own time span, so in normalized
    time it is simply ``bandwidth``. Boundary points use the same one-sided
    local-linear fit.
    """
    if not 0.0 < bandwidth <= 0.5:
        raise ValueError("bandwidth must lie in (0, 0.5]")
    if int(grid_size) < 4:
        raise ValueError("grid_size must be at least 4")
    u, y, span = _normalized_observations(raw)
    grid = uniform_grid(grid_size)
    values = local_linear(u, y, grid, bandwidth)
    return SampledCurve(
        id=raw.id,
        grid=grid,
        values=values,
        duration=span * DURATION_SCALE,
        covariates=dict(raw.covariates),
    )


class CurveSmoother(TransformerMixin, BaseEstimator):
    """Local-linear smoother mapping raw curves to a common grid.

    Parameters
    ----------
    grid_size : int, default=16
    bandwidth : float, default=0.05
        Kernel scale as a fraction of each curve's time span.
    bandwidth_mode : {'fixed', 'cv'}, default='fixed'
        ``'cv'`` picks a per-curve bandwidth by leave-one-out error over a
        logarithmic grid of 10 values in [0.02, 0.3].
    """

    def __init__(self, grid_size=16, bandwidth=0.05, bandwidth_mode="fixed"):
        self.grid_size = grid_size
        self.bandwidth = bandwidth
        self.bandwidth_mode = bandwidth_mode

    def fit(self, curves, y=None):
        if self.bandwidth_mode not in ("fixed", "cv"):
            raise ValueError("bandwidth_mode must be 'fixed' or 'cv'")
        self.grid_ = uniform_grid(self.grid_size)
        return self

    def bandwidth_for(self, raw):
        if self.bandwidth_mode == "cv":
            return select_bandwidth(raw)
        return self.bandwidth

    def transform(self, curves):
        """Return a list of :class:`SampledCurve`, one per input curve."""
        return [
            smooth_curve(raw, self.bandwidth_for(raw), self.grid_size) for raw in curves
        ]


def stack_values(curves):
    """``(N, m + 1)`` matrix of smoothed values."""
    return np.vstack([c.values for c in curves])


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            yield lineno, [cell.strip() for cell in row]


def _parse_float(text, lineno, what):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", lineno) from None


def read_curve_file(path):
    """Parse the ``id,t,f0`` reading file into ``{id: (times, values)}``.

    Readings of one id must be contiguous; empty ``f0`` means missing.
    """
    curves = {}
    rows = _read_rows(path)
    header = next(rows, None)
    if header is None:
        return curves
    lineno, cols = header
    if cols[:3] != ["id", "t", "f0"]:
        raise ParseError(f"expected header 'id,t,f0', got {','.join(cols)!r}", lineno)
    current = None
    for lineno, cols in rows:
        if len(cols) < 3:
            raise ParseError(f"expected 3 fields, got {len(cols)}", lineno)
        cid, t, f0 = cols[0], cols[1], cols[2]
        if not cid:
            raise ParseError("empty id", lineno)
        if cid != current:
            if cid in curves:
                raise DuplicateId(f"readings for id {cid!r} are not contiguous (line {lineno})")
            curves[cid] = ([], [])
            current = cid
        times, values = curves[cid]
        t = _parse_float(t, lineno, "time")
        if times and t <= times[-1]:
            raise ParseError(f"times for id {cid!r} are not strictly increasing", lineno)
        times.append(t)
        values.append(np.nan if f0 == "" else _parse_float(f0, lineno, "f0"))
    return curves


def read_covariate_file(path):
    """Parse the covariate table into ``{id: {column: value}}`` (strings)."""
    rows = _read_rows(path)
    header = next(rows, None)
    if header is None:
        return {}
    lineno, cols = header
    if tuple(cols[:4]) != ("id",) + COVARIATE_KEYS:
        raise ParseError(
            "expected header starting 'id,speaker,sentence,class', got " + ",".join(cols), lineno
        )
    names = cols[1:]
    table = {}
    for lineno, fields in rows:
        if len(fields) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, got {len(fields)}", lineno)
        cid = fields[0]
        if cid in table:
            raise DuplicateId(f"covariates for id {cid!r} given twice (line {lineno})")
        table[cid] = dict(zip(names, fields[1:]))
    return table


def load_corpus(curve_file, covariate_file):
    """Read readings and covariates and join them by id.

    Raises
    ------
    MissingCovariate
        A curve id has no covariate row.
    """
    readings = read_curve_file(curve_file)
    covariates = read_covariate_file(covariate_file)
    missing = [cid for cid in readings if cid not in covariates]
    if missing:
        raise MissingCovariate(f"no covariates for id(s): {', '.join(missing)}")
    unmatched = sorted(set(covariates) - set(readings))
    if unmatched:
        logger.warning("%d covariate row(s) without readings: %s", len(unmatched), unmatched[:10])
    return [
        RawCurve(cid, np.array(t), np.array(v), dict(covariates[cid]))
        for cid, (t, v) in readings.items()
    ]
