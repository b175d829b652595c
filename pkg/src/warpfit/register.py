"""Curve registration: penalized pairwise warping and area-under-curve warps.

Pairwise warps ``g`` are found by minimizing, over monotone step warps
parameterized by CLR coordinates,

    integral (reference(g(t)) - target(t))^2 + lam * (g(t) - t)^2 dt

on the common grid (trapezoid rule, linear interpolation of the reference).
Averaging a curve's pairwise warps against a pool of curves from its class
estimates its inverse warp; inverting that gives the warp ``h`` and the
registered (amplitude) curve ``w(u) = y(h(u))``.
"""

import logging
import zlib
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import null_space
from scipy.integrate import cumulative_trapezoid
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_same_grid
from .exceptions import EmptyPool, NonPositiveCurve, OptimizerDiverged
from .simplex import _MIN_INCREMENT, WarpingFunction, clr_inverse

logger = logging.getLogger(__name__)

LAMBDA_FACTORS = (0.0, 1e-2, 1e-1, 1.0, 10.0)
AUTO_DISTORTION_TARGET = 0.01
AUTO_LAMBDA_PAIRS = 12
DEGENERATE_RANGE = 1e-6


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _warp_from_coords(z, basis):
    s = basis @ z
    s = s - s.max()
    p = np.exp(s)
    p /= p.sum()
    if p.min() < _MIN_INCREMENT:
        p = np.maximum(p, _MIN_INCREMENT)
        p /= p.sum()
    m = p.size
    g = np.empty(m + 1)
    g[0] = 0.0
    acc = 0.0
    for j in range(m):
        acc += p[j]
        g[j + 1] = acc
    g[m] = 1.0
    return g


@numba.njit(cache=True)
def _warp_cost(z, basis, grid, reference, target, lam):
    g = _warp_from_coords(z, basis)
    warped = np.interp(g, grid, reference)
    total = 0.0
    prev = (warped[0] - target[0]) ** 2 + lam * (g[0] - grid[0]) ** 2
    for j in range(1, grid.size):
        cur = (warped[j] - target[j]) ** 2 + lam * (g[j] - grid[j]) ** 2
        total += 0.5 * (prev + cur) * (grid[j] - grid[j - 1])
        prev = cur
    return total


@numba.njit(cache=True)
def _nelder_mead(x0, step, max_iter, xtol, basis, grid, reference, target, lam):
    # dimension-adaptive coefficients (Gao & Han) behave better above ~10 dims
    n = x0.size
    alpha = 1.0
    beta = 1.0 + 2.0 / n
    gamma = 0.75 - 0.5 / n
    delta = 1.0 - 1.0 / n
    sim = np.empty((n + 1, n))
    fs = np.empty(n + 1)
    sim[0] = x0
    for i in range(n):
        sim[i + 1] = x0
        sim[i + 1, i] += step
    for i in range(n + 1):
        fs[i] = _warp_cost(sim[i], basis, grid, reference, target, lam)
    it = 0
    while it < max_iter:
        order = np.argsort(fs)
        sim = sim[order]
        fs = fs[order]
        diameter = 0.0
        for i in range(1, n + 1):
            d = np.max(np.abs(sim[i] - sim[0]))
            if d > diameter:
                diameter = d
        if diameter <= xtol:
            break
        it += 1
        centroid = np.zeros(n)
        for i in range(n):
            centroid += sim[i]
        centroid /= n
        xr = centroid + alpha * (centroid - sim[n])
        fr = _warp_cost(xr, basis, grid, reference, target, lam)
        if fr < fs[0]:
            xe = centroid + beta * (xr - centroid)
            fe = _warp_cost(xe, basis, grid, reference, target, lam)
            if fe < fr:
                sim[n] = xe
                fs[n] = fe
            else:
                sim[n] = xr
                fs[n] = fr
        elif fr < fs[n - 1]:
            sim[n] = xr
            fs[n] = fr
        else:
            if fr < fs[n]:
                xc = centroid + gamma * (xr - centroid)
                fc = _warp_cost(xc, basis, grid, reference, target, lam)
                accept = fc <= fr
            else:
                xc = centroid - gamma * (centroid - sim[n])
                fc = _warp_cost(xc, basis, grid, reference, target, lam)
                accept = fc < fs[n]
            if accept:
                sim[n] = xc
                fs[n] = fc
            else:
                for i in range(1, n + 1):
                    sim[i] = sim[0] + delta * (sim[i] - sim[0])
                    fs[i] = _warp_cost(sim[i], basis, grid, reference, target, lam)
    best = np.argmin(fs)
    return sim[best].copy(), fs[best], it


_BASES = {}


def zero_sum_basis(m):
    """Orthonormal ``(m, m - 1)`` basis of the zero-sum subspace of R^m."""
    if m not in _BASES:
        _BASES[m] = np.ascontiguousarray(null_space(np.ones((1, m))))
    return _BASES[m]


# ---------------------------------------------------------------------------
# pairwise warps


def _grid_and_values(curve, grid=None):
    if hasattr(curve, "values") and hasattr(curve, "grid"):
        return np.asarray(curve.grid, dtype=float), np.asarray(curve.values, dtype=float)
    values = np.asarray(curve, dtype=float)
    if grid is None:
        grid = np.linspace(0.0, 1.0, values.size)
    return np.asarray(grid, dtype=float), values


def warp_cost(g, target, reference, lam=0.0, grid=None):
    """Discretized discrepancy of warp values ``g`` (on the common grid)."""
    grid_t, y_t = _grid_and_values(target, grid)
    _, y_r = _grid_and_values(reference, grid_t)
    g = g.values if isinstance(g, WarpingFunction) else np.asarray(g, dtype=float)
    f = (np.interp(g, grid_t, y_r) - y_t) ** 2 + lam * (g - grid_t) ** 2
    return float(np.trapezoid(f, grid_t))


@dataclass
class PairwiseFit:
    warp: WarpingFunction
    cost: float
    iterations: int
    degenerate: bool = False


def fit_pairwise(target, reference, lam=0.0, max_iter=500, xtol=1e-6, scale=None, grid=None):
    """Minimize the warping discrepancy; see :func:`pairwise_warp`."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    grid, y_t = _grid_and_values(target, grid)
    grid_r, y_r = _grid_and_values(reference, grid)
    check_same_grid(grid, grid_r)
    if scale is None:
        scale = max(np.ptp(y_r), np.ptp(y_t))
    if np.ptp(y_t) <= DEGENERATE_RANGE * scale or scale == 0.0:
        identity = WarpingFunction(grid, grid.copy(), flags=("degenerate",))
        return PairwiseFit(identity, warp_cost(identity, y_t, y_r, lam, grid), 0, True)
    if np.array_equal(y_t, y_r):
        return PairwiseFit(WarpingFunction.identity(grid), 0.0, 0)
    m = grid.size - 1
    basis = zero_sum_basis(m)
    z, cost, iterations = _nelder_mead(
        np.zeros(m - 1), 0.3, int(max_iter), float(xtol), basis, grid,
        np.ascontiguousarray(y_r), np.ascontiguousarray(y_t), float(lam),
    )
    if not np.isfinite(cost) or not np.all(np.isfinite(z)):
        raise OptimizerDiverged("non-finite warping cost")
    warp = clr_inverse(basis @ z, grid)
    return PairwiseFit(warp, float(cost), int(iterations))


def pairwise_warp(target, reference, lam=0.0, max_iter=500, xtol=1e-6, scale=None):
    """Warp ``g`` aligning ``reference`` to ``target``: ``reference(g(t)) ~ target(t)``.

    The warp is searched over CLR coordinates (restricted to the zero-sum
    subspace) with Nelder-Mead, so every proposal is a valid warp.

    Parameters
    ----------
    target, reference : SampledCurve or ndarray
        Curves on the same equispaced grid.
    lam : float
        Non-negative penalty on ``integral (g(t) - t)^2``.
    max_iter : int
        Nelder-Mead iteration cap.
    xtol : float
        Simplex diameter (sup norm) at which the search stops.
    scale : float, optional
        Typical curve range; a target whose range is below ``1e-6 * scale``
        is degenerate and gets the identity warp, flagged ``"degenerate"``.

    Returns
    -------
    WarpingFunction
    """
    return fit_pairwise(target, reference, lam, max_iter, xtol, scale).warp


def curve_rng(seed, curve_id):
    """Random generator keyed by ``(seed, curve_id)``, independent of call order."""
    key = zlib.crc32(str(curve_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def _sorted_by_id(pool):
    return sorted(pool, key=lambda c: str(c.id))


def choose_partners(index, pool, n_star, seed):
    """Pool members whose pairwise warps enter the inverse-warp average.

    The curve itself is always included; the remaining ``n_star - 1`` are a
    uniform draw without replacement from the other members when the pool is
    larger than ``n_star``.
    """
    pool = _sorted_by_id(pool)
    selves = [c for c in pool if str(c.id) == str(index)]
    if not selves:
        raise KeyError(f"curve {index!r} is not in the pool")
    others = [c for c in pool if str(c.id) != str(index)]
    n_star = max(1, min(int(n_star), len(pool)))
    if len(others) > n_star - 1:
        picked = curve_rng(seed, index).choice(len(others), size=n_star - 1, replace=False)
        others = [others[i] for i in np.sort(picked)]
    return selves[0], others


def estimate_h_inverse(index, pool, n_star=30, lam=0.0, seed=0, pairwise=None, **warp_options):
    """Average of pairwise warps of curve ``index`` against pool members.

    Parameters
    ----------
    index : str
        Id of the curve being registered.
    pool : list of SampledCurve
        Curves of the same registration class (including ``index``).
    n_star : int
        Number of pairwise warps averaged (clipped to the pool size).
    pairwise : callable, optional
        ``pairwise(target, reference) -> WarpingFunction``; defaults to
        :func:`pairwise_warp` with ``lam`` and ``warp_options``.
    """
    if not pool:
        raise EmptyPool("registration pool is empty")
    target, partners = choose_partners(index, pool, n_star, seed)
    if pairwise is None:
        def pairwise(t, r):
            return pairwise_warp(t, r, lam, **warp_options)
    warps = [WarpingFunction.identity(target.grid)]
    warps += [pairwise(target, ref) for ref in partners]
    values = np.mean([g.values for g in warps], axis=0)
    values[0], values[-1] = 0.0, 1.0
    flags = ("degenerate",) if any("degenerate" in g.flags for g in warps[1:]) else ()
    return WarpingFunction(target.grid, values, flags)


def invert_warp(h):
    """Exact inverse of a piecewise-linear warp (knots and values swapped).

    Use ``.resample(grid)`` on the result to put it back on a common grid.
    """
    if not isinstance(h, WarpingFunction):
        h = WarpingFunction(np.linspace(0.0, 1.0, len(h)), h)
    return WarpingFunction(h.values.copy(), h.grid.copy(), h.flags)


# ---------------------------------------------------------------------------
# class-wise registration


@dataclass
class RegistrationResult:
    """Per-curve registration output on the common grid ``u``.

    ``w[j] = y(h(u[j]))`` is the registered amplitude curve.
    """

    id: str
    h: WarpingFunction
    h_inverse: WarpingFunction
    w: np.ndarray
    class_label: object = None
    lam: float = None
    n_star: int = None
    flags: tuple = field(default=())


def apply_warp(curve, h):
    """Registered curve ``y(h(u))`` on the curve's own grid."""
    grid, y = _grid_and_values(curve)
    return np.interp(h(grid), grid, y)


def group_by_class(curves, class_key="class"):
    groups = {}
    for c in curves:
        groups.setdefault(c.covariates.get(class_key), []).append(c)
    return groups


def auto_lambda(curves, seed=0, factors=LAMBDA_FACTORS, n_pairs=AUTO_LAMBDA_PAIRS,
                target=AUTO_DISTORTION_TARGET, **warp_options):
    """Smallest ``factor * curve_variance`` whose median pairwise distortion is below ``target``."""
    pool = _sorted_by_id(curves)
    if len(pool) < 2:
        return 0.0
    variance = float(np.mean([np.var(c.values) for c in pool]))
    rng = curve_rng(seed, "auto-lambda:" + str(pool[0].id))
    pairs = [tuple(rng.choice(len(pool), size=2, replace=False)) for _ in range(n_pairs)]
    scale = float(np.median([np.ptp(c.values) for c in pool]))
    lam = factors[-1] * variance
    for factor in factors:
        candidate = factor * variance
        distortions = [
            pairwise_warp(pool[i], pool[k], candidate, scale=scale, **warp_options).distortion()
            for i, k in pairs
        ]
        if np.median(distortions) < target:
            lam = candidate
            break
    return float(lam)


def register_class(curves, lam=0.0, n_star=30, seed=0, class_key="class", **warp_options):
    """Register curves separately within each class.

    Parameters
    ----------
    curves : list of SampledCurve
        All on one grid; ``covariates[class_key]`` defines the classes.
    lam : float or 'auto'
        Warp penalty; ``'auto'`` picks it per class with :func:`auto_lambda`.
    n_star : int
        Pairwise warps per curve.
    seed : int
        Root seed; each curve draws partners from its own keyed stream.

    Returns
    -------
    list of RegistrationResult
        In input order.
    """
    if not curves:
        return []
    grid = curves[0].grid
    for c in curves:
        check_same_grid(grid, c.grid)
    results = {}
    for label, members in group_by_class(curves, class_key).items():
        class_lam = auto_lambda(members, seed, **warp_options) if lam == "auto" else float(lam)
        scale = float(np.median([np.ptp(c.values) for c in members]))
        used = max(1, min(int(n_star), len(members)))
        for curve in members:
            h_inv = estimate_h_inverse(
                curve.id, members, used, class_lam, seed, scale=scale, **warp_options
            )
            h = invert_warp(h_inv).resample(grid)
            results[curve.id] = RegistrationResult(
                id=curve.id,
                h=h,
                h_inverse=h_inv,
                w=apply_warp(curve, h),
                class_label=label,
                lam=class_lam,
                n_star=used,
                flags=h_inv.flags,
            )
        logger.info("class %r: %d curves, lam=%.4g, n_star=%d", label, len(members), class_lam, used)
    return [results[c.id] for c in curves]


def auc_warp(curve):
    """Normalized cumulative integral of a positive curve (trapezoid rule)."""
    grid, y = _grid_and_values(curve)
    if np.any(y <= 0):
        raise NonPositiveCurve(f"curve {getattr(curve, 'id', '?')} has non-positive values")
    cum = cumulative_trapezoid(y, grid, initial=0.0)
    values = cum / cum[-1]
    values[0], values[-1] = 0.0, 1.0
    return WarpingFunction(grid, values)


def register_auc(curves, class_key="class"):
    """Area-under-the-curve registration: ``h^{-1}`` is the normalized cumulative area."""
    out = []
    for c in curves:
        h_inv = auc_warp(c)
        h = invert_warp(h_inv).resample(c.grid)
        out.append(RegistrationResult(
            id=c.id, h=h, h_inverse=h_inv, w=apply_warp(c, h),
            class_label=c.covariates.get(class_key),
        ))
    return out


# ---------------------------------------------------------------------------
# estimators


class _RegistrationBase(TransformerMixin, BaseEstimator):
    def transform(self, curves):
        """Registered amplitude curves as an ``(N, m + 1)`` array.

        Curves seen in ``fit`` reuse their fitted warps.
        """
        by_id = {r.id: r for r in self.results_}
        missing = [c.id for c in curves if c.id not in by_id]
        if missing:
            raise KeyError(f"curves not registered in fit: {missing[:5]}")
        return np.vstack([by_id[c.id].w for c in curves])

    @property
    def warps_(self):
        return np.vstack([r.h.values for r in self.results_])

    @property
    def inverse_warps_(self):
        return np.vstack([r.h_inverse.values for r in self.results_])


class PairwiseRegistration(_RegistrationBase):
    """Class-wise pairwise registration.

    Parameters
    ----------
    lam : float or 'auto', default=0.0
    n_star : int, default=30
    seed : int, default=0
    class_key : str, default='class'
    max_iter : int, default=500
    xtol : float, default=1e-6
    """

    def __init__(self, lam=0.0, n_star=30, seed=0, class_key="class", max_iter=500, xtol=1e-6):
        self.lam = lam
        self.n_star = n_star
        self.seed = seed
        self.class_key = class_key
        self.max_iter = max_iter
        self.xtol = xtol

    def fit(self, curves, y=None):
        self.results_ = register_class(
            list(curves), self.lam, self.n_star, self.seed, self.class_key,
            max_iter=self.max_iter, xtol=self.xtol,
        )
        return self


class AUCRegistration(_RegistrationBase):
    """Area-under-the-curve registration of positive curves."""

    def __init__(self, class_key="class"):
        self.class_key = class_key

    def fit(self, curves, y=None):
        self.results_ = register_auc(list(curves), self.class_key)
        return self
