"""Multivariate linear mixed-effects model with crossed random effects.

Responses ``A`` (N x p: amplitude scores, phase scores, duration) follow

    A = X B + sum_r Z_r Gamma_r + E,
    rows of Gamma_r ~ N(0, Sigma_r),  rows of E ~ N(0, Sigma_E diagonal),

where each ``Sigma_r`` is masked so that amplitude scores are uncorrelated
among themselves and so are phase scores. Covariance parameters are fitted
by minimizing the profiled REML deviance, evaluated through the penalized
least-squares system of the spherical random effects. The largest grouping
factor is eliminated level by level (its block is block-diagonal) and the
remaining system is factored densely; the ``Np x Np`` marginal covariance is
never formed.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import patsy
import scipy.linalg as sla
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    MissingLevel,
    NotPositiveDefinite,
    NumericalBreakdown,
    RankDeficientDesign,
    TooLarge,
)

logger = logging.getLogger(__name__)

MIN_EIGENVALUE = 1e-8
DENSE_ORACLE_LIMIT = 5000
LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# model specification


def score_mask(n_amplitude, n_phase, duration=True):
    """Boolean ``p x p`` mask of free random-effect covariance entries.

    Off-diagonal entries inside the amplitude block and inside the phase
    block are fixed at zero; everything else is free.
    """
    p = n_amplitude + n_phase + int(duration)
    mask = np.ones((p, p), dtype=bool)
    for lo, hi in ((0, n_amplitude), (n_amplitude, n_amplitude + n_phase)):
        block = np.zeros((hi - lo, hi - lo), dtype=bool)
        np.fill_diagonal(block, True)
        mask[lo:hi, lo:hi] = block
    return mask


def response_names(n_amplitude, n_phase, duration=True):
    names = [f"wFPC{j + 1}" for j in range(n_amplitude)]
    names += [f"sFPC{j + 1}" for j in range(n_phase)]
    if duration:
        names.append("duration")
    return names


@dataclass
class ModelSpec:
    """Designs of the mixed model.

    ``codes[r]`` holds, for every observation, the level index of grouping
    factor ``r``; this is the indicator matrix ``Z_r`` in compact form.
    """

    X: np.ndarray
    codes: list
    masks: list
    fixed_names: list = None
    effect_names: list = None
    levels: list = None
    response_names: list = None
    dropped: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.codes = [np.asarray(c, dtype=np.int64) for c in self.codes]
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        n = self.X.shape[0]
        if len(self.codes) != len(self.masks):
            raise ValueError("one mask per random effect is required")
        for c in self.codes:
            if c.shape != (n,) or c.min() < 0:
                raise ValueError("random-effect codes must be non-negative, one per observation")
        for m in self.masks:
            if m.shape[0] != m.shape[1] or not np.array_equal(m, m.T) or not m.diagonal().all():
                raise ValueError("masks must be symmetric with a unit diagonal")
        if self.fixed_names is None:
            self.fixed_names = [f"x{j}" for j in range(self.k)]
        if self.effect_names is None:
            self.effect_names = [f"effect{r + 1}" for r in range(len(self.codes))]
        if self.levels is None:
            self.levels = [[str(i) for i in range(c.max() + 1)] for c in self.codes]
        if self.response_names is None:
            self.response_names = [f"y{j + 1}" for j in range(self.p)]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def p(self):
        return self.masks[0].shape[0] if self.masks else len(self.response_names)

    @property
    def n_levels(self):
        return [len(lv) for lv in self.levels]

    def Z(self, r):
        """Dense indicator matrix of grouping factor ``r``."""
        Z = np.zeros((self.n, self.n_levels[r]))
        Z[np.arange(self.n), self.codes[r]] = 1.0
        return Z


def _as_columns(data):
    if hasattr(data, "to_dict") and hasattr(data, "columns"):
        return {c: list(data[c]) for c in data.columns}
    if isinstance(data, dict):
        return {k: list(v) for k, v in data.items()}
    rows = list(data)
    keys = rows[0].keys() if rows else []
    return {k: [row[k] for row in rows] for k in keys}


def _factor_codes(values, name):
    values = [None if v is None else str(v) for v in values]
    if any(v is None or v == "" for v in values):
        raise MissingLevel(f"grouping factor {name!r} has missing levels")
    levels = sorted(set(values))
    index = {lv: i for i, lv in enumerate(levels)}
    return np.array([index[v] for v in values], dtype=np.int64), levels


def drop_aliased(X, names, tol=1e-10):
    """Remove zero-variance and linearly dependent columns (first occurrence kept)."""
    keep = []
    dropped = []
    for j, name in enumerate(names):
        col = X[:, j]
        if name != "Intercept" and np.ptp(col) == 0.0:
            dropped.append(name)
            continue
        keep.append(j)
    Xk = X[:, keep]
    if Xk.shape[1]:
        # greedy in original order: a column is aliased if it lies in the span of the kept ones
        chosen = []
        for pos, j in enumerate(keep):
            trial = chosen + [j]
            s = np.linalg.svd(X[:, trial], compute_uv=False)
            if s[-1] > tol * max(s[0], 1.0) * np.sqrt(X.shape[0]):
                chosen.append(j)
            else:
                dropped.append(names[j])
        keep = chosen
    return keep, dropped


def _design_matrix(formula, data, n, design_info=None):
    """Patsy model matrix; factor-free formulas ("1", "0") are built directly.

    Returns the matrix, its column names and the patsy design info (None for
    factor-free formulas).
    """
    if design_info is None:
        terms = patsy.ModelDesc.from_formula(formula).rhs_termlist
        if all(not term.factors for term in terms):
            k = int(bool(terms))
            return np.ones((n, k)), ["Intercept"][:k], None
        dm = patsy.dmatrix(formula, data, return_type="matrix", NA_action="raise")
    else:
        dm = patsy.build_design_matrices([design_info], data, NA_action="raise")[0]
    return np.asarray(dm, dtype=float), list(dm.design_info.column_names), dm.design_info


def build_design(
    scores_amplitude,
    scores_phase,
    durations,
    covariates,
    formula="1",
    random_effects=("speaker", "sentence"),
    categorical=(),
    drop_rank_deficient=True,
):
    """Response matrix and designs for the joint model.

    Parameters
    ----------
    scores_amplitude, scores_phase : array-like of shape (N, M_w), (N, M_s)
    durations : array-like of shape (N,)
    covariates : mapping of column -> sequence, list of row dicts, or DataFrame
    formula : str
        Right-hand side in Wilkinson notation, e.g. ``"tone * sex + B2 + I(B2**2)"``.
        Categorical columns are dummy coded against their first (sorted) level.
    random_effects : sequence of str
        Grouping columns, one random intercept vector per factor.
    categorical : sequence of str
        Columns to treat as categorical; other formula columns are numeric.
    drop_rank_deficient : bool
        Drop aliased columns with a warning instead of raising.

    Returns
    -------
    spec : ModelSpec
    A : ndarray of shape (N, p)
    """
    Aw = np.atleast_2d(np.asarray(scores_amplitude, dtype=float))
    As = np.atleast_2d(np.asarray(scores_phase, dtype=float))
    T = np.asarray(durations, dtype=float).reshape(-1, 1)
    if Aw.shape[0] != T.shape[0]:
        Aw = Aw.T
    if As.shape[0] != T.shape[0]:
        As = As.T
    A = np.hstack([Aw, As, T])
    n = A.shape[0]
    cols = _as_columns(covariates)
    data = {}
    for name, values in cols.items():
        if len(values) != n:
            raise ValueError(f"covariate {name!r} has {len(values)} rows, expected {n}")
        if name in categorical:
            vals = [None if v is None else str(v) for v in values]
            if any(v in (None, "") for v in vals):
                raise MissingLevel(f"categorical covariate {name!r} has missing values")
            data[name] = np.array(vals, dtype=object)
        else:
            try:
                data[name] = np.array([float(v) for v in values])
            except (TypeError, ValueError):
                data[name] = np.array([str(v) for v in values], dtype=object)
    try:
        X, names, _ = _design_matrix(formula, data, n)
    except patsy.PatsyError as exc:
        raise MissingLevel(str(exc)) from exc
    keep, dropped = drop_aliased(X, names)
    if dropped:
        if not drop_rank_deficient:
            raise RankDeficientDesign(f"aliased or constant columns: {dropped}")
        warnings.warn(f"dropping aliased or constant fixed-effect columns: {dropped}", stacklevel=2)
    X = X[:, keep]
    names = [names[j] for j in keep]
    codes, levels = [], []
    for name in random_effects:
        if name not in cols:
            raise MissingLevel(f"no grouping column {name!r}")
        c, lv = _factor_codes(cols[name], name)
        codes.append(c)
        levels.append(lv)
    mw, ms = Aw.shape[1], As.shape[1]
    mask = score_mask(mw, ms)
    spec = ModelSpec(
        X=X,
        codes=codes,
        masks=[mask.copy() for _ in random_effects],
        fixed_names=names,
        effect_names=list(random_effects),
        levels=levels,
        response_names=response_names(mw, ms),
        dropped=dropped,
    )
    return spec, A


# ---------------------------------------------------------------------------
# covariance parameters


class CovParams:
    """Layout of the parameter vector ``theta``.

    ``theta`` holds, per random effect, the free lower-triangular entries
    (diagonal included) of ``Sigma_r / sigma^2`` on the whitened scale, then,
    unless ``scalar_residual``, the ``p - 1`` log residual-variance ratios
    ``log(r_j / r_1)``.
    """

    def __init__(self, masks, scalar_residual=False):
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        self.p = self.masks[0].shape[0]
        self.scalar_residual = scalar_residual
        self.index = []
        offset = 0
        for m in self.masks:
            rows, cols = np.tril_indices(self.p)
            free = m[rows, cols]
            self.index.append((rows[free], cols[free], offset))
            offset += int(free.sum())
        self.n_cov = offset
        self.n_ratio = 0 if scalar_residual else self.p - 1

    @property
    def size(self):
        return self.n_cov + self.n_ratio

    def relative_covariances(self, theta):
        out = []
        for rows, cols, offset in self.index:
            T = np.zeros((self.p, self.p))
            vals = theta[offset: offset + rows.size]
            T[rows, cols] = vals
            T[cols, rows] = vals
            out.append(T)
        return out

    def ratios(self, theta):
        if self.scalar_residual:
            return np.ones(self.p)
        return np.exp(np.concatenate(([0.0], theta[self.n_cov:])))

    def pack(self, relative_covs, ratios=None):
        theta = np.zeros(self.size)
        for (rows, cols, offset), T in zip(self.index, relative_covs):
            theta[offset: offset + rows.size] = np.asarray(T)[rows, cols]
        if not self.scalar_residual:
            r = np.ones(self.p) if ratios is None else np.asarray(ratios, dtype=float)
            theta[self.n_cov:] = np.log(r[1:] / r[0])
        return theta

    def _pairs(self):
        # (position, position of diag i, position of diag j) for each free entry
        out = []
        for rows, cols, offset in self.index:
            where = {(i, j): offset + t for t, (i, j) in enumerate(zip(rows, cols))}
            for (i, j), q in where.items():
                out.append((q, where[(i, i)], where[(j, j)], i == j))
        return out

    def to_internal(self, theta):
        """Unconstrained optimizer coordinates: log variances, atanh correlations."""
        theta = np.asarray(theta, dtype=float)
        eta = theta.copy()
        diag = {}
        for q, qi, qj, is_diag in self._pairs():
            if is_diag:
                eta[q] = np.log(max(theta[q], 1e-12))
                diag[q] = max(theta[q], 1e-12)
        for q, qi, qj, is_diag in self._pairs():
            if not is_diag:
                r = theta[q] / np.sqrt(diag[qi] * diag[qj])
                eta[q] = np.arctanh(np.clip(r, -0.999999, 0.999999))
        return eta

    def from_internal(self, eta):
        eta = np.asarray(eta, dtype=float)
        theta = eta.copy()
        for q, qi, qj, is_diag in self._pairs():
            if is_diag:
                theta[q] = np.exp(eta[q])
            else:
                theta[q] = np.tanh(eta[q]) * np.exp(0.5 * (eta[qi] + eta[qj]))
        return theta

    def initial(self, A):
        """``Sigma_r = 0.1 * diag(component variances)``; ratios from the same variances."""
        var = np.var(A, axis=0, ddof=1)
        var = np.where(var > 0, var, 1.0)
        ratios = np.ones(self.p) if self.scalar_residual else var / var[0]
        relative = np.diag(var / ratios / var[0]) * 0.1
        return self.pack([relative for _ in self.masks], ratios)


def clamp_psd(T, floor=MIN_EIGENVALUE):
    """Symmetric matrix with eigenvalues floored at ``floor``; also reports activation."""
    vals, vecs = np.linalg.eigh(T)
    if vals[0] >= floor:
        return T, False
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, True


# ---------------------------------------------------------------------------
# profiled deviance


class _CrossProducts:
    """theta-independent sums needed by every deviance evaluation."""

    def __init__(self, spec, A):
        A = np.asarray(A, dtype=float)
        if A.shape != (spec.n, spec.p):
            raise ValueError(f"A must have shape {(spec.n, spec.p)}, got {A.shape}")
        self.spec = spec
        self.A = A
        n_levels = spec.n_levels
        self.big = int(np.argmax(n_levels))
        self.dense_effects = [r for r in range(len(spec.codes)) if r != self.big]
        # dense design: indicators of the remaining factors, then X
        blocks = [spec.Z(r) for r in self.dense_effects] + [spec.X]
        W = np.hstack(blocks)
        self.dense_sizes = [n_levels[r] for r in self.dense_effects]
        self.n_dense_random = int(sum(self.dense_sizes))
        self.n_v = W.shape[1]
        self.WtW = W.T @ W
        self.WtA = W.T @ A
        self.AtA = A.T @ A
        code = spec.codes[self.big]
        lb = n_levels[self.big]
        V = np.zeros((lb, self.n_v))
        np.add.at(V, code, W)
        Y = np.zeros((lb, spec.p))
        np.add.at(Y, code, A)
        counts = np.bincount(code, minlength=lb)
        self.big_counts = counts
        self.V_rows = V
        self.Y_rows = Y
        self.kappas = []
        for kappa in np.unique(counts):
            sel = counts == kappa
            self.kappas.append((
                float(kappa),
                int(sel.sum()),
                V[sel].T @ V[sel],
                Y[sel].T @ V[sel],
                Y[sel].T @ Y[sel],
            ))


@dataclass
class DevianceResult:
    deviance: float
    sigma2: float
    B: np.ndarray
    blups: list
    relative_covs: list
    ratios: np.ndarray
    clamped: bool
    fixed_cov: np.ndarray
    penalized_rss: float
    spherical: list


def _evaluate(theta, cp, params, method="REML", conditional=False):
    spec = cp.spec
    p, k, n = spec.p, spec.k, spec.n
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NumericalBreakdown("non-finite theta")
    relative = params.relative_covariances(theta)
    factors = []
    clamped = False
    for T in relative:
        Tc, was = clamp_psd(T)
        clamped |= was
        try:
            factors.append(np.linalg.cholesky(Tc))
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("relative covariance not positive definite after clamping")
    ratios = params.ratios(theta)
    dm = 1.0 / np.sqrt(ratios)

    # eliminate the largest factor, one p x p block per level-count value
    Lb = factors[cp.big]
    LtL = Lb.T @ Lb
    logdet_big = 0.0
    n_v = cp.n_v
    Md = np.kron(cp.WtW, np.eye(p))
    WtA_w = cp.WtA * dm
    rd = WtA_w.reshape(-1)
    aa = float(np.sum(np.diag(cp.AtA) * dm * dm))
    P_of = {}
    for kappa, mult, VV, YV, YY in cp.kappas:
        Mk = kappa * LtL + np.eye(p)
        ck = np.linalg.cholesky(Mk)
        logdet_big += mult * 2.0 * np.sum(np.log(np.diag(ck)))
        P = Lb @ sla.cho_solve((ck, True), Lb.T)
        P_of[kappa] = (P, ck)
        Md -= np.kron(VV, P)
        PY = P @ (dm[:, None] * YV)
        rd = rd - PY.T.reshape(-1)
        aa -= float(np.sum((dm[:, None] * YY * dm[None, :]) * P))

    # relative factors of the remaining random effects, identity on fixed effects
    fac = np.empty((n_v, p, p))
    offset = 0
    for r, size in zip(cp.dense_effects, cp.dense_sizes):
        fac[offset: offset + size] = factors[r]
        offset += size
    fac[offset:] = np.eye(p)
    M4 = Md.reshape(n_v, p, n_v, p)
    M4 = np.einsum("aci,acbd->aibd", fac, M4)
    M4 = np.einsum("aibd,bdj->aibj", M4, fac)
    Md = M4.reshape(n_v * p, n_v * p)
    rd = np.einsum("aci,ac->ai", fac, rd.reshape(n_v, p)).reshape(-1)
    nr = p * cp.n_dense_random
    Md[np.arange(nr), np.arange(nr)] += 1.0
    try:
        Ld = np.linalg.cholesky(Md)
    except np.linalg.LinAlgError:
        raise NumericalBreakdown("penalized normal equations are not positive definite")
    diag = np.diag(Ld)
    if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
        raise NumericalBreakdown("non-finite or zero pivot in the Cholesky factor")
    q = sla.solve_triangular(Ld, rd, lower=True)
    prss = aa - float(q @ q)
    if not prss > 0:
        raise NumericalBreakdown("penalized residual sum of squares is not positive")
    logdet_u = logdet_big + 2.0 * np.sum(np.log(diag[:nr]))
    logdet_x = 2.0 * np.sum(np.log(diag[nr:]))
    log_ratio = float(np.sum(np.log(ratios)))
    if method == "REML":
        nu = p * (n - k)
        sigma2 = prss / nu
        dev = logdet_u + logdet_x + nu * (1.0 + np.log(2.0 * np.pi * sigma2)) + (n - k) * log_ratio
    elif method == "ML":
        nu = p * n
        sigma2 = prss / nu
        dev = logdet_u + nu * (1.0 + np.log(2.0 * np.pi * sigma2)) + n * log_ratio
    else:
        raise ValueError("method must be 'REML' or 'ML'")
    if not conditional:
        return float(dev)

    z = sla.solve_triangular(Ld.T, q, lower=False)
    Tz = np.einsum("aij,aj->ai", fac, z.reshape(n_v, p))
    B = Tz[cp.n_dense_random:] / dm
    # fixed-effect covariance: trailing block of Md^{-1}, row-major vec(B)
    Lxx = Ld[nr:, nr:]
    Linv = sla.solve_triangular(Lxx, np.eye(p * k), lower=True)
    fixed_cov = sigma2 * (Linv.T @ Linv)
    scale = np.tile(1.0 / dm, k)
    fixed_cov = fixed_cov * np.outer(scale, scale)
    # spherical effects of the big factor, level by level
    resid = cp.Y_rows * dm - cp.V_rows @ Tz
    u_big = np.zeros_like(resid)
    for kappa, (P, ck) in P_of.items():
        sel = cp.big_counts == kappa
        u_big[sel] = sla.cho_solve((ck, True), Lb.T @ resid[sel].T).T
    spherical = [None] * len(spec.codes)
    spherical[cp.big] = u_big
    offset = 0
    z_mat = z.reshape(n_v, p)
    for r, size in zip(cp.dense_effects, cp.dense_sizes):
        spherical[r] = z_mat[offset: offset + size]
        offset += size
    blups = [(spherical[r] @ factors[r].T) / dm for r in range(len(spec.codes))]
    return DevianceResult(
        deviance=float(dev),
        sigma2=float(sigma2),
        B=B,
        blups=blups,
        relative_covs=relative,
        ratios=ratios,
        clamped=clamped,
        fixed_cov=fixed_cov,
        penalized_rss=prss,
        spherical=spherical,
    )


def profiled_reml_deviance(theta, spec, A, scalar_residual=False, method="REML",
                           conditional=False, _cache=None):
    """Profiled ``-2 log restricted likelihood`` at ``theta``.

    Parameters
    ----------
    theta : array-like
        See :class:`CovParams`.
    spec : ModelSpec
    A : ndarray of shape (N, p)
    scalar_residual : bool
        One residual variance for all components (no ratio parameters).
    method : {'REML', 'ML'}
    conditional : bool
        Also return the conditional estimates (``B``, ``sigma^2``, BLUPs).

    Returns
    -------
    float or DevianceResult
    """
    cp = _cache if _cache is not None else _CrossProducts(spec, A)
    params = CovParams(spec.masks, scalar_residual)
    return _evaluate(theta, cp, params, method, conditional)


def marginal_covariance(theta, spec, scalar_residual=False):
    """Dense ``Lambda / sigma^2`` for ``vec(A)`` (component-major), small problems only."""
    params = CovParams(spec.masks, scalar_residual)
    relative = [clamp_psd(T)[0] for T in params.relative_covariances(np.asarray(theta, float))]
    ratios = params.ratios(np.asarray(theta, float))
    n, p = spec.n, spec.p
    if n * p > DENSE_ORACLE_LIMIT:
        raise TooLarge(f"Np = {n * p} exceeds the dense limit {DENSE_ORACLE_LIMIT}")
    lam = np.kron(np.diag(ratios), np.eye(n))
    half = np.sqrt(ratios)
    for r, T in enumerate(relative):
        T = half[:, None] * T * half[None, :]
        Z = spec.Z(r)
        Zp = np.kron(np.eye(p), Z)
        lam += Zp @ np.kron(T, np.eye(Z.shape[1])) @ Zp.T
    return lam


def direct_reml_oracle(theta, spec, A, scalar_residual=False):
    """Literal dense REML deviance with ``sigma^2`` profiled out.

    Builds ``Lambda``, an orthonormal ``K`` with ``K' (I_p kron X) = 0``,
    ``Psi = K' Lambda K`` and ``Omega = K' vec(A)``. Agrees with
    :func:`profiled_reml_deviance` up to the theta-independent constant
    ``p * log|X'X|``. Test oracle only.
    """
    n, p, k = spec.n, spec.p, spec.k
    if n * p > DENSE_ORACLE_LIMIT:
        raise TooLarge(f"Np = {n * p} exceeds the dense limit {DENSE_ORACLE_LIMIT}")
    lam = marginal_covariance(theta, spec, scalar_residual)
    Xp = np.kron(np.eye(p), spec.X)
    K = sla.null_space(Xp.T)
    psi = K.T @ lam @ K
    omega = K.T @ np.asarray(A, dtype=float).reshape(-1, order="F")
    nu = p * (n - k)
    sign, logdet = np.linalg.slogdet(psi)
    quad = float(omega @ np.linalg.solve(psi, omega))
    sigma2 = quad / nu
    return float(nu * LOG_2PI + logdet + nu * np.log(sigma2) + nu)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FittedModel:
    """Estimates of the joint mixed model (original response scale)."""

    fixed_effects: np.ndarray
    fixed_se: np.ndarray
    random_cov: list
    residual_sd: np.ndarray
    blups: list
    deviance: float
    theta: np.ndarray
    sigma2: float
    fixed_names: list
    response_names: list
    effect_names: list
    levels: list
    masks: list
    method: str = "REML"
    scalar_residual: bool = False
    converged: bool = True
    clamped: bool = False
    n_evaluations: int = 0
    message: str = ""

    @property
    def residual_cov(self):
        return np.diag(self.residual_sd ** 2)

    def random_sd(self):
        return np.vstack([np.sqrt(np.diag(S)) for S in self.random_cov])

    def sd_table(self):
        """Rows (effects..., 'Residual') x columns (response components)."""
        rows = list(self.effect_names) + ["Residual"]
        return rows, np.vstack([self.random_sd(), self.residual_sd])

    def to_dict(self):
        return {
            "fixed_effects": self.fixed_effects.tolist(),
            "fixed_se": self.fixed_se.tolist(),
            "random_cov": [S.tolist() for S in self.random_cov],
            "residual_sd": self.residual_sd.tolist(),
            "blups": [b.tolist() for b in self.blups],
            "deviance": self.deviance,
            "theta": self.theta.tolist(),
            "sigma2": self.sigma2,
            "fixed_names": list(self.fixed_names),
            "response_names": list(self.response_names),
            "effect_names": list(self.effect_names),
            "levels": [list(lv) for lv in self.levels],
            "masks": [m.astype(int).tolist() for m in self.masks],
            "method": self.method,
            "scalar_residual": self.scalar_residual,
            "converged": self.converged,
            "clamped": self.clamped,
            "n_evaluations": self.n_evaluations,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("fixed_effects", "fixed_se", "residual_sd", "theta"):
            d[key] = np.asarray(d[key], dtype=float)
        d["random_cov"] = [np.asarray(S, dtype=float) for S in d["random_cov"]]
        d["blups"] = [np.asarray(b, dtype=float) for b in d["blups"]]
        d["masks"] = [np.asarray(m, dtype=bool) for m in d["masks"]]
        return cls(**d)


class _Budget(Exception):
    pass


class _Objective:
    """Counts evaluations, remembers the best point, enforces a budget."""

    def __init__(self, fn, budget=None):
        self.fn = fn
        self.budget = budget
        self.calls = 0
        self.best_x = None
        self.best_f = np.inf

    def __call__(self, x):
        if self.budget is not None and self.calls >= self.budget:
            raise _Budget
        self.calls += 1
        try:
            f = self.fn(x)
        except (NumericalBreakdown, NotPositiveDefinite, np.linalg.LinAlgError):
            f = np.inf
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        return f


def _fd_gradient(obj, x, f0):
    g = np.zeros_like(x)
    for i in range(x.size):
        h = 1e-5 * (1.0 + abs(x[i]))
        xp = x.copy()
        xp[i] += h
        g[i] = (obj(xp) - f0) / h
    return g


def _central_gradient(fn, x, h=1e-3):
    """Fourth-order central differences (truncation error O(h^4))."""
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * (1.0 + abs(x[i]))
        f = []
        for k in (-2, -1, 1, 2):
            xk = x.copy()
            xk[i] += k * step
            f.append(fn(xk))
        g[i] = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * step)
    return g


def _polish(fn, x, hess_inv, budget, max_steps=6):
    """Quasi-Newton steps with central-difference gradients.

    Forward differences limit the BFGS phase to about ``sqrt(eps)``
    relative accuracy; a few steps along ``hess_inv @ g`` with central
    gradients recover most of the remaining digits. Each step length comes
    from a secant fit of the directional derivative, the inverse Hessian is
    updated as in BFGS, and a step is kept only if it shrinks the gradient.
    Returns the point, its gradient and the number of gradient evaluations.
    """
    H = np.array(hess_inv, dtype=float)
    g = _central_gradient(fn, x)
    used = 1
    for _ in range(max_steps):
        if used + 2 > budget or not np.all(np.isfinite(g)):
            break
        d = H @ g
        if not np.all(np.isfinite(d)) or np.max(np.abs(d)) > 1.0 or not np.any(d):
            break
        g_trial = _central_gradient(fn, x - d)
        curvature = float((g - g_trial) @ d)
        if not curvature > 0:
            break
        alpha = float(g @ d) / curvature
        step = -alpha * d
        x_new = x + step
        g_new = _central_gradient(fn, x_new)
        used += 2
        if not np.max(np.abs(g_new)) < np.max(np.abs(g)):
            break
        y = g_new - g
        sy = float(step @ y)
        if sy > 0:
            rho = 1.0 / sy
            V = np.eye(x.size) - rho * np.outer(step, y)
            H = V @ H @ V.T + rho * np.outer(step, step)
        x, g = x_new, g_new
        if np.max(np.abs(step)) < 1e-12 * (1.0 + np.max(np.abs(x))):
            break
    return x, g, used


def hybrid_minimize(fn, x0, max_evals=500, tol=1e-6, nm_window=20, nm_rtol=1e-4, nm_maxiter=None):
    """Nelder-Mead until progress stalls, then BFGS with forward differences.

    The simplex phase stops once the best value improved by less than
    ``nm_rtol`` (relative) over ``nm_window`` iterations. The BFGS phase
    stops when the gradient sup-norm falls below ``tol * max(1, |f|)`` or
    after ``max_evals`` gradient evaluations. Remaining budget goes to a few
    polishing steps with central-difference gradients.

    Returns
    -------
    x, f, info : ndarray, float, dict
    """
    x0 = np.asarray(x0, dtype=float)
    obj = _Objective(fn)
    history = []

    def stall(intermediate_result):
        history.append(float(intermediate_result.fun))
        if len(history) > nm_window:
            old, new = history[-nm_window - 1], history[-1]
            if abs(old - new) <= nm_rtol * max(abs(old), 1.0):
                raise StopIteration

    nm_maxiter = nm_maxiter or 200 * x0.size
    minimize(obj, x0, method="Nelder-Mead", callback=stall,
             options={"maxiter": nm_maxiter, "xatol": 1e-8, "fatol": 1e-10, "adaptive": x0.size > 5})
    nm_calls = obj.calls
    x1 = obj.best_x if obj.best_x is not None else x0
    bfgs = _Objective(fn)
    bfgs.best_x, bfgs.best_f = x1.copy(), obj.best_f
    grad_calls = [0]

    def fun_and_grad(x):
        # one evaluation = deviance plus its finite-difference gradient
        if grad_calls[0] >= max_evals:
            raise _Budget
        grad_calls[0] += 1
        f = bfgs(x)
        if not np.isfinite(f):
            return f, np.zeros_like(x)
        return f, _fd_gradient(bfgs, np.asarray(x, dtype=float), f)

    converged = False
    message = ""
    hess_inv = None
    gtol = tol * max(1.0, abs(obj.best_f)) if np.isfinite(obj.best_f) else tol
    try:
        res = minimize(fun_and_grad, x1, jac=True, method="BFGS",
                       options={"gtol": gtol, "maxiter": 10 * max_evals})
        converged = bool(res.success)
        message = str(res.message)
        hess_inv = res.hess_inv
    except _Budget:
        message = f"budget of {max_evals} gradient evaluations exhausted in BFGS phase"
    x = bfgs.best_x
    f = bfgs.best_f
    left = max_evals - grad_calls[0]
    if hess_inv is not None and left > 0 and np.isfinite(f):
        xp, g, used = _polish(bfgs, x, hess_inv, left)
        grad_calls[0] += used
        fp = bfgs(xp)
        # at this precision deviance differences are rounding noise; keep the
        # polished point unless it is clearly worse
        if np.isfinite(fp) and fp <= f + 1e-9 * max(1.0, abs(f)):
            x, f = xp, fp
        converged = converged or bool(np.max(np.abs(g)) <= 10 * gtol)
    elif not converged:
        # gradient test at the best point
        g = _fd_gradient(_Objective(fn), x, f)
        converged = bool(np.max(np.abs(g)) <= 10 * gtol)
    return x, f, {"nm_evaluations": nm_calls, "bfgs_evaluations": bfgs.calls,
                  "gradient_evaluations": grad_calls[0],
                  "converged": converged, "message": message}


def fit(spec, A, scalar_residual=False, method="REML", max_evals=500, tol=1e-6,
        theta0=None, n_restarts=0, seed=0):
    """Fit the joint mixed model by minimizing the profiled deviance.

    Parameters
    ----------
    spec : ModelSpec
    A : ndarray of shape (N, p)
    scalar_residual : bool
        Single residual variance shared by all components.
    method : {'REML', 'ML'}
    max_evals : int
        Budget of (deviance, gradient) evaluations in the BFGS phase.
    tol : float
        Gradient-norm tolerance of the BFGS phase.
    theta0 : array-like, optional
        Starting point; by default ``Sigma_r = 0.1 * diag(var(A))``.
    n_restarts : int
        Extra starts from jittered ``theta0`` (seeded); the best is kept.

    Returns
    -------
    FittedModel
    """
    A = np.asarray(A, dtype=float)
    cp = _CrossProducts(spec, A)
    params = CovParams(spec.masks, scalar_residual)
    x0 = params.initial(A) if theta0 is None else np.asarray(theta0, dtype=float)

    def fn(eta):
        return _evaluate(params.from_internal(eta), cp, params, method)

    # optimize in log-variance / atanh-correlation coordinates, report theta
    e0 = params.to_internal(x0)
    starts = [e0]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    for _ in range(n_restarts):
        starts.append(e0 + rng.normal(scale=0.5, size=e0.size))
    best = None
    total_evals = 0
    for start in starts:
        x, f, info = hybrid_minimize(fn, start, max_evals=max_evals, tol=tol)
        total_evals += info["nm_evaluations"] + info["bfgs_evaluations"]
        if best is None or f < best[1]:
            best = (x, f, info)
    x, f, info = best
    x = params.from_internal(x)
    res = _evaluate(x, cp, params, method, conditional=True)
    if not info["converged"]:
        logger.warning("mixed-model fit did not converge: %s", info["message"])
    if res.clamped:
        logger.warning("eigenvalue clamping is active at the returned optimum")
    p = spec.p
    half = np.sqrt(res.ratios)
    random_cov = []
    for T, mask in zip(res.relative_covs, spec.masks):
        S = res.sigma2 * (half[:, None] * T * half[None, :])
        S = np.where(mask, 0.5 * (S + S.T), 0.0)
        random_cov.append(S)
    if scalar_residual:
        residual_sd = _conditional_residual_sd(spec, A, res)
    else:
        residual_sd = np.sqrt(res.sigma2 * res.ratios)
    fixed_se = np.sqrt(np.clip(np.diag(res.fixed_cov), 0.0, None)).reshape(spec.k, p)
    return FittedModel(
        fixed_effects=res.B,
        fixed_se=fixed_se,
        random_cov=random_cov,
        residual_sd=residual_sd,
        blups=res.blups,
        deviance=res.deviance,
        theta=x,
        sigma2=res.sigma2,
        fixed_names=list(spec.fixed_names),
        response_names=list(spec.response_names),
        effect_names=list(spec.effect_names),
        levels=[list(lv) for lv in spec.levels],
        masks=[m.copy() for m in spec.masks],
        method=method,
        scalar_residual=scalar_residual,
        converged=info["converged"],
        clamped=res.clamped,
        n_evaluations=total_evals,
        message=info["message"],
    )


def _conditional_residual_sd(spec, A, res):
    """Per-component ``sqrt(sum(resid^2 + u^2) / (N - k))`` from the conditional fit."""
    fitted = spec.X @ res.B
    for r, codes in enumerate(spec.codes):
        fitted = fitted + res.blups[r][codes]
    sq = np.sum((A - fitted) ** 2, axis=0)
    for u in res.spherical:
        sq = sq + np.sum(u ** 2, axis=0) * res.ratios
    return np.sqrt(sq / (spec.n - spec.k))


def correlation_report(model):
    """Correlation matrix of each random effect.

    Masked entries stay exactly 0 and the diagonal is exactly 1. Rows and
    columns of components with zero variance are NaN (undefined).
    """
    out = {}
    covs = model.random_cov if hasattr(model, "random_cov") else model
    names = getattr(model, "effect_names", None) or [f"effect{r + 1}" for r in range(len(covs))]
    for name, S in zip(names, covs):
        S = np.asarray(S, dtype=float)
        d = np.sqrt(np.clip(np.diag(S), 0.0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            P = S / np.outer(d, d)
        P = np.clip(P, -1.0, 1.0)
        P[S == 0.0] = 0.0
        np.fill_diagonal(P, 1.0)
        zero = d == 0.0
        P[zero, :] = np.nan
        P[:, zero] = np.nan
        out[name] = P
    return out


# ---------------------------------------------------------------------------
# estimator


class MultivariateLME(RegressorMixin, BaseEstimator):
    """Joint mixed model for amplitude scores, phase scores and duration.

    ``fit(X, y)`` takes ``X`` as covariates (mapping, row dicts or
    DataFrame) containing the formula columns and grouping columns, and
    ``y`` as the ``(N, p)`` response matrix ordered amplitude scores, phase
    scores, duration.

    Parameters
    ----------
    formula : str, default='1'
    random_effects : tuple of str, default=('speaker', 'sentence')
    categorical : tuple of str, default=()
    n_amplitude : int, optional
        Number of amplitude columns in ``y``; with ``n_phase`` this fixes the
        covariance mask. Defaults to ``(p - 1) // 2``.
    n_phase : int, optional
    scalar_residual : bool, default=False
    method : {'REML', 'ML'}, default='REML'
    max_evals : int, default=500
    tol : float, default=1e-6
    """

    def __init__(self, formula="1", random_effects=("speaker", "sentence"), categorical=(),
                 n_amplitude=None, n_phase=None, scalar_residual=False, method="REML",
                 max_evals=500, tol=1e-6):
        self.formula = formula
        self.random_effects = random_effects
        self.categorical = categorical
        self.n_amplitude = n_amplitude
        self.n_phase = n_phase
        self.scalar_residual = scalar_residual
        self.method = method
        self.max_evals = max_evals
        self.tol = tol

    def _split(self, y):
        y = np.asarray(y, dtype=float)
        p = y.shape[1]
        mw = self.n_amplitude if self.n_amplitude is not None else (p - 1) // 2
        ms = self.n_phase if self.n_phase is not None else p - 1 - mw
        if mw + ms + 1 != p:
            raise ValueError("n_amplitude + n_phase + 1 must equal the number of responses")
        return y[:, :mw], y[:, mw: mw + ms], y[:, -1]

    def fit(self, X, y):
        aw, as_, t = self._split(y)
        self.spec_, A = build_design(aw, as_, t, X, self.formula, self.random_effects,
                                     self.categorical)
        self.model_ = fit(self.spec_, A, self.scalar_residual, self.method,
                          self.max_evals, self.tol)
        n = np.asarray(y).shape[0]
        self._design_info = _design_matrix(self.formula, self._data(X), n)[2]
        return self

    def _data(self, X):
        cols = _as_columns(X)
        data = {}
        for name, values in cols.items():
            if name in self.categorical:
                data[name] = np.array([str(v) for v in values], dtype=object)
            else:
                try:
                    data[name] = np.array([float(v) for v in values])
                except (TypeError, ValueError):
                    data[name] = np.array([str(v) for v in values], dtype=object)
        return data

    def predict(self, X, include_random=True):
        """Fixed-effect prediction, plus BLUPs of known levels if ``include_random``."""
        check_is_fitted(self, "model_")
        n = len(next(iter(_as_columns(X).values())))
        full, names, _ = _design_matrix(self.formula, self._data(X), n, self._design_info)
        Xk = full[:, [names.index(nm) for nm in self.model_.fixed_names]]
        pred = Xk @ self.model_.fixed_effects
        if include_random:
            cols = _as_columns(X)
            for r, name in enumerate(self.model_.effect_names):
                index = {lv: i for i, lv in enumerate(self.model_.levels[r])}
                for i, v in enumerate(cols[name]):
                    j = index.get(str(v))
                    if j is not None:
                        pred[i] += self.model_.blups[r][j]
        return pred

    def correlations(self):
        check_is_fitted(self, "model_")
        return correlation_report(self.model_)
