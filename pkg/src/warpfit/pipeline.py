"""End-to-end orchestration: config, stages, caching, simulation, reports.

Stages run in order smooth -> register -> transform -> decompose -> fit ->
reconstruct. Each stage owns a section of the config; its hash (chained with
the upstream hashes) keys a manifest entry listing the stage's files and
their sha256 checksums. A stage whose hash and files are unchanged is loaded
from disk instead of recomputed.
"""

import csv
import hashlib
import json
import logging
import os
import re
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import fpca, mvlme
from ._validation import cell_midpoints, trapezoid_weights, uniform_grid
from .exceptions import InvalidConfig, InvalidSpec, StageError, UnknownId, WarpfitError
from .prep import CurveSmoother, SampledCurve, load_corpus, read_covariate_file, screen_missing
from .register import RegistrationResult, register_auc, register_class
from .simplex import WarpingFunction, clr_forward, clr_inverse

logger = logging.getLogger(__name__)

STAGES = ("smooth", "register", "transform", "decompose", "fit", "reconstruct")


# ---------------------------------------------------------------------------
# config


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text, cast=str):
    if isinstance(text, (list, tuple)):
        return tuple(cast(v) for v in text)
    return tuple(cast(v.strip()) for v in str(text).split(",") if v.strip())


def _parse_lambda(text):
    if str(text).strip().lower() == "auto":
        return "auto"
    return float(text)


def read_key_values(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in out:
                raise InvalidConfig(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def _coerce(cls, values, path=None):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise InvalidConfig(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        parser = cls._PARSERS.get(key, str)
        try:
            kwargs[key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad value for {key!r}: {exc}") from None
    obj = cls(**kwargs)
    if path is not None:
        obj._resolve_paths(os.path.dirname(os.path.abspath(path)))
    obj.validate()
    return obj


@dataclass
class PipelineConfig:
    """All pipeline settings. Keys of the config file are the field names."""

    curves: str = ""
    covariates: str = ""
    # smooth
    grid_size: int = 16
    bandwidth: float = 0.05
    bandwidth_mode: str = "fixed"
    max_missing_fraction: float = 0.05
    # register
    registration: str = "pairwise"
    lam: object = "auto"
    n_star: int = 30
    class_column: str = "class"
    max_iter: int = 500
    xtol: float = 1e-6
    # decompose
    jnd_amp: float = fpca.AMPLITUDE_JND_HZ
    jnd_phase: float = fpca.PHASE_JND
    metric: str = "peak"
    n_amplitude: int = 0
    n_phase: int = 0
    # fit
    formula: str = "1"
    categorical_columns: tuple = ()
    random_effects: tuple = ("speaker", "sentence")
    scalar_residual: bool = False
    method: str = "REML"
    max_evals: int = 500
    tol: float = 1e-6
    # reconstruct
    reconstruct_effects: tuple = ("speaker", "sentence")
    seed: int = 0

    _PARSERS = {
        "grid_size": int, "bandwidth": float, "max_missing_fraction": float,
        "lam": _parse_lambda, "n_star": int, "max_iter": int, "xtol": float,
        "jnd_amp": float, "jnd_phase": float, "n_amplitude": int, "n_phase": int,
        "categorical_columns": _parse_list, "random_effects": _parse_list,
        "scalar_residual": _parse_bool, "max_evals": int, "tol": float,
        "reconstruct_effects": _parse_list, "seed": int,
    }

    SECTIONS = {
        "smooth": ("curves", "covariates", "grid_size", "bandwidth", "bandwidth_mode",
                   "max_missing_fraction"),
        "register": ("registration", "lam", "n_star", "class_column", "max_iter", "xtol", "seed"),
        "transform": (),
        "decompose": ("jnd_amp", "jnd_phase", "metric", "n_amplitude", "n_phase"),
        "fit": ("formula", "categorical_columns", "random_effects", "scalar_residual", "method",
                "max_evals", "tol", "seed"),
        "reconstruct": ("reconstruct_effects",),
    }

    @classmethod
    def from_dict(cls, values, path=None):
        return _coerce(cls, dict(values), path)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(read_key_values(path), path)

    def _resolve_paths(self, base):
        for key in ("curves", "covariates"):
            value = getattr(self, key)
            if value and not os.path.isabs(value):
                setattr(self, key, os.path.join(base, value))

    def validate(self):
        checks = [
            (4 <= self.grid_size <= 1000, "grid_size must be in [4, 1000]"),
            (0 < self.bandwidth <= 0.5, "bandwidth must be in (0, 0.5]"),
            (self.bandwidth_mode in ("fixed", "cv"), "bandwidth_mode must be fixed or cv"),
            (0 < self.max_missing_fraction <= 1, "max_missing_fraction must be in (0, 1]"),
            (self.registration in ("pairwise", "auc"), "registration must be pairwise or auc"),
            (self.lam == "auto" or float(self.lam) >= 0, "lam must be >= 0 or 'auto'"),
            (self.n_star >= 1, "n_star must be >= 1"),
            (self.max_iter >= 1 and self.xtol > 0, "max_iter and xtol must be positive"),
            (self.jnd_amp > 0 and self.jnd_phase > 0, "JND thresholds must be positive"),
            (self.metric in ("peak", "rms"), "metric must be peak or rms"),
            (self.n_amplitude >= 0 and self.n_phase >= 0, "n_amplitude/n_phase must be >= 0"),
            (self.method in ("REML", "ML"), "method must be REML or ML"),
            (self.max_evals >= 1 and self.tol > 0, "max_evals and tol must be positive"),
            (len(self.random_effects) >= 1, "at least one random effect is required"),
            (set(self.reconstruct_effects) <= set(self.random_effects),
             "reconstruct_effects must be a subset of random_effects"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidConfig(message)

    def to_dict(self):
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    def section(self, stage):
        d = self.to_dict()
        return {key: d[key] for key in self.SECTIONS[stage]}

    def updated(self, **changes):
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return PipelineConfig.from_dict(d)


def _hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def substream_seed(root, name):
    """Integer seed of the named substream of ``root``."""
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# csv / json helpers


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _safe_label(label):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(label))


def write_matrix_csv(path, ids, matrix, prefix):
    matrix = np.atleast_2d(matrix)
    header = ["id"] + [f"{prefix}{j + 1}" for j in range(matrix.shape[1])]
    write_csv(path, header, ([i] + list(row) for i, row in zip(ids, matrix)))


def read_matrix_csv(path):
    header, rows = read_csv(path)
    ids = [r[0] for r in rows]
    values = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
    return ids, values


# ---------------------------------------------------------------------------
# stage state


@dataclass
class PipelineState:
    curves: list = None
    registrations: list = None
    phase: np.ndarray = None
    amplitude_basis: object = None
    phase_basis: object = None
    n_amplitude: int = None
    n_phase: int = None
    scores_amplitude: np.ndarray = None
    scores_phase: np.ndarray = None
    model: object = None
    design: np.ndarray = None

    @property
    def ids(self):
        return [c.id for c in self.curves]


def _stage_smooth(cfg, state, out):
    raw = load_corpus(cfg.curves, cfg.covariates)
    kept = [r for r in raw if screen_missing(r, cfg.max_missing_fraction)]
    logger.info("smooth: %d of %d curves pass the missing-value screen", len(kept), len(raw))
    if len(kept) < 2:
        raise WarpfitError("fewer than two curves survive screening")
    smoother = CurveSmoother(cfg.grid_size, cfg.bandwidth, cfg.bandwidth_mode)
    state.curves = smoother.fit(kept).transform(kept)
    grid = state.curves[0].grid
    write_csv(os.path.join(out, "smoothed.csv"), ["id", "j", "u", "f0"],
              ([c.id, j, grid[j], c.values[j]] for c in state.curves for j in range(grid.size)))
    write_csv(os.path.join(out, "durations.csv"), ["id", "duration"],
              ([c.id, c.duration] for c in state.curves))
    return ["smoothed.csv", "durations.csv"]


def _load_smooth(cfg, state, out):
    covariates = read_covariate_file(cfg.covariates)
    _, rows = read_csv(os.path.join(out, "smoothed.csv"))
    values, grids = {}, {}
    for cid, j, u, f0 in rows:
        values.setdefault(cid, []).append(float(f0))
        grids.setdefault(cid, []).append(float(u))
    _, drows = read_csv(os.path.join(out, "durations.csv"))
    state.curves = [
        SampledCurve(cid, np.array(grids[cid]), np.array(values[cid]), float(d),
                     dict(covariates[cid]))
        for cid, d in drows
    ]


def _stage_register(cfg, state, out):
    curves = state.curves
    if cfg.registration == "auc":
        results = register_auc(curves, cfg.class_column)
    else:
        results = register_class(curves, cfg.lam, cfg.n_star, substream_seed(cfg.seed, "registration"),
                                 cfg.class_column, max_iter=cfg.max_iter, xtol=cfg.xtol)
    state.registrations = results
    files = []
    by_class = {}
    for res in results:
        by_class.setdefault(_safe_label(res.class_label), []).append(res)
    for label in sorted(by_class):
        name = f"registration_{label}.csv"
        rows = []
        for res in by_class[label]:
            for j in range(res.w.size):
                rows.append([res.id, j, res.h.values[j], res.h_inverse.values[j], res.w[j]])
        write_csv(os.path.join(out, name), ["id", "j", "h", "h_inv", "w"], rows)
        files.append(name)
    return files


def _load_register(cfg, state, out, files):
    grid = state.curves[0].grid
    table = {}
    for name in files:
        _, rows = read_csv(os.path.join(out, name))
        for cid, j, h, h_inv, w in rows:
            table.setdefault(cid, ([], [], []))
            for lst, v in zip(table[cid], (h, h_inv, w)):
                lst.append(float(v))
    state.registrations = []
    for c in state.curves:
        h, h_inv, w = (np.array(v) for v in table[c.id])
        state.registrations.append(RegistrationResult(
            id=c.id, h=WarpingFunction(grid, h), h_inverse=WarpingFunction(grid, h_inv),
            w=w, class_label=c.covariates.get(cfg.class_column),
        ))


def _stage_transform(cfg, state, out):
    state.phase = np.vstack([clr_forward(r.h, floor=True) for r in state.registrations])
    write_matrix_csv(os.path.join(out, "phase_clr.csv"), state.ids, state.phase, "s")
    return ["phase_clr.csv"]


def _load_transform(cfg, state, out):
    _, state.phase = read_matrix_csv(os.path.join(out, "phase_clr.csv"))


def _basis_json(basis, n_selected, process, cfg):
    shares, cumulative = fpca.variance_table(basis)
    d = basis.to_dict()
    d.update({
        "process": process,
        "n_selected": int(n_selected),
        "variance_share": shares.tolist(),
        "cumulative_share": cumulative.tolist(),
        "deviations": fpca.component_deviations(basis, cfg.metric).tolist(),
    })
    return d


def _stage_decompose(cfg, state, out):
    W = np.vstack([r.w for r in state.registrations])
    grid, weights = fpca.amplitude_grid(W.shape[1])
    state.amplitude_basis = fpca.fit_fpca(W, grid, weights)
    pgrid, pweights = fpca.phase_grid(state.phase.shape[1])
    state.phase_basis = fpca.fit_fpca(state.phase, pgrid, pweights)
    state.n_amplitude = cfg.n_amplitude or fpca.select_components(
        state.amplitude_basis, "amplitude", cfg.jnd_amp, cfg.metric)
    state.n_phase = cfg.n_phase or fpca.select_components(
        state.phase_basis, "phase", cfg.jnd_phase, cfg.metric)
    state.scores_amplitude = fpca.project(state.amplitude_basis, W, state.n_amplitude)
    state.scores_phase = fpca.project(state.phase_basis, state.phase, state.n_phase)
    write_json(os.path.join(out, "basis_amplitude.json"),
               _basis_json(state.amplitude_basis, state.n_amplitude, "amplitude", cfg))
    write_json(os.path.join(out, "basis_phase.json"),
               _basis_json(state.phase_basis, state.n_phase, "phase", cfg))
    write_matrix_csv(os.path.join(out, "scores_amplitude.csv"), state.ids, state.scores_amplitude, "A")
    write_matrix_csv(os.path.join(out, "scores_phase.csv"), state.ids, state.scores_phase, "A")
    logger.info("decompose: %d amplitude and %d phase components", state.n_amplitude, state.n_phase)
    return ["basis_amplitude.json", "basis_phase.json", "scores_amplitude.csv", "scores_phase.csv"]


def _load_decompose(cfg, state, out):
    amp = read_json(os.path.join(out, "basis_amplitude.json"))
    pha = read_json(os.path.join(out, "basis_phase.json"))
    state.amplitude_basis = fpca.EigenBasis.from_dict(amp)
    state.phase_basis = fpca.EigenBasis.from_dict(pha)
    state.n_amplitude, state.n_phase = amp["n_selected"], pha["n_selected"]
    _, state.scores_amplitude = read_matrix_csv(os.path.join(out, "scores_amplitude.csv"))
    _, state.scores_phase = read_matrix_csv(os.path.join(out, "scores_phase.csv"))


def _covariate_columns(curves):
    keys = sorted({k for c in curves for k in c.covariates})
    return {k: [c.covariates.get(k) for c in curves] for k in keys}


def _stage_fit(cfg, state, out):
    durations = np.array([c.duration for c in state.curves])
    spec, A = mvlme.build_design(
        state.scores_amplitude, state.scores_phase, durations, _covariate_columns(state.curves),
        cfg.formula, cfg.random_effects, cfg.categorical_columns,
    )
    model = mvlme.fit(spec, A, cfg.scalar_residual, cfg.method, cfg.max_evals, cfg.tol,
                      seed=substream_seed(cfg.seed, "optimizer"))
    state.model, state.design = model, spec.X
    write_json(os.path.join(out, "model.json"), model.to_dict())
    write_matrix_csv(os.path.join(out, "design.csv"), state.ids, spec.X, "x")
    rows = []
    for i, name in enumerate(model.fixed_names):
        for c, resp in enumerate(model.response_names):
            rows.append([name, resp, model.fixed_effects[i, c], model.fixed_se[i, c]])
    write_csv(os.path.join(out, "fixed_effects.csv"), ["term", "response", "estimate", "se"], rows)
    labels, sds = model.sd_table()
    write_csv(os.path.join(out, "random_effect_sds.csv"), ["effect"] + model.response_names,
              ([lab] + list(row) for lab, row in zip(labels, sds)))
    files = ["model.json", "design.csv", "fixed_effects.csv", "random_effect_sds.csv"]
    for name, P in mvlme.correlation_report(model).items():
        fname = f"correlation_{_safe_label(name)}.csv"
        write_csv(os.path.join(out, fname), [""] + model.response_names,
                  ([resp] + list(row) for resp, row in zip(model.response_names, P)))
        files.append(fname)
    return files


def _load_fit(cfg, state, out):
    state.model = mvlme.FittedModel.from_dict(read_json(os.path.join(out, "model.json")))
    _, state.design = read_matrix_csv(os.path.join(out, "design.csv"))


def predicted_scores(model, design, curves, effects=None):
    """``X B`` plus the BLUPs of ``effects`` (all by default), one row per curve."""
    pred = np.asarray(design, dtype=float) @ model.fixed_effects
    effects = model.effect_names if effects is None else effects
    for r, name in enumerate(model.effect_names):
        if name not in effects:
            continue
        index = {lv: i for i, lv in enumerate(model.levels[r])}
        for i, c in enumerate(curves):
            j = index.get(str(c.covariates.get(name)))
            if j is not None:
                pred[i] = pred[i] + model.blups[r][j]
    return pred


def reconstruct_report(model, amplitude, phase, curves, design, ids=None, effects=None):
    """Observed versus model-estimated trajectories on physical time.

    The estimate for a curve is ``fpca.reconstruct`` applied to its fixed-effect
    prediction plus the BLUPs of ``effects``. Both trajectories are evaluated
    at the observed curve's grid times ``t = duration * u / 100`` seconds; the
    estimated curve is held constant beyond its own (estimated) span.

    Returns
    -------
    list of (id, t, observed, estimated)
    """
    by_id = {c.id: i for i, c in enumerate(curves)}
    if ids is None:
        ids = [c.id for c in curves]
    unknown = [i for i in ids if i not in by_id]
    if unknown:
        raise UnknownId(f"unknown curve id(s): {', '.join(map(str, unknown))}")
    pred = predicted_scores(model, design, curves, effects)
    mw = model.response_names.index("sFPC1") if "sFPC1" in model.response_names else len(
        [n for n in model.response_names if n.startswith("wFPC")])
    ms = len(model.response_names) - 1 - mw
    rows = []
    for cid in ids:
        i = by_id[cid]
        c = curves[i]
        a = pred[i]
        duration = max(float(a[-1]), 1e-9)
        t_est, est = fpca.reconstruct(amplitude, a[:mw], phase, a[mw:mw + ms], duration)
        t_obs = c.duration * c.grid
        est_at = np.interp(t_obs, t_est, est)
        for t, y, e in zip(t_obs, c.values, est_at):
            rows.append((cid, t / 100.0, float(y), float(e)))
    return rows


def _stage_reconstruct(cfg, state, out):
    rows = reconstruct_report(state.model, state.amplitude_basis, state.phase_basis, state.curves,
                              state.design, effects=cfg.reconstruct_effects)
    write_csv(os.path.join(out, "reconstruction.csv"), ["id", "t", "observed", "estimated"], rows)
    return ["reconstruction.csv"]


_RUNNERS = {
    "smooth": (_stage_smooth, lambda cfg, st, out, files: _load_smooth(cfg, st, out)),
    "register": (_stage_register, _load_register),
    "transform": (_stage_transform, lambda cfg, st, out, files: _load_transform(cfg, st, out)),
    "decompose": (_stage_decompose, lambda cfg, st, out, files: _load_decompose(cfg, st, out)),
    "fit": (_stage_fit, lambda cfg, st, out, files: _load_fit(cfg, st, out)),
    "reconstruct": (_stage_reconstruct, None),
}


@dataclass
class RunResult:
    out: str
    manifest: dict
    state: PipelineState
    executed: list = field(default_factory=list)
    cached: list = field(default_factory=list)


def stage_hashes(cfg):
    """Chained hash per stage: its config section plus everything upstream."""
    inputs = {}
    for key in ("curves", "covariates"):
        path = getattr(cfg, key)
        inputs[key] = _file_sha256(path) if path and os.path.exists(path) else None
    out, upstream = {}, _hash(inputs)
    for stage in STAGES:
        upstream = _hash({"stage": stage, "section": cfg.section(stage), "upstream": upstream})
        out[stage] = upstream
    return out


def _stage_cached(entry, expected_hash, out):
    if not entry or entry.get("hash") != expected_hash:
        return False
    for name, digest in entry.get("files", {}).items():
        path = os.path.join(out, name)
        if not os.path.exists(path) or _file_sha256(path) != digest:
            return False
    return True


def run(config, out, until="reconstruct", use_cache=True):
    """Run the pipeline into ``out`` up to and including stage ``until``.

    Returns
    -------
    RunResult
        Manifest, in-memory state and which stages ran or were loaded.

    Raises
    ------
    StageError
        Wraps any failure with the stage name; outputs of completed stages
        and the manifest describing them are kept.
    """
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_dict(config)
    if until not in STAGES:
        raise InvalidConfig(f"unknown stage {until!r}")
    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, "manifest.json")
    previous = {}
    if use_cache and os.path.exists(manifest_path):
        try:
            previous = read_json(manifest_path).get("stages", {})
        except (OSError, ValueError):
            previous = {}
    hashes = stage_hashes(cfg)
    manifest = {"config_hash": _hash(cfg.to_dict()), "config": cfg.to_dict(), "stages": {}}
    state = PipelineState()
    result = RunResult(out=out, manifest=manifest, state=state)
    reuse = use_cache
    for stage in STAGES[: STAGES.index(until) + 1]:
        runner, loader = _RUNNERS[stage]
        entry = previous.get(stage)
        try:
            if reuse and loader is not None and _stage_cached(entry, hashes[stage], out):
                loader(cfg, state, out, list(entry["files"]))
                files = list(entry["files"])
                result.cached.append(stage)
                logger.info("%s: up to date, loaded from %s", stage, out)
            else:
                reuse = False
                files = runner(cfg, state, out)
                result.executed.append(stage)
        except StageError:
            raise
        except Exception as exc:
            write_json(manifest_path, manifest)
            raise StageError(stage, exc) from exc
        manifest["stages"][stage] = {
            "hash": hashes[stage],
            "files": {name: _file_sha256(os.path.join(out, name)) for name in sorted(files)},
        }
    # keep entries of later stages from earlier runs only if still valid
    for stage in STAGES[STAGES.index(until) + 1:]:
        if _stage_cached(previous.get(stage), hashes[stage], out) and reuse:
            manifest["stages"][stage] = previous[stage]
    write_json(manifest_path, manifest)
    return result


# ---------------------------------------------------------------------------
# simulation


def amplitude_modes(grid, n_modes):
    """Orthonormal (trapezoid inner product) cosine modes on ``grid``."""
    weights = trapezoid_weights(grid)
    raw = np.vstack([np.cos((k + 1) * np.pi * grid) for k in range(n_modes)])
    return _orthonormalize(raw, weights)


def phase_modes(m, n_modes):
    """Orthonormal zero-sum modes on ``m`` cell midpoints (midpoint-rule inner product)."""
    mid = cell_midpoints(m)
    raw = np.vstack([np.cos((k + 1) * np.pi * mid) for k in range(n_modes)])
    raw = raw - raw.mean(axis=1, keepdims=True)
    return _orthonormalize(raw, np.full(m, 1.0 / m))


def _orthonormalize(rows, weights):
    root = np.sqrt(weights)
    q, r = np.linalg.qr((rows * root).T)
    q = q * np.sign(np.diag(r))
    return (q / root[:, None]).T


@dataclass
class SyntheticSpec:
    """Generative settings of a synthetic corpus.

    Score covariances: ``Sigma_r = share_r * D C D`` for the speaker and
    sentence effects, ``Sigma_E = residual_share * D^2`` with ``D`` the
    component sds and ``C`` the masked correlation matrix built from the
    three cross-process correlations.
    """

    n_speakers: int = 5
    n_sentences: int = 40
    n_classes: int = 2
    grid_size: int = 16
    n_readings: int = 40
    mean_level: float = 220.0
    amplitude_sd: tuple = (24.0, 16.0, 12.0, 10.0)
    phase_sd: tuple = (0.25, 0.18, 0.12, 0.09)
    duration_mean: float = 25.0
    duration_sd: float = 3.0
    speaker_share: float = 0.3
    sentence_share: float = 0.3
    rho_amplitude_phase: float = 0.0
    rho_amplitude_duration: float = 0.2
    rho_phase_duration: float = 0.3
    covariate_effect: float = 0.25
    noise_sd: float = 1.0

    _PARSERS = {
        "n_speakers": int, "n_sentences": int, "n_classes": int, "grid_size": int,
        "n_readings": int, "mean_level": float,
        "amplitude_sd": lambda v: _parse_list(v, float), "phase_sd": lambda v: _parse_list(v, float),
        "duration_mean": float, "duration_sd": float, "speaker_share": float,
        "sentence_share": float, "rho_amplitude_phase": float, "rho_amplitude_duration": float,
        "rho_phase_duration": float, "covariate_effect": float, "noise_sd": float,
    }

    @classmethod
    def from_dict(cls, values):
        try:
            return _coerce(cls, dict(values))
        except InvalidConfig as exc:
            raise InvalidSpec(str(exc)) from None

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(read_key_values(path))

    def _resolve_paths(self, base):
        pass

    @property
    def p(self):
        return len(self.amplitude_sd) + len(self.phase_sd) + 1

    def component_sd(self):
        return np.array(list(self.amplitude_sd) + list(self.phase_sd) + [self.duration_sd])

    def correlation(self):
        mw, ms = len(self.amplitude_sd), len(self.phase_sd)
        C = np.eye(self.p)
        C[:mw, mw:mw + ms] = C[mw:mw + ms, :mw] = self.rho_amplitude_phase
        C[:mw, -1] = C[-1, :mw] = self.rho_amplitude_duration
        C[mw:mw + ms, -1] = C[-1, mw:mw + ms] = self.rho_phase_duration
        return C

    def covariances(self):
        d = self.component_sd()
        base = self.correlation() * np.outer(d, d)
        residual = 1.0 - self.speaker_share - self.sentence_share
        return (self.speaker_share * base, self.sentence_share * base,
                residual * np.diag(d ** 2))

    def true_B(self):
        """Rows: intercept, ``x`` (numeric covariate)."""
        B = np.zeros((2, self.p))
        B[0, -1] = self.duration_mean
        B[1] = self.covariate_effect * self.component_sd()
        return B

    def validate(self):
        checks = [
            (self.n_speakers >= 2 and self.n_sentences >= 2, "need >= 2 speakers and sentences"),
            (self.n_classes >= 1, "n_classes must be >= 1"),
            (self.grid_size >= 4 and self.n_readings >= 4, "grid_size and n_readings must be >= 4"),
            (len(self.amplitude_sd) < self.grid_size, "too many amplitude modes for the grid"),
            (len(self.phase_sd) < self.grid_size - 1, "too many phase modes for the grid"),
            (all(v >= 0 for v in self.component_sd()), "sds must be non-negative"),
            (self.duration_mean > 0, "duration_mean must be positive"),
            (self.noise_sd >= 0, "noise_sd must be non-negative"),
            (self.speaker_share >= 0 and self.sentence_share >= 0
             and self.speaker_share + self.sentence_share <= 1, "variance shares must lie in [0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidSpec(message)
        if np.linalg.eigvalsh(self.correlation())[0] < -1e-12:
            raise InvalidSpec("planted correlation matrix is not positive semidefinite")

    def to_dict(self):
        d = asdict(self)
        d["amplitude_sd"] = list(self.amplitude_sd)
        d["phase_sd"] = list(self.phase_sd)
        return d


def _draw(rng, cov, n):
    # square root via eigh so that PSD (singular) covariances are allowed
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return rng.standard_normal((n, cov.shape[0])) @ root.T


def simulate(spec, seed, out=None):
    """Draw a synthetic corpus from the generative model.

    Returns a dict with the corpus rows and the ground truth; with ``out``
    also writes ``curves.csv``, ``covariates.csv`` and ``truth.json``.
    """
    spec = spec if isinstance(spec, SyntheticSpec) else SyntheticSpec.from_dict(spec)
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(b"simulation"),)))
    grid = uniform_grid(spec.grid_size)
    m = spec.grid_size - 1
    mw, ms = len(spec.amplitude_sd), len(spec.phase_sd)
    phi = amplitude_modes(grid, mw)
    psi = phase_modes(m, ms)
    mean_w = spec.mean_level + 45.0 * np.sin(2.0 * np.pi * grid) + 30.0 * np.cos(np.pi * grid)
    S1, S2, SE = spec.covariances()
    B = spec.true_B()
    gamma1 = _draw(rng, S1, spec.n_speakers)
    gamma2 = _draw(rng, S2, spec.n_sentences)
    n = spec.n_speakers * spec.n_sentences
    speakers = np.repeat(np.arange(spec.n_speakers), spec.n_sentences)
    sentences = np.tile(np.arange(spec.n_sentences), spec.n_speakers)
    x = rng.standard_normal(n)
    X = np.column_stack([np.ones(n), x])
    E = _draw(rng, SE, n)
    A = X @ B + gamma1[speakers] + gamma2[sentences] + E
    durations = np.maximum(A[:, -1], 1.0)
    ids = [f"c{i:05d}" for i in range(n)]
    curve_rows, covariate_rows, warps = [], [], []
    for i in range(n):
        w = mean_w + A[i, :mw] @ phi
        s = A[i, mw:mw + ms] @ psi
        h = clr_inverse(s, grid)
        u = np.linspace(0.0, 1.0, spec.n_readings)
        # y(t) = w(h^{-1}(u)): interpolate w along h^{-1}, the swapped knots of h
        y = np.interp(np.interp(u, h.values, h.grid), grid, w)
        y = y + spec.noise_sd * rng.standard_normal(u.size)
        span = durations[i] / 100.0
        for t, v in zip(u * span, y):
            curve_rows.append((ids[i], t, v))
        covariate_rows.append((ids[i], f"S{speakers[i] + 1:02d}", f"T{sentences[i] + 1:03d}",
                               f"K{sentences[i] % spec.n_classes + 1}", x[i]))
        warps.append(h.values.tolist())
    truth = {
        "spec": spec.to_dict(),
        "seed": int(seed),
        "grid": grid.tolist(),
        "mean_amplitude": mean_w.tolist(),
        "amplitude_modes": phi.tolist(),
        "phase_modes": psi.tolist(),
        "sigma_speaker": S1.tolist(),
        "sigma_sentence": S2.tolist(),
        "sigma_residual": SE.tolist(),
        "B": B.tolist(),
        "fixed_names": ["Intercept", "x"],
        "scores": A.tolist(),
        "speaker_effects": gamma1.tolist(),
        "sentence_effects": gamma2.tolist(),
        "residual_scores": E.tolist(),
        "durations": durations.tolist(),
        "warps": warps,
        "ids": ids,
    }
    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_csv(os.path.join(out, "curves.csv"), ["id", "t", "f0"], curve_rows)
        write_csv(os.path.join(out, "covariates.csv"), ["id", "speaker", "sentence", "class", "x"],
                  covariate_rows)
        write_json(os.path.join(out, "truth.json"), truth)
    return {"curves": curve_rows, "covariates": covariate_rows, "truth": truth}
