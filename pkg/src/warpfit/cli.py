"""Command-line interface: ``warpfit <stage> --config FILE --out DIR --seed N``."""

import argparse
import json
import logging
import sys

import numpy as np

from . import pipeline
from .exceptions import WarpfitError
from .simplex import clr_forward, clr_inverse

logger = logging.getLogger("warpfit")


def _common(parser, config_required=True):
    parser.add_argument("--config", required=config_required, help="flat key = value config file")
    parser.add_argument("--out", required=True, help="artifacts directory")
    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    parser.add_argument("--no-cache", action="store_true", help="recompute every stage")


def build_parser():
    parser = argparse.ArgumentParser(prog="warpfit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("run", "smooth"):
        _common(sub.add_parser(name, help=f"run the pipeline through '{name}'"))

    p = sub.add_parser("register", help="run the pipeline through registration")
    _common(p)
    p.add_argument("--method", choices=("pairwise", "auc"))
    p.add_argument("--lambda", dest="lam", help="warp penalty, number or 'auto'")
    p.add_argument("--nstar", type=int)
    p.add_argument("--class-column")

    p = sub.add_parser("transform", help="CLR stage, or convert CSV vectors with clr/clr-inverse")
    p.add_argument("direction", nargs="?", choices=("clr", "clr-inverse"))
    p.add_argument("--config")
    p.add_argument("--input", help="CSV of vectors (one per row, optional leading id column)")
    p.add_argument("--out", required=True, help="artifacts directory, or output CSV with a direction")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-cache", action="store_true")

    p = sub.add_parser("decompose", help="run the pipeline through FPCA")
    _common(p)
    p.add_argument("--process", choices=("amplitude", "phase"),
                   help="print only this process's variance table")
    p.add_argument("--jnd-amp", type=float)
    p.add_argument("--jnd-phase", type=float)
    p.add_argument("--metric", choices=("peak", "rms"))

    p = sub.add_parser("fit", help="run the pipeline through the mixed model")
    _common(p)
    p.add_argument("--formula", help="file holding the fixed-effect formula")
    p.add_argument("--scalar-residual", action="store_true", default=None)
    p.add_argument("--max-evals", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("reconstruct", help="run the full pipeline and write trajectories")
    _common(p)
    p.add_argument("--ids", help="comma-separated curve ids (default all)")
    p.add_argument("--effects", help="random effects whose BLUPs enter the estimate")

    p = sub.add_parser("simulate", help="write a synthetic corpus and its ground truth")
    p.add_argument("--config", help="synthetic-corpus settings (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args, **overrides):
    cfg = pipeline.PipelineConfig.from_file(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.updated(**overrides)


def _run(args, until, **overrides):
    cfg = _config(args, **overrides)
    result = pipeline.run(cfg, args.out, until=until, use_cache=not args.no_cache)
    print(f"{until}: ran {result.executed or 'nothing'}; cached {result.cached or 'nothing'}")
    return result


def _read_vectors(path):
    ids, rows = [], []
    with open(path) as fh:
        for line in fh:
            cells = [c.strip() for c in line.strip().split(",") if c.strip() != ""]
            if not cells:
                continue
            try:
                rows.append([float(c) for c in cells])
                ids.append(str(len(ids)))
            except ValueError:
                try:
                    rows.append([float(c) for c in cells[1:]])
                    ids.append(cells[0])
                except ValueError:
                    continue  # header
    return ids, rows


def _transform_vectors(args):
    if not args.input:
        raise SystemExit("transform clr|clr-inverse needs --input")
    ids, rows = _read_vectors(args.input)
    out = []
    for row in rows:
        if args.direction == "clr":
            out.append(clr_forward(np.array(row)))
        else:
            out.append(clr_inverse(np.array(row)).values)
    width = max((len(v) for v in out), default=0)
    prefix = "s" if args.direction == "clr" else "h"
    pipeline.write_csv(args.out, ["id"] + [f"{prefix}{j + 1}" for j in range(width)],
                       ([i] + list(v) for i, v in zip(ids, out)))


def _print_variance(result, process):
    state = result.state
    for name, basis, n in (("amplitude", state.amplitude_basis, state.n_amplitude),
                           ("phase", state.phase_basis, state.n_phase)):
        if process and process != name:
            continue
        shares, cumulative = pipeline.fpca.variance_table(basis)
        print(f"{name}: {n} component(s) selected")
        for j in range(min(len(shares), max(n, 5))):
            print(f"  {j + 1:2d}  {shares[j]:7.2f}%  {cumulative[j]:7.2f}%")


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            spec = (pipeline.SyntheticSpec.from_file(args.config) if args.config
                    else pipeline.SyntheticSpec())
            data = pipeline.simulate(spec, args.seed, args.out)
            print(f"simulate: {len(data['covariates'])} curves written to {args.out}")
        elif args.command in ("run", "smooth"):
            _run(args, "reconstruct" if args.command == "run" else "smooth")
        elif args.command == "register":
            _run(args, "register", registration=args.method, lam=args.lam, n_star=args.nstar,
                 class_column=args.class_column)
        elif args.command == "transform":
            if args.direction:
                _transform_vectors(args)
            else:
                if not args.config:
                    raise SystemExit("transform needs --config (or a clr|clr-inverse direction)")
                _run(args, "transform")
        elif args.command == "decompose":
            result = _run(args, "decompose", jnd_amp=args.jnd_amp, jnd_phase=args.jnd_phase,
                          metric=args.metric)
            _print_variance(result, args.process)
        elif args.command == "fit":
            formula = None
            if args.formula:
                with open(args.formula) as fh:
                    formula = " ".join(fh.read().split())
            result = _run(args, "fit", formula=formula, scalar_residual=args.scalar_residual,
                          max_evals=args.max_evals, tol=args.tol)
            model = result.state.model
            print(json.dumps({"deviance": model.deviance, "converged": model.converged,
                              "components": model.response_names}))
        elif args.command == "reconstruct":
            effects = pipeline._parse_list(args.effects) if args.effects is not None else None
            result = _run(args, "reconstruct", reconstruct_effects=effects)
            if args.ids:
                st = result.state
                ids = pipeline._parse_list(args.ids)
                rows = pipeline.reconstruct_report(
                    st.model, st.amplitude_basis, st.phase_basis, st.curves, st.design, ids,
                    result.manifest["config"]["reconstruct_effects"])
                path = f"{args.out}/reconstruction_selected.csv"
                pipeline.write_csv(path, ["id", "t", "observed", "estimated"], rows)
                print(f"reconstruct: {len(ids)} curve(s) written to {path}")
    except WarpfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
