"""Command line entry point.

File formats:
  loss file      headerless, one decimal loss per line (estimate, fit-gmm)
  matrix file    CSV with one header row, one scenario per row (dro, tune-radius, insurance --data)
  instance file  JSON with keys M, alpha0, alphas, gammas ([shape, scale] pairs), r, N, seed

Exit codes: 0 success, 1 numerical failure, 2 usage or input error, 3 output not writable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .cv import BiasMethod, CvConfig, tune_radius, write_cv_csv
from .distributions import derive_seed, gmm_fit_em
from .dro import (AmbiguityBall, NewsvendorSpec, dro_solve_linear, dro_solve_newsvendor, dro_solve_regression)
from .errors import DomainError, InfeasibleDualError, InputError, NumericError, UnsupportedError
from .estimators import EstimatorConfig, EstimatorKind, estimate
from .experiments import EXPERIMENTS, ExperimentConfig, run, run_insurance_instance
from .fitting import RiskMatchConfig, fit_gmm_evt, fit_gmm_risk_match
from .insurance import InsuranceInstance, MarketData, generate_market, result_header, solve_pricing

EXIT_NUMERIC, EXIT_USAGE, EXIT_IO = 1, 2, 3


def _read_losses(path) -> np.ndarray:
    try:
        return np.loadtxt(path, ndmin=1, dtype=float)
    except ValueError as e:
        raise InputError(f"{path}: expected one decimal number per line ({e})") from None
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


def _read_matrix(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=float)
    except ValueError as e:
        raise InputError(f"{path}: expected a headered CSV of numbers ({e})") from None
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


def _radii(text: str) -> tuple:
    """``a:b:n`` for n evenly spaced radii, or a comma-separated list."""
    if ":" in text:
        a, b, n = text.split(":")
        return tuple(np.linspace(float(a), float(b), int(n)))
    return tuple(float(v) for v in text.split(","))


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _bound(v, d):
    return None if v is None else np.full(d, v)


def cmd_estimate(a) -> None:
    x = _read_losses(a.losses)
    cfg = EstimatorConfig(reps=a.reps, components=a.components,
                          risk_match=RiskMatchConfig(max_iter=a.max_iter, components=a.components))
    lines = []
    for i, kind in enumerate(EstimatorKind):
        if kind is EstimatorKind.LOOCV and (a.alpha == 0 or x.size < 2):
            continue
        lines.append(f"{kind.value}\t{estimate(kind, x, a.alpha, cfg, derive_seed(a.seed, i)):.10g}\n")
    _emit("".join(lines), a.out)


def cmd_fit_gmm(a) -> None:
    x = _read_losses(a.losses)
    rng = np.random.default_rng(a.seed)
    if a.method == "em":
        q = gmm_fit_em(x, a.components, seed=rng)
    elif a.method == "match":
        cfg = RiskMatchConfig(bins=a.bins, max_iter=a.max_iter, components=a.components)
        q = fit_gmm_risk_match(x, a.alpha, cfg, seed=rng, trace_path=a.trace)
    else:
        q = fit_gmm_evt(x, a.bins)
    _emit(json.dumps(q.to_dict(), indent=2) + "\n", a.out)


def cmd_dro(a) -> None:
    ball = AmbiguityBall(a.eps, a.norm)
    m = _read_matrix(a.data)
    if a.problem == "linear":
        z, v = dro_solve_linear(m, a.alpha, ball, _bound(a.lower, m.shape[1]), _bound(a.upper, m.shape[1]),
                                trace_path=a.trace)
        out = {"z": z.tolist(), "value": v}
    elif a.problem == "newsvendor":
        z, v = dro_solve_newsvendor(NewsvendorSpec(a.w, a.b, a.h), m[:, 0], a.alpha, a.eps)
        out = {"z": z, "value": v}
    else:
        z, v = dro_solve_regression(m[:, :-1], m[:, -1], a.alpha, ball, trace_path=a.trace)
        out = {"z": z.tolist(), "value": v}
    _emit(json.dumps(out) + "\n", a.out)


def cmd_tune_radius(a) -> None:
    m = _read_matrix(a.data)
    d = m.shape[1]
    lo, hi = _bound(a.lower, d), _bound(a.upper, d)
    cfg = CvConfig(folds=a.folds, radii=_radii(a.radii), reps=a.reps, method=a.method, seed=a.seed,
                   risk_match=RiskMatchConfig(max_iter=a.max_iter))

    def solver(train, eps):
        return dro_solve_linear(train, a.alpha, AmbiguityBall(eps, a.norm), lo, hi)[0]

    res = tune_radius(m, cfg, solver, lambda z, rows: rows @ z, a.alpha)
    if a.out:
        write_cv_csv(res, a.out)
    print(f"epsilon_star\t{res.epsilon_star:.10g}")


def cmd_insurance(a) -> None:
    try:
        inst = InsuranceInstance.from_json(a.config) if a.config else InsuranceInstance()
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read instance file {a.config}: {e}") from None
    if a.seed is not None:
        inst = InsuranceInstance(**{**inst.__dict__, "seed": a.seed})
    if a.eps is not None:
        data = MarketData(_read_matrix(a.data)) if a.data else generate_market(inst, seed=inst.seed)
        pol = solve_pricing(data, inst, a.eps, a.norm)
        out = {"coverage": pol.coverage.tolist(), "premium": pol.premium.tolist(), "objective": pol.objective}
        _emit(json.dumps(out) + "\n", a.out)
        return
    radii = _radii(a.radii)
    res = run_insurance_instance(inst, derive_seed(inst.seed, 0), radii, a.folds, a.reps, a.max_iter,
                                 a.test_size, seed_label=inst.seed)
    lines = [",".join(result_header(inst.m))] + [",".join(map(str, r)) for r in res.results]
    _emit("\n".join(lines) + "\n", a.out)


def cmd_experiment(a) -> None:
    cfg = ExperimentConfig(a.name, reps=a.reps, seed=a.seed, scale=a.scale, out_dir=a.out or "results",
                           workers=a.workers, boot_reps=a.boot_reps, match_iters=a.max_iter,
                           sizes=tuple(float(s) if a.name == "insurance_r_sweep" else int(float(s))
                                       for s in a.sizes.split(",")) if a.sizes else None,
                           test_size=a.test_size)
    for p in run(cfg):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entrisk", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, alpha=True):
        if alpha:
            sp.add_argument("--alpha", type=float, default=1.0, help="risk aversion (default 1)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path (default stdout)")

    s = sub.add_parser("estimate", help="print every estimator of the entropic risk of a loss file")
    s.add_argument("losses")
    common(s)
    s.add_argument("--reps", type=int, default=500, help="bootstrap repetitions")
    s.add_argument("--components", type=int, default=2)
    s.add_argument("--max-iter", type=int, default=3000, help="risk-matching iterations")
    s.set_defaults(fn=cmd_estimate)

    s = sub.add_parser("fit-gmm", help="fit a Gaussian mixture to a loss file and print it as JSON")
    s.add_argument("losses")
    s.add_argument("--method", choices=("em", "match", "evt"), default="em")
    common(s)
    s.add_argument("--components", type=int, default=2)
    s.add_argument("--bins", type=int)
    s.add_argument("--max-iter", type=int, default=3000)
    s.add_argument("--trace", help="CSV trace of the risk-matching iterations")
    s.set_defaults(fn=cmd_fit_gmm)

    s = sub.add_parser("dro", help="solve a worst-case entropic risk problem on a scenario matrix")
    s.add_argument("problem", choices=("linear", "newsvendor", "regression"))
    s.add_argument("data", help="headered CSV; regression takes the last column as the label")
    common(s)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--norm", choices=("l1", "l2", "linf"), default="l2")
    s.add_argument("--lower", type=float, help="box lower bound (linear)")
    s.add_argument("--upper", type=float, help="box upper bound (linear)")
    s.add_argument("--w", type=float, default=1.0, help="newsvendor unit cost")
    s.add_argument("--b", type=float, default=2.0, help="newsvendor backorder cost")
    s.add_argument("--h", type=float, default=0.5, help="newsvendor holding cost")
    s.add_argument("--trace", help="CSV solver trace")
    s.set_defaults(fn=cmd_dro)

    s = sub.add_parser("tune-radius", help="K-fold radius selection for the linear problem")
    s.add_argument("data")
    common(s)
    s.add_argument("--norm", choices=("l1", "l2", "linf"), default="l2")
    s.add_argument("--radii", default="0:6:20", help="a:b:n or comma list")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--method", choices=[m.value for m in BiasMethod], default="none")
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--lower", type=float, default=0.0)
    s.add_argument("--upper", type=float, default=1.0)
    s.set_defaults(fn=cmd_tune_radius)

    s = sub.add_parser("insurance", help="price policies for one instance")
    s.add_argument("--config", help="JSON instance file")
    s.add_argument("--data", help="headered CSV of joint losses (with --eps)")
    s.add_argument("--eps", type=float, help="solve at this radius instead of calibrating")
    s.add_argument("--norm", choices=("l1", "l2", "linf"), default="l2")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--radii", default="0:6:20")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--test-size", type=int, default=100_000)
    s.set_defaults(fn=cmd_insurance)

    s = sub.add_parser("experiment", help="run one batch experiment and write its CSV tables")
    s.add_argument("name", choices=EXPERIMENTS)
    s.add_argument("--reps", type=int, help="repetitions (default 20, or the full count times --scale)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", type=float)
    s.add_argument("--out", help="output directory (default results)")
    s.add_argument("--workers", type=int, help="worker processes (default $ENTRISK_WORKERS or 1)")
    s.add_argument("--boot-reps", type=int, default=500)
    s.add_argument("--max-iter", type=int, default=1000, help="risk-matching iterations")
    s.add_argument("--sizes", help="comma list overriding the sample-size (or r) grid")
    s.add_argument("--test-size", type=int)
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (InputError, DomainError, InfeasibleDualError, UnsupportedError) as e:
        print(f"entrisk: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"entrisk: cannot write output: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"entrisk: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
