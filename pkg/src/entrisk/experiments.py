"""Batch experiments that emit their results as CSV tables.

Every repetition draws its randomness from a seed derived from the root seed
and the repetition index, so results do not depend on how many worker
processes share the work.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .cv import BiasMethod, CvConfig, cv_sweep, select_radius
from .distributions import GammaSpec, Gmm, derive_seed, gmm_sample, gmm_sample_matrix
from .errors import InputError
from .estimators import EstimatorConfig, EstimatorKind, bias_correct, estimate, fit_for
from .fitting import RiskMatchConfig
from .insurance import (HETERO_MARGINALS, InsuranceInstance, MarketData, generate_market, out_of_sample_risk,
                        policy_losses, premium_per_coverage, result_header, result_row, solve_pricing)
from .risk import empirical_risk, empirical_risk_rows, gamma_risk, gmm_risk, influence_function

EXPERIMENTS = ("fig1", "example2", "example3", "insurance_n_sweep", "insurance_r_sweep", "insurance_hetero",
               "epsilon_curves")
WORKERS_ENV = "ENTRISK_WORKERS"
DESK_REPS = 20
DESK_TEST_SIZE = 100_000

FIG1_GAMMA = GammaSpec(10.0, 0.24)
FIG1_ALPHAS = (0.0, 0.5, 1.0, 1.5, 2.0)
EXAMPLE2_GMM = Gmm((0.7, 0.3), (0.5, 1.0), (2.0, 1.0))
EXAMPLE2_ALPHA = 2.0
PROJECT_GMM = Gmm((0.16, 0.28, 0.23, 0.20, 0.13), (-19.5, -19.0, -18.5, -18.0, -17.5),
                  (4 / 25, 1 / 4, 4 / 9, 1.0, 4.0))
PROJECT_SCALES = (0.4, 0.6, 0.8)
PROJECT_ALPHA = 3.0

# (full repetitions, desk sizes, full sizes)
_PLAN = {
    "fig1": (10_000, (50, 100, 200, 500), (50, 100, 200, 500)),
    "example2": (100, (1_000, 10_000), (1_000, 10_000, 100_000, 500_000)),
    "example3": (1_000, (10_000,), (10_000,)),
    "insurance_n_sweep": (100, (500, 1_000), (500, 1_000, 5_000, 10_000)),
    "insurance_r_sweep": (100, (0.0, 0.25, 0.5, 0.75, 1.0), (0.0, 0.25, 0.5, 0.75, 1.0)),
    "insurance_hetero": (100, (500, 1_000), (500, 1_000, 5_000, 10_000)),
    "epsilon_curves": (100, (1_000,), (500, 1_000, 5_000, 10_000)),
}
FULL_TEST_SIZE = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    """What to run and at what scale.

    ``reps=None`` and ``scale=None`` give the desk profile. A ``scale`` multiplies
    the full-size repetition counts and test-set size and switches to the
    full size grid. ``sizes`` overrides the grid (sample sizes, or
    correlations for the r sweep).
    """

    name: str
    reps: int | None = None
    seed: int = 0
    scale: float | None = None
    out_dir: str = "results"
    workers: int | None = None
    boot_reps: int = 500
    match_iters: int = 1000
    sizes: tuple | None = None
    test_size: int | None = None
    radii: tuple = tuple(np.linspace(0.0, 6.0, 20))
    folds: int = 5

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise InputError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.reps is not None and self.reps < 1:
            raise InputError("repetitions must be >= 1")
        if self.scale is not None and not self.scale > 0:
            raise InputError("scale must be positive")
        if self.boot_reps < 1 or self.match_iters < 1:
            raise InputError("boot_reps and match_iters must be >= 1")
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(self.sizes))
        object.__setattr__(self, "radii", tuple(float(e) for e in self.radii))

    @property
    def repetitions(self) -> int:
        if self.reps is not None:
            return self.reps
        if self.scale is None:
            return DESK_REPS
        return max(1, round(_PLAN[self.name][0] * self.scale))

    @property
    def grid(self) -> tuple:
        if self.sizes is not None:
            return self.sizes
        return _PLAN[self.name][1 if self.scale is None else 2]

    @property
    def test_rows(self) -> int:
        if self.test_size is not None:
            return self.test_size
        return DESK_TEST_SIZE if self.scale is None else max(1, round(FULL_TEST_SIZE * self.scale))

    def risk_match(self) -> RiskMatchConfig:
        return RiskMatchConfig(max_iter=self.match_iters)

    def worker_count(self) -> int:
        if self.workers is not None:
            return max(1, self.workers)
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _write_table(path: Path, table: Table) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.header)
        writer.writerows([[_fmt(v) for v in row] for row in table.rows])


def _stats(values) -> list[float]:
    v = np.asarray(values, dtype=float)
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    return [q25, q50, q75, float(v.mean())]


STAT_COLUMNS = ["q25", "q50", "q75", "mean"]


def parallel_map(fn: Callable, tasks: Sequence, workers: int) -> list:
    """Ordered map; results are identical for any worker count."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --- fig1: underestimation of the empirical risk ------------------------------------------


def _fig1_rep(rep: int, sizes, root: int) -> list:
    rng = np.random.default_rng(derive_seed(root, rep))
    out = []
    for n in sizes:
        x = rng.gamma(FIG1_GAMMA.shape, FIG1_GAMMA.scale, int(n))
        out.append([empirical_risk(x, a) for a in FIG1_ALPHAS])
    return out


def _influence_histogram(root: int, n: int = 500, alpha: float = 2.0, bins: int = 20) -> Table:
    rng = np.random.default_rng(derive_seed(root, 10**9))
    x = rng.gamma(FIG1_GAMMA.shape, FIG1_GAMMA.scale, n)
    mgf = (1.0 - FIG1_GAMMA.scale * alpha) ** (-FIG1_GAMMA.shape)
    infl = influence_function(x, alpha, mgf)
    edges = np.linspace(x.min(), x.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    table = Table(["bin_lo", "bin_hi", "count", "mean_influence"])
    for b in range(bins):
        sel = idx == b
        table.rows.append([edges[b], edges[b + 1], int(sel.sum()), float(infl[sel].mean()) if sel.any() else 0.0])
    return table


def run_fig1(cfg: ExperimentConfig) -> tuple[dict, dict]:
    sizes = cfg.grid
    res = parallel_map(partial(_fig1_rep, sizes=sizes, root=cfg.seed), range(cfg.repetitions), cfg.worker_count())
    raw = Table(["n", "alpha", "rep", "empirical_risk", "true_risk"])
    summary = Table(["n", "alpha", "true_risk", *STAT_COLUMNS, "frac_below_truth"])
    truth = [gamma_risk(FIG1_GAMMA, a) for a in FIG1_ALPHAS]
    for i, n in enumerate(sizes):
        for j, a in enumerate(FIG1_ALPHAS):
            vals = [r[i][j] for r in res]
            raw.rows += [[n, a, rep, v, truth[j]] for rep, v in enumerate(vals)]
            summary.rows.append([n, a, truth[j], *_stats(vals), float(np.mean(np.array(vals) < truth[j]))])
    return ({"fig1_summary.csv": summary, "fig1_raw.csv": raw, "influence_hist.csv": _influence_histogram(cfg.seed)},
            {"gamma": [FIG1_GAMMA.shape, FIG1_GAMMA.scale], "true_risks": dict(zip(map(str, FIG1_ALPHAS), truth))})


# --- example2: bias-correction estimates against the true bias ------------------------------

BIAS_METHODS = (EstimatorKind.BS_MLE, EstimatorKind.BS_MATCH, EstimatorKind.BS_EVT)


def example2_deltas(task, boot_reps: int, match_iters: int, root: int) -> list[float]:
    size_idx, n, rep = task
    fit_ss, boot_ss, data_ss = derive_seed(root, size_idx * 1_000_003 + rep).spawn(3)
    x = gmm_sample(EXAMPLE2_GMM, int(n), seed=data_ss)
    cfg = EstimatorConfig(reps=boot_reps, risk_match=RiskMatchConfig(max_iter=match_iters))
    out = []
    for kind, fs, bs in zip(BIAS_METHODS, fit_ss.spawn(3), boot_ss.spawn(3)):
        q = fit_for(kind, x, EXAMPLE2_ALPHA, cfg, np.random.default_rng(fs))
        out.append(bias_correct(x, EXAMPLE2_ALPHA, q, boot_reps, bs).delta_hat)
    return out


def true_bias(q: Gmm, n: int, alpha: float, draws: int, seed) -> tuple[float, float, float]:
    """Monte Carlo true bias ``rho(Q) - E[empirical risk]``: (mean-based, its SE, median-based)."""
    rng = np.random.default_rng(seed)
    risks = []
    chunk = max(1, int(2_000_000 // n))
    left = draws
    while left:
        rows = min(chunk, left)
        risks.append(empirical_risk_rows(gmm_sample_matrix(q, rows, n, rng), alpha))
        left -= rows
    r = np.concatenate(risks)
    truth = gmm_risk(q, alpha)
    se = float(r.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else float("nan")
    return truth - float(r.mean()), se, truth - float(np.median(r))


def run_example2(cfg: ExperimentConfig) -> tuple[dict, dict]:
    sizes = cfg.grid
    tasks = [(i, n, rep) for i, n in enumerate(sizes) for rep in range(cfg.repetitions)]
    res = parallel_map(partial(example2_deltas, boot_reps=cfg.boot_reps, match_iters=cfg.match_iters, root=cfg.seed),
                       tasks, cfg.worker_count())
    raw = Table(["n", "rep", *[k.value for k in BIAS_METHODS]])
    summary = Table(["n", "method", *STAT_COLUMNS])
    truth = Table(["n", "true_bias_mean", "true_bias_se", "true_bias_median", "draws"])
    draws = max(100, 10 * cfg.repetitions)
    for i, n in enumerate(sizes):
        vals = np.array([r for t, r in zip(tasks, res) if t[0] == i])
        raw.rows += [[n, rep, *row] for rep, row in enumerate(vals)]
        for j, kind in enumerate(BIAS_METHODS):
            summary.rows.append([n, kind.value, *_stats(vals[:, j])])
        tb, se, tbm = true_bias(EXAMPLE2_GMM, int(n), EXAMPLE2_ALPHA, draws, derive_seed(cfg.seed, 2**31 + i))
        truth.rows.append([n, tb, se, tbm, draws])
    return ({"example2_summary.csv": summary, "example2_raw.csv": raw, "example2_true_bias.csv": truth},
            {"alpha": EXAMPLE2_ALPHA, "gmm": EXAMPLE2_GMM.to_dict(),
             "true_risk": gmm_risk(EXAMPLE2_GMM, EXAMPLE2_ALPHA)})


# --- example3: estimator comparison on three projects --------------------------------------

PROJECT_ESTIMATORS = (EstimatorKind.SAA, EstimatorKind.LOOCV, EstimatorKind.OIC, EstimatorKind.MLE,
                      EstimatorKind.MOM, EstimatorKind.BS, EstimatorKind.BS_MATCH, EstimatorKind.BS_EVT)


def _example3_rep(rep: int, n: int, boot_reps: int, match_iters: int, root: int) -> list[list[float]]:
    data_ss, est_ss = derive_seed(root, rep).spawn(2)
    xi = gmm_sample(PROJECT_GMM, n, seed=data_ss)
    cfg = EstimatorConfig(reps=boot_reps, risk_match=RiskMatchConfig(max_iter=match_iters))
    seeds = est_ss.spawn(len(PROJECT_SCALES) * len(PROJECT_ESTIMATORS))
    out = []
    for p, s in enumerate(PROJECT_SCALES):
        row = []
        for k, kind in enumerate(PROJECT_ESTIMATORS):
            row.append(estimate(kind, s * xi, PROJECT_ALPHA, cfg, seeds[p * len(PROJECT_ESTIMATORS) + k]))
        out.append(row)
    return out


def project_true_risks() -> list[float]:
    return [gmm_risk(PROJECT_GMM.scaled(s), PROJECT_ALPHA) for s in PROJECT_SCALES]


def run_example3(cfg: ExperimentConfig) -> tuple[dict, dict]:
    n = int(cfg.grid[0])
    res = parallel_map(partial(_example3_rep, n=n, boot_reps=cfg.boot_reps, match_iters=cfg.match_iters,
                               root=cfg.seed), range(cfg.repetitions), cfg.worker_count())
    truth = project_true_risks()
    raw = Table(["project", "rep", *[k.value for k in PROJECT_ESTIMATORS]])
    summary = Table(["project", "scale", "estimator", "true_risk", *STAT_COLUMNS, "frac_below_truth"])
    for p, s in enumerate(PROJECT_SCALES):
        vals = np.array([r[p] for r in res])
        raw.rows += [[p + 1, rep, *row] for rep, row in enumerate(vals)]
        for k, kind in enumerate(PROJECT_ESTIMATORS):
            summary.rows.append([p + 1, s, kind.value, truth[p], *_stats(vals[:, k]),
                                 float(np.mean(vals[:, k] < truth[p]))])
    return ({"example3_summary.csv": summary, "example3_raw.csv": raw},
            {"alpha": PROJECT_ALPHA, "n": n, "gmm": PROJECT_GMM.to_dict(),
             "true_project_risks": dict(zip(map(str, PROJECT_SCALES), truth))})


# --- insurance ------------------------------------------------------------------------------

CV_METHODS = (BiasMethod.NONE, BiasMethod.BS_MATCH, BiasMethod.BS_EVT)
METHOD_LABELS = {BiasMethod.NONE: "cv", BiasMethod.BS_MATCH: "bs_match", BiasMethod.BS_EVT: "bs_evt"}


@dataclass
class InstanceOutcome:
    results: list  # result_row lists, one per method
    policies: dict  # method label -> Policy
    eps_star: dict  # method label -> chosen radius
    curves: list  # per radius: [eps, rho_raw, corrected per method..., out_of_sample]


def run_insurance_instance(inst: InsuranceInstance, seed_seq, radii, folds: int, boot_reps: int,
                           match_iters: int, test_rows: int, seed_label=0) -> InstanceOutcome:
    """Train, calibrate the radius by each method, and score on fresh test data."""
    train_ss, test_ss, cv_ss = seed_seq.spawn(3)
    data = generate_market(inst, seed=train_ss)
    test = generate_market(inst, test_rows, seed=test_ss).joint
    cv_cfg = CvConfig(folds=folds, radii=radii, reps=boot_reps, seed=_int_seed(cv_ss),
                      risk_match=RiskMatchConfig(max_iter=match_iters))

    def solver(train, eps):
        return solve_pricing(MarketData(train), inst, eps)

    sweep = cv_sweep(data.joint, cv_cfg, solver, policy_losses, inst.alpha0)
    full = {e: solve_pricing(data, inst, e) for e in cv_cfg.radii}
    oos = {e: out_of_sample_risk(p, test, inst.alpha0) for e, p in full.items()}
    selections = {m: select_radius(sweep, m, inst.alpha0, cv_cfg) for m in CV_METHODS}

    results, policies, eps_star = [], {}, {}
    saa = full.get(0.0) or solve_pricing(data, inst, 0.0)
    entries = [("saa", 0.0, saa, saa.objective)]
    for m, sel in selections.items():
        rec = next(r for r in sel.records if r.epsilon == sel.epsilon_star)
        entries.append((METHOD_LABELS[m], sel.epsilon_star, full[sel.epsilon_star], rec.rho_corrected))
    best = min(cv_cfg.radii, key=lambda e: (oos[e], -e))
    entries.append(("oracle", best, full[best], oos[best]))
    for label, eps, pol, est in entries:
        out = oos[eps] if eps in oos else out_of_sample_risk(pol, test, inst.alpha0)
        results.append(result_row(seed_label, eps, label, pol, est, out))
        policies[label] = pol
        eps_star[label] = eps
    curves = []
    for i, e in enumerate(cv_cfg.radii):
        curves.append([e, sweep[i].rho_raw, *[selections[m].records[i].rho_corrected for m in CV_METHODS], oos[e]])
    return InstanceOutcome(results, policies, eps_star, curves)


INSURANCE_METHODS = ("saa", "cv", "bs_match", "bs_evt", "oracle")


def _insurance_rep(task, cfg: ExperimentConfig, sweep_kind: str) -> InstanceOutcome:
    level_idx, level, rep = task
    if sweep_kind == "r":
        inst = InsuranceInstance(r=float(level))
    elif sweep_kind == "hetero":
        inst = InsuranceInstance(marginals=HETERO_MARGINALS, n=int(level))
    else:
        inst = InsuranceInstance(n=int(level))
    return run_insurance_instance(inst, derive_seed(cfg.seed, level_idx * 1_000_003 + rep), cfg.radii, cfg.folds,
                                  cfg.boot_reps, cfg.match_iters, cfg.test_rows, seed_label=rep)


def _run_insurance(cfg: ExperimentConfig, sweep_kind: str, level_name: str, prefix: str) -> tuple[dict, dict]:
    levels = cfg.grid
    tasks = [(i, lv, rep) for i, lv in enumerate(levels) for rep in range(cfg.repetitions)]
    res = parallel_map(partial(_insurance_rep, cfg=cfg, sweep_kind=sweep_kind), tasks, cfg.worker_count())
    m = 5
    raw = Table([level_name, *result_header(m)])
    summary = Table([level_name, "method", "metric", *STAT_COLUMNS])
    premiums = Table([level_name, "method", *[f"household_{h + 1}" for h in range(m)]])
    curves = Table([level_name, "rep", "epsilon", "rho_raw", *[f"corrected_{METHOD_LABELS[x]}" for x in CV_METHODS],
                    "out_of_sample"])
    for i, lv in enumerate(levels):
        outs = [o for t, o in zip(tasks, res) if t[0] == i]
        margs = HETERO_MARGINALS if sweep_kind == "hetero" else InsuranceInstance().marginals
        for o in outs:
            raw.rows += [[lv, *row] for row in o.results]
        for rep, o in enumerate(outs):
            curves.rows += [[lv, rep, *c] for c in o.curves]
        for j, label in enumerate(INSURANCE_METHODS):
            rows = [o.results[j] for o in outs]
            summary.rows.append([lv, label, "out_of_sample", *_stats([float(r[-1]) for r in rows])])
            summary.rows.append([lv, label, "in_sample", *_stats([float(r[-2]) for r in rows])])
            summary.rows.append([lv, label, "epsilon", *_stats([o.eps_star[label] for o in outs])])
            premiums.rows.append([lv, label, *premium_per_coverage([o.policies[label] for o in outs], margs)])
    return ({f"{prefix}_results.csv": raw, f"{prefix}_summary.csv": summary,
             f"{prefix}_premium_per_coverage.csv": premiums, f"{prefix}_epsilon_curves.csv": curves},
            {"levels": list(levels), "level": level_name, "test_rows": cfg.test_rows})


def run_insurance_n_sweep(cfg):
    return _run_insurance(cfg, "n", "n", "insurance_n")


def run_insurance_r_sweep(cfg):
    return _run_insurance(cfg, "r", "r", "insurance_r")


def run_insurance_hetero(cfg):
    return _run_insurance(cfg, "hetero", "n", "insurance_hetero")


def run_epsilon_curves(cfg: ExperimentConfig) -> tuple[dict, dict]:
    files, meta = _run_insurance(cfg, "n", "n", "epsilon_curves")
    raw = files.pop("epsilon_curves_epsilon_curves.csv")
    summary = Table(["n", "epsilon", "series", *STAT_COLUMNS])
    series = ["rho_raw", *[f"corrected_{METHOD_LABELS[x]}" for x in CV_METHODS], "out_of_sample"]
    for lv in cfg.grid:
        for e in cfg.radii:
            rows = [r for r in raw.rows if r[0] == lv and r[2] == e]
            for k, name in enumerate(series):
                summary.rows.append([lv, e, name, *_stats([r[3 + k] for r in rows])])
    files["epsilon_curves_raw.csv"] = raw
    files["epsilon_curves_summary.csv"] = summary
    return files, meta


RUNNERS = {"fig1": run_fig1, "example2": run_example2, "example3": run_example3,
           "insurance_n_sweep": run_insurance_n_sweep, "insurance_r_sweep": run_insurance_r_sweep,
           "insurance_hetero": run_insurance_hetero, "epsilon_curves": run_epsilon_curves}


def run(cfg: ExperimentConfig) -> list[Path]:
    """Run one experiment, write its CSVs and a manifest, and return the written paths.

    Raises ``OSError`` when the output directory cannot be written.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    start = time.perf_counter()
    files, meta = RUNNERS[cfg.name](cfg)
    paths = []
    for name, table in files.items():
        path = out / name
        _write_table(path, table)
        paths.append(path)
    manifest = {"experiment": cfg.name, "config": {**asdict(cfg), "repetitions": cfg.repetitions,
                                                   "grid": list(cfg.grid), "test_rows": cfg.test_rows},
                "seed": cfg.seed, "version": __version__, "files": sorted(files), "details": meta,
                "wall_time_s": round(time.perf_counter() - start, 3)}
    path = out / f"{cfg.name}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    paths.append(path)
    return paths


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
