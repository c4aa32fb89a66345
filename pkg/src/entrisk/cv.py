"""K-fold cross validation of a radius-parameterised decision rule, with bias-corrected selection."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .distributions import derive_seed
from .errors import InputError
from .estimators import EstimatorConfig, EstimatorKind, bias_correct, fit_for
from .fitting import RiskMatchConfig
from .risk import as_losses, check_alpha, empirical_risk, log_mean_exp

log = logging.getLogger(__name__)

Solver = Callable[[np.ndarray, float], Any]
LossFn = Callable[[Any, np.ndarray], np.ndarray]


class BiasMethod(enum.Enum):
    NONE = "none"
    BS_MLE = "bs_mle"
    BS_MATCH = "bs_match"
    BS_EVT = "bs_evt"

    @classmethod
    def parse(cls, name) -> BiasMethod:
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower().replace("-", "_"))
        except ValueError:
            raise InputError(f"unknown bias method {name!r}") from None

    @property
    def estimator(self) -> EstimatorKind | None:
        return None if self is BiasMethod.NONE else EstimatorKind[self.name]


@dataclass(frozen=True)
class CvConfig:
    folds: int = 5
    radii: tuple = tuple(np.linspace(0.0, 6.0, 20))
    reps: int = 500
    method: BiasMethod = BiasMethod.NONE
    seed: int = 0
    shuffle: bool = False
    components: int = 2
    risk_match: RiskMatchConfig = field(default_factory=RiskMatchConfig)

    def __post_init__(self):
        if self.folds < 2:
            raise InputError("need at least 2 folds")
        radii = tuple(float(e) for e in self.radii)
        if not radii:
            raise InputError("radius grid is empty")
        if any(e < 0 for e in radii) or any(b < a for a, b in zip(radii, radii[1:])):
            raise InputError("radius grid must be nonnegative and sorted ascending")
        if self.reps < 1:
            raise InputError("reps must be >= 1")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "method", BiasMethod.parse(self.method))

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(reps=self.reps, components=self.components, risk_match=self.risk_match)


@dataclass
class FoldResult:
    """Outcome of one K-fold pass at a single radius."""

    epsilon: float
    pooled: np.ndarray
    rho_raw: float
    fold_risks: np.ndarray

    def rho_pooled(self, alpha: float) -> float:
        return empirical_risk(self.pooled, alpha)


@dataclass
class RadiusRecord:
    epsilon: float
    rho_raw: float
    rho_pooled: float
    delta: float
    rho_corrected: float


@dataclass
class CvResult:
    method: BiasMethod
    records: list[RadiusRecord]
    epsilon_star: float

    def corrected(self) -> np.ndarray:
        return np.array([r.rho_corrected for r in self.records])


def fold_indices(n: int, folds: int, shuffle: bool = False, seed=None) -> list[np.ndarray]:
    """Row indices of each fold; strided (fold k holds rows k, k+K, ...) unless shuffled."""
    if n < folds:
        raise InputError(f"cannot split {n} rows into {folds} folds")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [order[k::folds] for k in range(folds)]


def kfold_cv(data, folds: int, eps: float, solver: Solver, loss_fn: LossFn, alpha: float,
             shuffle: bool = False, seed=None) -> FoldResult:
    """Fit on K-1 folds, score the held-out fold, and aggregate.

    Returns the pooled held-out losses and the risk of the per-fold risks,
    ``(1/alpha) log mean_k exp(alpha rho_k)``.
    """
    data = np.asarray(data, dtype=float)
    alpha = check_alpha(alpha)
    parts = fold_indices(data.shape[0], folds, shuffle, seed)
    pooled = []
    risks = np.empty(folds)
    for k, held in enumerate(parts):
        train = np.delete(data, held, axis=0)
        decision = solver(train, eps)
        losses = as_losses(np.asarray(loss_fn(decision, data[held]), dtype=float).ravel())
        pooled.append(losses)
        risks[k] = empirical_risk(losses, alpha)
    agg = float(risks.mean()) if alpha == 0 else float(log_mean_exp(alpha * risks) / alpha)
    return FoldResult(float(eps), np.concatenate(pooled), agg, risks)


def cv_sweep(data, cfg: CvConfig, solver: Solver, loss_fn: LossFn, alpha: float) -> list[FoldResult]:
    """One K-fold pass per radius; shareable across bias methods."""
    return [kfold_cv(data, cfg.folds, e, solver, loss_fn, alpha, cfg.shuffle, derive_seed(cfg.seed, 0))
            for e in cfg.radii]


def radius_delta(fold: FoldResult, method: BiasMethod, alpha: float, cfg: CvConfig, index: int) -> float:
    """Bias correction for one radius, fitted on that radius's pooled held-out losses."""
    kind = method.estimator
    if kind is None:
        return 0.0
    fit_seed, boot_seed = derive_seed(cfg.seed, index + 1).spawn(2)
    q = fit_for(kind, fold.pooled, alpha, cfg.estimator_config(), np.random.default_rng(fit_seed))
    return bias_correct(fold.pooled, alpha, q, cfg.reps, boot_seed).delta_hat


def select_radius(sweep: Sequence[FoldResult], method, alpha: float, cfg: CvConfig) -> CvResult:
    """Add each radius's bias estimate and pick the minimiser (ties go to the larger radius)."""
    method = BiasMethod.parse(method)
    records = []
    for i, fold in enumerate(sweep):
        delta = radius_delta(fold, method, alpha, cfg, i)
        records.append(RadiusRecord(fold.epsilon, fold.rho_raw, fold.rho_pooled(alpha), delta,
                                    fold.rho_raw + delta))
        log.debug("eps=%.4g raw=%.6g delta=%.6g", fold.epsilon, fold.rho_raw, delta)
    vals = np.array([r.rho_corrected for r in records])
    best = vals.min()
    ties = np.nonzero(np.isclose(vals, best, rtol=0.0, atol=1e-12))[0]
    return CvResult(method, records, records[int(ties[-1])].epsilon)


def tune_radius(data, cfg: CvConfig, solver: Solver, loss_fn: LossFn, alpha: float) -> CvResult:
    """Bias-corrected K-fold radius selection; ``BiasMethod.NONE`` is plain CV."""
    return select_radius(cv_sweep(data, cfg, solver, loss_fn, alpha), cfg.method, alpha, cfg)


CV_COLUMNS = ["epsilon", "rho_raw", "rho_pooled", "delta", "rho_corrected", "chosen"]


def write_cv_csv(result: CvResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CV_COLUMNS)
        for r in result.records:
            writer.writerow([f"{r.epsilon:.10g}", f"{r.rho_raw:.10g}", f"{r.rho_pooled:.10g}", f"{r.delta:.10g}",
                             f"{r.rho_corrected:.10g}", int(math.isclose(r.epsilon, result.epsilon_star))])
