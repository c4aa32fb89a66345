"""Point estimators of entropic risk from a single scenario set."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import Gmm, gmm_fit_em, gmm_sample_matrix
from .errors import InputError
from .fitting import RiskMatchConfig, fit_gmm_evt, fit_gmm_risk_match
from .risk import _risk_along, as_losses, check_alpha, empirical_risk, empirical_risk_rows, gmm_risk

# cap on samples held in memory at once by the bootstrap loops
_CHUNK = 2_000_000


class EstimatorKind(enum.Enum):
    SAA = "saa"
    LOOCV = "loocv"
    OIC = "oic"
    MLE = "mle"
    MOM = "mom"
    BS = "bs"
    BS_MLE = "bs_mle"
    BS_MATCH = "bs_match"
    BS_EVT = "bs_evt"

    @classmethod
    def parse(cls, name) -> EstimatorKind:
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower().replace("-", "_"))
        except ValueError:
            raise InputError(f"unknown estimator {name!r}") from None


@dataclass(frozen=True)
class EstimatorConfig:
    reps: int = 500
    components: int = 2
    em_max_iter: int = 500
    em_tol: float = 1e-8
    evt_bins: int | None = None
    risk_match: RiskMatchConfig = field(default_factory=RiskMatchConfig)

    def __post_init__(self):
        if self.reps < 1:
            raise InputError("reps must be >= 1")


@dataclass(frozen=True)
class BiasCorrection:
    delta_hat: float
    reps: int
    fitted: Gmm


def _median(x) -> float:
    # numpy averages the two middle values for even counts
    return float(np.median(x))


def _resample_risks(draw, rows: int, n: int, alpha: float) -> np.ndarray:
    """Empirical risk of ``rows`` size-``n`` samples produced by ``draw(k, n)``, in chunks."""
    per = max(1, _CHUNK // n)
    out = []
    done = 0
    while done < rows:
        k = min(per, rows - done)
        out.append(empirical_risk_rows(draw(k, n), alpha))
        done += k
    return np.concatenate(out)


def saa(losses, alpha: float) -> float:
    return empirical_risk(losses, alpha)


def loocv(losses, alpha: float) -> float:
    """Average held-out OCE loss, each point scored at the risk of the other N-1."""
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    if x.size < 2:
        raise InputError("leave-one-out needs at least 2 scenarios")
    if alpha == 0:
        raise InputError("leave-one-out OCE form needs alpha > 0")
    a = alpha * x
    # log-sum-exp of all points except i, from prefix and suffix accumulations
    pre = np.concatenate(([-np.inf], np.logaddexp.accumulate(a)[:-1]))
    suf = np.concatenate((np.logaddexp.accumulate(a[::-1])[::-1][1:], [-np.inf]))
    t = (np.logaddexp(pre, suf) - math.log(x.size - 1)) / alpha
    return float(np.mean(t + np.expm1(alpha * (x - t)) / alpha))


def oic(losses, alpha: float) -> float:
    """Sample risk plus the first-order bias term (population variance)."""
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    if x.size < 2:
        raise InputError("OIC needs at least 2 scenarios")
    if alpha == 0:
        raise InputError("OIC needs alpha > 0")
    e = np.exp(alpha * (x - x.max()))  # the correction is invariant to this rescaling
    m = e.mean()
    return empirical_risk(x, alpha) + float(e.var() / (x.size * alpha * m * m))


def mom(losses, alpha: float) -> float:
    """Median of block risks over floor(sqrt(N)) contiguous blocks."""
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    blocks = np.array_split(x, math.isqrt(x.size))
    return _median([_risk_along(b, alpha, 0) for b in blocks])


def bootstrap_classic(losses, alpha: float, reps: int = 500, seed=None) -> float:
    """Mean empirical risk over ``reps`` with-replacement resamples."""
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    if reps < 1:
        raise InputError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    risks = _resample_risks(lambda k, n: x[rng.integers(0, n, size=(k, n))], reps, x.size, alpha)
    return float(risks.mean())


def bias_correct(losses, alpha: float, fitted: Gmm, reps: int = 500, seed=None) -> BiasCorrection:
    """Median gap between the model's exact risk and the empirical risk of N model draws."""
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    if reps < 1:
        raise InputError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    risks = _resample_risks(lambda k, n: gmm_sample_matrix(fitted, k, n, rng), reps, x.size, alpha)
    return BiasCorrection(_median(gmm_risk(fitted, alpha) - risks), reps, fitted)


def fit_for(kind: EstimatorKind, losses, alpha: float, cfg: EstimatorConfig, rng) -> Gmm:
    """The bootstrap source distribution used by ``kind``."""
    if kind in (EstimatorKind.BS_MLE, EstimatorKind.MLE):
        return gmm_fit_em(losses, cfg.components, cfg.em_max_iter, cfg.em_tol, seed=rng)
    if kind is EstimatorKind.BS_MATCH:
        rm = cfg.risk_match
        if rm.components != cfg.components:
            rm = RiskMatchConfig(**{**rm.__dict__, "components": cfg.components})
        return fit_gmm_risk_match(losses, alpha, rm, seed=rng)
    if kind is EstimatorKind.BS_EVT:
        return fit_gmm_evt(losses, cfg.evt_bins)
    raise InputError(f"{kind.name} does not fit a model")


def mle_estimate(losses, alpha: float, cfg: EstimatorConfig = EstimatorConfig(), seed=None) -> float:
    """Plug-in risk of the EM-fitted mixture."""
    q = fit_for(EstimatorKind.MLE, as_losses(losses), alpha, cfg, np.random.default_rng(seed))
    return gmm_risk(q, alpha)


def estimate(kind, losses, alpha: float, cfg: EstimatorConfig = EstimatorConfig(), seed=None) -> float:
    """Dispatch to one estimator. Bootstrap kinds return SAA plus the median bias gap."""
    kind = EstimatorKind.parse(kind)
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    if kind is EstimatorKind.SAA:
        return saa(x, alpha)
    if kind is EstimatorKind.LOOCV:
        return loocv(x, alpha)
    if kind is EstimatorKind.OIC:
        return oic(x, alpha)
    if kind is EstimatorKind.MOM:
        return mom(x, alpha)
    if kind is EstimatorKind.BS:
        return bootstrap_classic(x, alpha, cfg.reps, seed)
    if kind is EstimatorKind.MLE:
        return mle_estimate(x, alpha, cfg, seed)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    fit_seed, boot_seed = root.spawn(2)
    q = fit_for(kind, x, alpha, cfg, np.random.default_rng(fit_seed))
    return saa(x, alpha) + bias_correct(x, alpha, q, cfg.reps, boot_seed).delta_hat
