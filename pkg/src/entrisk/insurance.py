"""Robust insurance pricing with households that accept any policy not raising their risk.

Each household's acceptance constraint binds at the optimum, which pins the
premium as a function of coverage. What remains is a convex problem in the
coverage vector over the unit box.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .distributions import CopulaSpec, GammaSpec, copula_sample
from .dro import Norm, SolverConfig, dual_norm, min_norm_subgradient, projected_descent
from .errors import InputError
from .risk import _risk_along, as_losses, check_alpha, empirical_risk

log = logging.getLogger(__name__)

HOUSEHOLD_ALPHAS = (2.9, 2.7, 2.5, 2.3, 2.1)
INSURER_ALPHA = 2.0
BASE_MARGINAL = GammaSpec(10.0, 0.45)
HETERO_MARGINALS = (GammaSpec(8.0, 0.41), GammaSpec(8.5, 0.42), GammaSpec(9.0, 0.43), GammaSpec(9.5, 0.44),
                    GammaSpec(10.0, 0.45))


@dataclass(frozen=True)
class InsuranceInstance:
    alpha0: float = INSURER_ALPHA
    alphas: tuple = HOUSEHOLD_ALPHAS
    marginals: tuple = (BASE_MARGINAL,) * 5
    r: float = 0.5
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        margs = tuple(m if isinstance(m, GammaSpec) else GammaSpec(*m) for m in self.marginals)
        if len(alphas) != len(margs) or not alphas:
            raise InputError(f"{len(alphas)} risk aversions for {len(margs)} marginals")
        if not (self.alpha0 > 0 and all(a > 0 for a in alphas)):
            raise InputError("all risk aversions must be positive")
        if not 0 <= self.r <= 1:
            raise InputError("correlation r must lie in [0, 1]")
        if self.n < 1:
            raise InputError("N must be positive")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "marginals", margs)

    @property
    def m(self) -> int:
        return len(self.alphas)

    @property
    def copula(self) -> CopulaSpec:
        return CopulaSpec(self.r, self.marginals)

    @classmethod
    def from_dict(cls, d: dict) -> InsuranceInstance:
        gammas = d.get("gammas", [[BASE_MARGINAL.shape, BASE_MARGINAL.scale]] * len(d.get("alphas", HOUSEHOLD_ALPHAS)))
        inst = cls(alpha0=float(d.get("alpha0", INSURER_ALPHA)), alphas=tuple(d.get("alphas", HOUSEHOLD_ALPHAS)),
                   marginals=tuple(GammaSpec(float(k), float(s)) for k, s in gammas), r=float(d.get("r", 0.5)),
                   n=int(d.get("N", 1000)), seed=int(d.get("seed", 0)))
        if "M" in d and int(d["M"]) != inst.m:
            raise InputError(f"M={d['M']} but {inst.m} households were described")
        return inst

    @classmethod
    def from_json(cls, path) -> InsuranceInstance:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"M": self.m, "alpha0": self.alpha0, "alphas": list(self.alphas),
                "gammas": [[g.shape, g.scale] for g in self.marginals], "r": self.r, "N": self.n, "seed": self.seed}


@dataclass(frozen=True)
class Policy:
    coverage: np.ndarray
    premium: np.ndarray
    objective: float = math.nan

    def total_premium(self) -> float:
        return float(np.sum(self.premium))


@dataclass(frozen=True)
class MarketData:
    """Insurer's joint scenarios; household ``h`` sees column ``h`` only."""

    joint: np.ndarray

    def __post_init__(self):
        j = np.asarray(self.joint, dtype=float)
        if j.ndim != 2 or j.shape[0] == 0:
            raise InputError("joint losses must be a nonempty (N, M) matrix")
        object.__setattr__(self, "joint", j)

    def column(self, h: int) -> np.ndarray:
        return self.joint[:, h]


def generate_market(inst: InsuranceInstance, n: int | None = None, seed=None) -> MarketData:
    return MarketData(copula_sample(inst.copula, inst.n if n is None else n, seed))


# --- premiums ---------------------------------------------------------------------


def _check_coverage(z):
    if not 0.0 <= z <= 1.0:
        raise InputError(f"coverage must lie in [0, 1], got {z}")


def premium(zh: float, col, ah: float) -> float:
    """Largest premium the household accepts for covering a fraction ``zh`` of its loss."""
    _check_coverage(zh)
    x = as_losses(col)
    ah = check_alpha(ah)
    if ah == 0:
        return float(zh * x.mean())
    return float((special.logsumexp(ah * x) - special.logsumexp(ah * (1.0 - zh) * x)) / ah)


def premium_grad(zh: float, col, ah: float) -> float:
    """Derivative of :func:`premium` in the coverage: the tilted mean of the loss."""
    x = np.asarray(col, dtype=float)
    if ah == 0:
        return float(x.mean())
    return float(special.softmax(ah * (1.0 - zh) * x) @ x)


def premiums(z, data: MarketData, alphas) -> np.ndarray:
    return np.array([premium(float(zh), data.column(h), a) for h, (zh, a) in enumerate(zip(z, alphas))])


# --- insurer problem --------------------------------------------------------------


class _PricingProblem:
    """Objective and gradient with the coverage-independent pieces cached."""

    def __init__(self, data: MarketData, inst: InsuranceInstance, eps: float, norm):
        if data.joint.shape[1] != inst.m:
            raise InputError(f"data has {data.joint.shape[1]} columns for {inst.m} households")
        if eps < 0:
            raise InputError("eps must be nonnegative")
        self.x = data.joint
        self.a = np.asarray(inst.alphas)
        self.a0 = inst.alpha0
        self.eps = eps
        self.norm = Norm.parse(norm)
        self.lse_full = special.logsumexp(self.a * self.x, axis=0)

    def premiums(self, z) -> np.ndarray:
        return (self.lse_full - special.logsumexp(self.a * (1.0 - z) * self.x, axis=0)) / self.a

    def __call__(self, z) -> tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        if z.shape != self.a.shape:
            raise InputError(f"coverage must have {self.a.size} entries")
        u = self.x @ z
        tilted = self.a * (1.0 - z) * self.x
        lse_z = special.logsumexp(tilted, axis=0)
        pis = (self.lse_full - lse_z) / self.a
        dpi = np.sum(np.exp(tilted - lse_z) * self.x, axis=0)
        val = float(_risk_along(u, self.a0, 0)) - pis.sum() + self.eps * dual_norm(z, self.norm)
        p = special.softmax(self.a0 * u)
        return val, min_norm_subgradient(self.x.T @ p - dpi, z, self.eps, self.norm)


def insurer_objective(z, data: MarketData, inst: InsuranceInstance, eps: float, norm=Norm.L2) -> float:
    """Insurer's worst-case risk net of the premiums the households accept."""
    return _PricingProblem(data, inst, eps, norm)(z)[0]


def insurer_objective_grad(z, data: MarketData, inst: InsuranceInstance, eps: float,
                           norm=Norm.L2) -> tuple[float, np.ndarray]:
    return _PricingProblem(data, inst, eps, norm)(z)


PRICING_SOLVER = SolverConfig(max_iter=2000, tol=1e-7, method="lbfgsb")


def solve_pricing(data: MarketData, inst: InsuranceInstance, eps: float, norm=Norm.L2,
                  cfg: SolverConfig = PRICING_SOLVER, trace_path=None) -> Policy:
    """Optimal coverage over [0, 1]^M with premiums set by the acceptance constraints."""
    prob = _PricingProblem(data, inst, eps, norm)
    m = inst.m
    z, val = projected_descent(prob, np.full(m, 0.5), np.zeros(m), np.ones(m), cfg, trace_path)
    return Policy(z, prob.premiums(z), val)


def out_of_sample_risk(policy: Policy, test, alpha0: float) -> float:
    """Insurer's empirical risk of claims paid minus premiums collected on ``test`` rows."""
    t = np.asarray(test, dtype=float)
    if t.ndim != 2 or t.shape[0] == 0:
        raise InputError("test data must be a nonempty (N, M) matrix")
    return empirical_risk(t @ policy.coverage - policy.total_premium(), alpha0)


def policy_losses(policy: Policy, rows) -> np.ndarray:
    return np.asarray(rows, dtype=float) @ policy.coverage - policy.total_premium()


def premium_per_coverage(policies, marginals, floor: float = 1e-6) -> np.ndarray:
    """Average premium over average expected indemnity, per household.

    Policies whose coverage for a household is below ``floor`` are left out of
    that household's average.
    """
    z = np.array([p.coverage for p in policies])
    pi = np.array([p.premium for p in policies])
    keep = z >= floor
    dropped = int((~keep).sum())
    if dropped:
        log.info("premium per unit coverage: excluded %d household-policies with coverage < %g", dropped, floor)
    out = np.full(z.shape[1], np.nan)
    for h, g in enumerate(marginals):
        if keep[:, h].any():
            out[h] = pi[keep[:, h], h].mean() / (z[keep[:, h], h].mean() * g.mean)
    return out


RESULT_PREFIX = ["seed", "epsilon", "method"]


def result_header(m: int) -> list[str]:
    return RESULT_PREFIX + [f"z_{h + 1}" for h in range(m)] + [f"pi_{h + 1}" for h in range(m)] + [
        "in_sample", "out_of_sample"]


def result_row(seed, eps, method, policy: Policy, in_sample, out_sample) -> list:
    return ([seed, f"{eps:.10g}", method] + [f"{v:.10g}" for v in policy.coverage]
            + [f"{v:.10g}" for v in policy.premium] + [f"{in_sample:.10g}", f"{out_sample:.10g}"])


def write_results_csv(rows, m: int, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(result_header(m))
        writer.writerows(rows)
