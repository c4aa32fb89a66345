"""Entropic risk in closed and empirical form.

The entropic risk of a loss ``L`` at risk aversion ``alpha > 0`` is
``(1/alpha) log E[exp(alpha L)]``; at ``alpha = 0`` it is ``E[L]``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .distributions import GammaSpec, Gmm
from .errors import DomainError, InputError, UnsupportedError


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (alpha >= 0 and math.isfinite(alpha)):
        raise InputError(f"risk aversion must be a finite nonnegative number, got {alpha}")
    return alpha


def as_losses(losses) -> np.ndarray:
    """Validate a scenario set: 1-D, nonempty, finite."""
    x = np.asarray(losses, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.ndim != 1:
        raise InputError(f"losses must be one-dimensional, got shape {x.shape}")
    if x.size == 0:
        raise InputError("scenario set is empty")
    if not np.all(np.isfinite(x)):
        raise InputError("losses must be finite")
    return x


def log_mean_exp(x: np.ndarray, axis=None) -> np.ndarray:
    """``log(mean(exp(x)))`` with max-shift stabilisation."""
    n = x.size if axis is None else x.shape[axis]
    return special.logsumexp(x, axis=axis) - math.log(n)


def _risk_along(x: np.ndarray, alpha: float, axis: int):
    c = x.mean(axis=axis)
    if alpha == 0:
        return c
    # centring on the mean keeps the tiny-alpha limit exact; logsumexp max-shifts internally
    return c + log_mean_exp(alpha * (x - np.expand_dims(c, axis)), axis=axis) / alpha


def empirical_risk(losses, alpha: float) -> float:
    """Entropic risk of the empirical distribution over ``losses``."""
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    return float(_risk_along(x, alpha, 0))


def empirical_risk_rows(losses: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise empirical risk of a 2-D array (one scenario set per row)."""
    x = np.asarray(losses, dtype=float)
    if x.ndim != 2 or x.shape[1] == 0:
        raise InputError("expected a nonempty 2-D array")
    return _risk_along(x, check_alpha(alpha), 1)


def gamma_risk(g: GammaSpec, alpha: float) -> float:
    """Entropic risk of a Gamma(shape, scale) loss; requires ``scale * alpha < 1``."""
    alpha = check_alpha(alpha)
    if alpha == 0:
        return g.shape * g.scale
    if g.scale * alpha >= 1:
        raise DomainError(f"moment generating function diverges: scale*alpha = {g.scale * alpha} >= 1")
    return -g.shape * math.log1p(-g.scale * alpha) / alpha


def gmm_risk(q: Gmm, alpha: float) -> float:
    """Closed-form entropic risk of a Gaussian mixture."""
    if not isinstance(q, Gmm):
        raise InputError("gmm_risk expects a Gmm")
    alpha = check_alpha(alpha)
    if alpha == 0:
        return q.mean
    c = q.mean
    expo = alpha * (q.means - c) + 0.5 * alpha**2 * q.stds**2
    return float(c + special.logsumexp(expo, b=q.weights) / alpha)


def oce_loss(t: float, loss, alpha: float):
    """Optimised-certainty-equivalent integrand ``t + (exp(alpha (loss - t)) - 1) / alpha``."""
    alpha = check_alpha(alpha)
    if alpha == 0:
        raise UnsupportedError("the OCE representation needs alpha > 0")
    return t + np.expm1(alpha * (np.asarray(loss, dtype=float) - t)) / alpha


def influence_function(xi_hat, alpha: float, mgf: float):
    """Influence of a point mass at ``xi_hat`` on the entropic risk.

    ``mgf`` is ``E[exp(alpha L)]`` under the reference distribution.
    """
    alpha = check_alpha(alpha)
    if alpha == 0:
        raise UnsupportedError("influence function is defined here for alpha > 0")
    if not mgf > 0:
        raise InputError(f"mgf must be positive, got {mgf}")
    x = np.asarray(xi_hat, dtype=float)
    out = -1.0 / alpha + np.exp(alpha * x - math.log(mgf)) / alpha
    return float(out) if out.ndim == 0 else out


def nested_risk(groups, alpha: float) -> float:
    """Entropic risk of the per-group entropic risks, groups weighted equally."""
    alpha = check_alpha(alpha)
    inner = np.array([empirical_risk(g, alpha) for g in groups])
    return empirical_risk(inner, alpha)
