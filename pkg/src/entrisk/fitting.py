"""Bias-aware GMM fits: entropic-risk matching and block-maxima (EVT) matching."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .distributions import STD_FLOOR, Gmm, diff_sample, draw_diff_noise, gmm_fit_em, normal_quantile
from .errors import InputError, NumericError
from .risk import as_losses, check_alpha, empirical_risk_rows

SIGMA_MIN = math.exp(-5)


class EvtDegenerateWarning(RuntimeWarning):
    """Block-maxima quantiles coincide, so the tail component's spread was floored."""


@dataclass(frozen=True)
class RiskMatchConfig:
    """Settings for :func:`fit_gmm_risk_match`.

    ``bins=None`` picks a divisor of N near sqrt(N); ``model_bins=None`` uses
    four times the data bins. ``tau`` is the Gumbel-softmax temperature.
    """

    bins: int | None = None
    model_bins: int | None = None
    step: float = 0.01
    step_decay: float = 0.5
    max_iter: int = 30000
    tol: float = math.exp(-9)
    tau: float = 0.5
    components: int = 2
    em_max_iter: int = 500

    def __post_init__(self):
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")
        if not (self.step > 0 and self.tol > 0 and self.tau > 0):
            raise InputError("step, tol and tau must be positive")
        if not 0 < self.step_decay <= 1:
            raise InputError("step_decay must lie in (0, 1]")
        if self.components < 1:
            raise InputError("components must be >= 1")


def default_bins(n: int) -> int:
    """Bin count near sqrt(n); prefers an exact divisor of ``n`` within a factor of two."""
    root = math.sqrt(n)
    cands = [b for b in range(max(1, math.ceil(root / 2)), int(2 * root) + 1) if n % b == 0]
    if cands:
        return min(cands, key=lambda b: (abs(b - root), -b))
    return max(1, round(root))


def _resolve_bins(n: int, bins: int | None) -> tuple[int, int]:
    """Return ``(B, used)``: explicit bins must divide ``n``; defaults may drop a short tail."""
    if bins is None:
        b = default_bins(n)
        return b, b * (n // b)
    if int(bins) != bins or bins < 1 or bins > n:
        raise InputError(f"bins must be an integer in [1, {n}], got {bins}")
    if n % bins:
        raise InputError(f"{n} scenarios cannot be split into {bins} equal bins")
    return int(bins), n


def bin_risks(losses, bins: int, alpha: float) -> np.ndarray:
    """Entropic risk of each of ``bins`` contiguous, equal-size bins."""
    x = as_losses(losses)
    b, _ = _resolve_bins(x.size, bins)
    return empirical_risk_rows(x.reshape(b, -1), alpha)


# --- 1-D Wasserstein-2 --------------------------------------------------------


def _quantile_grid(sorted_vals: np.ndarray, size: int) -> np.ndarray:
    """Empirical quantile function evaluated at the midpoints ``(j + 1/2) / size``."""
    idx = np.floor((np.arange(size) + 0.5) * sorted_vals.size / size).astype(int)
    return sorted_vals[idx]


def w2_1d(a, b) -> float:
    """2-Wasserstein distance between two empirical distributions on the line."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise InputError("both samples must be nonempty")
    if a.size != b.size:
        size = 8 * max(a.size, b.size)
        a, b = _quantile_grid(a, size), _quantile_grid(b, size)
    return float(math.sqrt(np.mean((a - b) ** 2)))


def w2_1d_grad(model, target) -> tuple[float, np.ndarray]:
    """Distance and its gradient with respect to each entry of ``model``.

    Lengths must agree. Returns ``(W, grad)``; ``grad`` is zero when ``W == 0``.
    """
    m = np.asarray(model, dtype=float).ravel()
    t = np.asarray(target, dtype=float).ravel()
    if m.size != t.size:
        raise InputError(f"length mismatch: {m.size} vs {t.size}")
    order = np.argsort(m, kind="stable")
    matched = np.empty_like(m)
    matched[order] = np.sort(t)
    diff = m - matched
    w = math.sqrt(np.mean(diff**2))
    if w == 0:
        return 0.0, np.zeros_like(m)
    return w, diff / (m.size * w)


# --- entropic risk matching -----------------------------------------------------


def _model_bin_risks(samples, model_bins, alpha):
    x = samples.reshape(model_bins, -1)
    if alpha == 0:
        return x.mean(axis=1), np.full_like(x, 1.0 / x.shape[1])
    ax = alpha * x
    lse = special.logsumexp(ax, axis=1)
    return (lse - math.log(x.shape[1])) / alpha, np.exp(ax - lse[:, None])


def matching_distance(logits, means, stds, gumbel, normals, tau, model_bins, alpha, target_sorted) -> float:
    """Value of :func:`matching_objective` without the gradient."""
    a = (np.asarray(logits) + gumbel) / tau
    w = special.softmax(a, axis=1)
    samples = np.einsum("ik,ik->i", w, means + stds * normals)
    risks, _ = _model_bin_risks(samples, model_bins, alpha)
    d = np.sort(risks) - target_sorted
    return float(math.sqrt(np.mean(d * d)))


def matching_objective(logits, means, stds, gumbel, normals, tau, model_bins, alpha, target_sorted):
    """Distance between model and data bin-risk distributions, with its gradient.

    ``target_sorted`` must already be at ``model_bins`` resolution. Noise is
    taken as given, so the value is a deterministic function of the parameters.
    Returns ``(W, grad)`` with ``grad`` of shape (Y, 3) ordered
    (logit, mean, std).
    """
    samples, sens = diff_sample(logits, means, stds, gumbel, normals, tau)
    risks, p = _model_bin_risks(samples, model_bins, alpha)
    w, d_risk = w2_1d_grad(risks, target_sorted)
    d_sample = (d_risk[:, None] * p).ravel()
    grad = np.einsum("i,iks->ks", d_sample, sens)
    return w, grad


def _write_trace(path, rows, n_comp):
    header = ["iter", "w2", "step"] + [f"{p}_{k}" for p in ("weight", "mean", "std") for k in range(n_comp)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def fit_gmm_risk_match(losses, alpha: float, cfg: RiskMatchConfig = RiskMatchConfig(), seed=None,
                       trace_path=None) -> Gmm:
    """Fit a GMM whose bin-wise entropic risks match those of the data.

    Starts from an EM fit, then runs stochastic gradient descent on the
    Wasserstein-2 distance between the two bin-risk distributions using
    Gumbel-softmax samples (fresh noise every iteration). A step that would
    increase the distance on the current noise draw is rejected and the step
    size halved; weights stay on the simplex through a softmax and stds are
    floored at exp(-5).
    """
    x = as_losses(losses)
    alpha = check_alpha(alpha)
    b, used = _resolve_bins(x.size, cfg.bins)
    n = used // b
    bp = cfg.model_bins or 4 * b
    if bp < 1:
        raise InputError("model_bins must be positive")
    target = _quantile_grid(np.sort(empirical_risk_rows(x[:used].reshape(b, n), alpha)), bp)

    rng = np.random.default_rng(seed)
    init = gmm_fit_em(x, min(cfg.components, x.size), max_iter=cfg.em_max_iter, seed=rng)
    logits = np.log(init.weights)
    means = init.means.copy()
    stds = np.maximum(init.stds, SIGMA_MIN)
    k = logits.size

    step = cfg.step
    rows = [] if trace_path is not None else None
    for it in range(cfg.max_iter):
        gumbel, normals = draw_diff_noise(bp * n, k, rng)
        w, grad = matching_objective(logits, means, stds, gumbel, normals, cfg.tau, bp, alpha, target)
        if rows is not None:
            rows.append([it, w, step, *np.exp(logits), *means, *stds])
        if w < cfg.tol:
            break
        new_logits = logits - step * grad[:, 0]
        new_logits -= special.logsumexp(new_logits)
        new_means = means - step * grad[:, 1]
        new_stds = np.maximum(stds - step * grad[:, 2], SIGMA_MIN)
        if not (np.all(np.isfinite(new_logits)) and np.all(np.isfinite(new_means))
                and np.all(np.isfinite(new_stds))):
            raise NumericError(f"risk matching diverged at iteration {it}")
        # compare on the same noise so sampling jitter is not mistaken for an increase
        w_new = matching_distance(new_logits, new_means, new_stds, gumbel, normals, cfg.tau, bp, alpha, target)
        if w_new > w:
            step *= cfg.step_decay
            if step < 1e-12 * cfg.step:
                break
            continue
        logits, means, stds = new_logits, new_means, new_stds
    if rows is not None:
        _write_trace(trace_path, rows, k)
    return Gmm.from_logits(logits, means, stds)


# --- block maxima ------------------------------------------------------------------


def _nearest_rank(sorted_vals: np.ndarray, p: float) -> float:
    return float(sorted_vals[max(0, math.ceil(p * sorted_vals.size) - 1)])


def fit_gmm_evt(losses, bins: int | None = None) -> Gmm:
    """Two-component GMM with a tail component fitted to block maxima.

    The tail component N(mu_e, sigma_e) is chosen so that the 50th and 90th
    percentiles of the maximum of n of its draws equal those of the observed
    block maxima; the second component is a point mass placed so the mixture
    mean equals the sample mean.
    """
    x = as_losses(losses)
    if x.size < 4 and bins is None:
        raise InputError("block-maxima fit needs at least 4 scenarios")
    b, used = _resolve_bins(x.size, bins)
    n = used // b
    maxima = np.sort(x[:used].reshape(b, n).max(axis=1))
    q50, q90 = _nearest_rank(maxima, 0.5), _nearest_rank(maxima, 0.9)
    z50 = normal_quantile(0.5 ** (1.0 / n))
    z90 = normal_quantile(0.9 ** (1.0 / n))
    sigma = (q90 - q50) / (z90 - z50)
    if sigma > 0:
        mu = q50 - sigma * z50
    else:
        warnings.warn("block maxima quantiles coincide; tail spread floored", EvtDegenerateWarning, stacklevel=2)
        sigma, mu = STD_FLOOR, q50
    mean = float(x.mean())
    return Gmm([0.5, 0.5], [mu, 2.0 * (mean - 0.5 * mu)], [sigma, 0.0])
