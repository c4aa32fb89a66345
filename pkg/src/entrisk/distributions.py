"""Univariate Gaussian mixtures, Gamma marginals and the one-factor Gaussian copula.

Everything that draws random numbers takes a ``seed`` accepted by
:func:`numpy.random.default_rng` (int, ``SeedSequence`` or ``Generator``) and is
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import InputError

VARIANCE_FLOOR = 1e-6
STD_FLOOR = math.sqrt(VARIANCE_FLOOR)
_GUMBEL_CLIP = 1e-12


def derive_seed(root: int, index: int) -> np.random.SeedSequence:
    """Child seed for task ``index`` of a run rooted at ``root``.

    The rule is ``SeedSequence([root, index])``; it does not depend on how
    tasks are scheduled, so parallel and sequential runs draw the same numbers.
    """
    return np.random.SeedSequence([int(root), int(index)])


@dataclass(frozen=True)
class GammaSpec:
    """Gamma distribution with shape ``shape`` and scale ``scale``."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise InputError(f"Gamma shape and scale must be positive, got {self.shape}, {self.scale}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class Gmm:
    """Univariate Gaussian mixture ``sum_y w_y N(mu_y, sigma_y^2)``."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        m = np.atleast_1d(np.asarray(self.means, dtype=float)).copy()
        s = np.atleast_1d(np.asarray(self.stds, dtype=float)).copy()
        if w.ndim != 1 or not (w.shape == m.shape == s.shape) or w.size == 0:
            raise InputError("weights, means and stds must be 1-D sequences of equal nonzero length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise InputError("Gmm parameters must be finite")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
            raise InputError(f"weights must lie in (0, 1] and sum to 1, got {w}")
        if np.any(s < 0):
            raise InputError("stds must be nonnegative")
        for name, arr in (("weights", w), ("means", m), ("stds", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    @classmethod
    def from_logits(cls, logits, means, stds) -> Gmm:
        logits = np.asarray(logits, dtype=float)
        w = np.exp(logits - special.logsumexp(logits))
        # softmax can underflow a component to exactly 0; keep it a valid mixture
        w = np.maximum(w, 1e-300)
        return cls(w / w.sum(), means, stds)

    def shifted(self, c: float) -> Gmm:
        return Gmm(self.weights, self.means + c, self.stds)

    def scaled(self, c: float) -> Gmm:
        """Distribution of ``c * X`` for ``c >= 0``."""
        if c < 0:
            raise InputError("scale factor must be nonnegative")
        return Gmm(self.weights, self.means * c, self.stds * c)

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        s = np.maximum(self.stds, STD_FLOOR)
        comp = -0.5 * ((x - self.means) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi)
        return special.logsumexp(comp + np.log(self.weights), axis=-1)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist()}


@dataclass(frozen=True)
class CopulaSpec:
    """Gaussian copula with equicorrelation ``r`` and Gamma marginals."""

    r: float
    marginals: tuple[GammaSpec, ...]

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise InputError(f"copula correlation must lie in [0, 1], got {self.r}")
        if len(self.marginals) == 0:
            raise InputError("at least one marginal is required")
        object.__setattr__(self, "marginals", tuple(self.marginals))

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def covariance(self) -> np.ndarray:
        m = self.dim
        return self.r * np.ones((m, m)) + (1 - self.r) * np.eye(m)


@dataclass
class DiffSampleBatch:
    """Reparameterised GMM draws together with their parameter sensitivities.

    ``sensitivity[i, k, :]`` holds the partial derivatives of ``samples[i]``
    with respect to (logit of weight k, mean k, std k), noise held fixed.
    """

    samples: np.ndarray
    sensitivity: np.ndarray
    gumbel: np.ndarray = field(repr=False)
    normals: np.ndarray = field(repr=False)


def _check_count(n, name="n"):
    if int(n) != n or n < 1:
        raise InputError(f"{name} must be a positive integer, got {n}")
    return int(n)


def _component_draw(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if weights.size == 1:
        return np.zeros(n, dtype=np.intp)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right")


def gmm_sample(q: Gmm, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` i.i.d. samples from the mixture."""
    n = _check_count(n)
    rng = np.random.default_rng(seed)
    comp = _component_draw(q.weights, n, rng)
    return q.means[comp] + q.stds[comp] * rng.standard_normal(n)


def gmm_sample_matrix(q: Gmm, rows: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``rows`` independent samples of size ``n`` as a (rows, n) array."""
    comp = _component_draw(q.weights, rows * n, rng)
    x = q.means[comp] + q.stds[comp] * rng.standard_normal(rows * n)
    return x.reshape(rows, n)


def draw_diff_noise(n: int, n_components: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gumbel(0, 1) and standard normal noise for :func:`diff_sample`."""
    u = np.clip(rng.random((n, n_components)), _GUMBEL_CLIP, 1 - _GUMBEL_CLIP)
    gumbel = -np.log(-np.log(u))
    normals = rng.standard_normal((n, n_components))
    return gumbel, normals


def diff_sample(logits, means, stds, gumbel, normals, tau: float):
    """Gumbel-softmax reparameterised samples and their exact sensitivities.

    Returns ``(samples, sensitivity)`` with ``sensitivity`` of shape (n, Y, 3).
    """
    logits = np.asarray(logits, dtype=float)
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    a = (logits + gumbel) / tau
    a -= a.max(axis=1, keepdims=True)
    w = np.exp(a)
    w /= w.sum(axis=1, keepdims=True)
    z = means + stds * normals
    samples = np.einsum("ik,ik->i", w, z)
    sens = np.empty(w.shape + (3,))
    sens[..., 0] = w * (z - samples[:, None]) / tau
    sens[..., 1] = w
    sens[..., 2] = w * normals
    return samples, sens


def gmm_sample_diff(q: Gmm, n: int, tau: float = 0.5, seed=None) -> DiffSampleBatch:
    """Differentiable (Gumbel-softmax) samples from ``q``.

    Each sample is ``sum_k w_k (mu_k + sigma_k eps_k)`` with
    ``w = softmax((log pi + g) / tau)``.
    """
    n = _check_count(n)
    if not tau > 0:
        raise InputError(f"temperature must be positive, got {tau}")
    rng = np.random.default_rng(seed)
    gumbel, normals = draw_diff_noise(n, q.n_components, rng)
    samples, sens = diff_sample(np.log(q.weights), q.means, q.stds, gumbel, normals, tau)
    return DiffSampleBatch(samples, sens, gumbel, normals)


# --- EM ---------------------------------------------------------------------


def _kmeanspp_1d(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.size)]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(x.size)])
            continue
        centers.append(x[np.searchsorted(np.cumsum(d2) / total, rng.random(), side="right").clip(0, x.size - 1)])
    return np.asarray(centers, dtype=float)


def _em_loglik(x, w, m, v):
    comp = -0.5 * (x[:, None] - m) ** 2 / v - 0.5 * np.log(2 * math.pi * v) + np.log(w)
    ll = special.logsumexp(comp, axis=1)
    return ll, comp


def gmm_fit_em_trace(losses, n_components: int = 2, max_iter: int = 500, tol: float = 1e-8, seed=None):
    """EM fit returning ``(gmm, loglik_history)``.

    ``loglik_history[t]`` is the mean log-likelihood after iteration ``t``
    (entry 0 is the initialisation).
    """
    x = np.asarray(losses, dtype=float).ravel()
    k = _check_count(n_components, "n_components")
    if x.size < k:
        raise InputError(f"need at least {k} samples for {k} components, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InputError("losses must be finite")
    rng = np.random.default_rng(seed)

    centers = _kmeanspp_1d(x, k, rng)
    labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    w = np.empty(k)
    m = np.empty(k)
    v = np.empty(k)
    for j in range(k):
        members = x[labels == j]
        if members.size == 0:
            w[j], m[j], v[j] = 1.0 / x.size, centers[j], max(x.var(), VARIANCE_FLOOR)
        else:
            w[j], m[j], v[j] = members.size, members.mean(), max(members.var(), VARIANCE_FLOOR)
    w /= w.sum()

    ll, comp = _em_loglik(x, w, m, v)
    history = [float(ll.mean())]
    for _ in range(max_iter):
        resp = np.exp(comp - ll[:, None])
        nk = np.maximum(resp.sum(axis=0), 1e-300)
        w = nk / x.size
        m = resp.T @ x / nk
        v = np.maximum(np.einsum("ik,ik->k", resp, (x[:, None] - m) ** 2) / nk, VARIANCE_FLOOR)
        ll, comp = _em_loglik(x, w, m, v)
        history.append(float(ll.mean()))
        if history[-1] - history[-2] < tol:
            break
    w = np.maximum(w, 1e-300)
    return Gmm(w / w.sum(), m, np.sqrt(v)), history


EM_RESTARTS = 5


def gmm_fit_em(losses, n_components: int = 2, max_iter: int = 500, tol: float = 1e-8, seed=None,
               restarts: int = EM_RESTARTS) -> Gmm:
    """Maximum-likelihood univariate GMM via EM (k-means++ initialisation, variance floor 1e-6).

    EM is run from ``restarts`` initialisations and the fit with the highest
    likelihood is kept; a single start often stalls in a poorer local optimum.
    """
    rng = np.random.default_rng(seed)
    best, best_ll = None, -math.inf
    for _ in range(_check_count(restarts, "restarts")):
        q, hist = gmm_fit_em_trace(losses, n_components, max_iter, tol, rng)
        if hist[-1] > best_ll:
            best, best_ll = q, hist[-1]
    return best


# --- quantiles ----------------------------------------------------------------

# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: np.ndarray) -> np.ndarray:
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1 - _P_LOW
    mid = ~(lo | hi)

    q = np.sqrt(-2 * np.log(p[lo]))
    x[lo] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
        ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    q = np.sqrt(-2 * np.log1p(-p[hi]))
    x[hi] = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
        ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    q = p[mid] - 0.5
    r = q * q
    x[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    return x


def normal_quantile(p):
    """Standard normal inverse CDF (rational approximation plus one Newton step)."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise InputError("probabilities must lie strictly between 0 and 1")
    x = _acklam(np.atleast_1d(arr))
    # Newton step on the CDF; work in the nearer tail to keep the residual accurate
    upper = x > 0
    resid = np.where(upper, special.ndtr(-x) - (1 - np.atleast_1d(arr)), special.ndtr(x) - np.atleast_1d(arr))
    resid = np.where(upper, -resid, resid)
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    x = x - resid / pdf
    return float(x[0]) if arr.ndim == 0 else x.reshape(arr.shape)


def gamma_quantile(g: GammaSpec, p):
    """Gamma inverse CDF via the inverse regularised incomplete gamma function."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise InputError("probabilities must lie strictly between 0 and 1")
    out = special.gammaincinv(g.shape, arr) * g.scale
    return float(out) if arr.ndim == 0 else out


def _gamma_from_normal_scores(g: GammaSpec, u: np.ndarray) -> np.ndarray:
    # use the survival branch in the upper tail so Phi(u) never rounds to 1
    lower = special.gammaincinv(g.shape, special.ndtr(np.minimum(u, 0.0)))
    upper = special.gammainccinv(g.shape, special.ndtr(-np.maximum(u, 0.0)))
    return np.where(u <= 0, lower, upper) * g.scale


def copula_normal_scores(c: CopulaSpec, n: int, seed=None) -> np.ndarray:
    """Latent N(0, Sigma) rows with ``Sigma = r 11^T + (1 - r) I`` (one-factor construction)."""
    n = _check_count(n)
    rng = np.random.default_rng(seed)
    common = rng.standard_normal(n)
    idio = rng.standard_normal((n, c.dim))
    return math.sqrt(c.r) * common[:, None] + math.sqrt(1 - c.r) * idio


def copula_sample(c: CopulaSpec, n: int, seed=None) -> np.ndarray:
    """(n, M) losses with Gamma marginals coupled by the equicorrelated Gaussian copula."""
    u = copula_normal_scores(c, n, seed)
    out = np.empty_like(u)
    for h, g in enumerate(c.marginals):
        out[:, h] = _gamma_from_normal_scores(g, u[:, h])
    return out
