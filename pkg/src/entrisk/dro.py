"""Worst-case entropic risk over a type-infinity Wasserstein ball.

Every scenario may be moved independently by at most ``eps`` in the chosen
norm. For losses that are linear or piecewise linear in the scenario the
worst case has a closed form involving the dual norm; these closed forms are
paired with a brute-force enumeration oracle and convex solvers.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, special

from .errors import InfeasibleDualError, InputError, NumericError, UnsupportedError
from .risk import _risk_along, check_alpha


class Norm(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, name) -> Norm:
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InputError(f"unknown norm {name!r}; expected l1, l2 or linf") from None


@dataclass(frozen=True)
class AmbiguityBall:
    radius: float = 0.0
    norm: Norm = Norm.L2

    def __post_init__(self):
        if not (self.radius >= 0 and math.isfinite(self.radius)):
            raise InputError(f"radius must be finite and nonnegative, got {self.radius}")
        object.__setattr__(self, "norm", Norm.parse(self.norm))


@dataclass(frozen=True)
class PiecewiseLinearLoss:
    """``max_k a_k * (z . xi) + b_k``."""

    slopes: tuple
    intercepts: tuple

    def __post_init__(self):
        a = np.asarray(self.slopes, dtype=float).ravel()
        b = np.asarray(self.intercepts, dtype=float).ravel()
        if a.size == 0 or a.size != b.size:
            raise InputError("need at least one piece and matching slope/intercept counts")
        object.__setattr__(self, "slopes", tuple(a))
        object.__setattr__(self, "intercepts", tuple(b))

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.max(np.multiply.outer(u, self.slopes) + np.asarray(self.intercepts), axis=-1)


@dataclass(frozen=True)
class NewsvendorSpec:
    w: float
    b: float
    h: float

    def __post_init__(self):
        if min(self.w, self.b, self.h) < 0:
            raise InputError("newsvendor costs must be nonnegative")

    def loss(self, z, xi):
        xi = np.asarray(xi, dtype=float)
        return self.w * z + self.b * np.maximum(xi - z, 0.0) + self.h * np.maximum(z - xi, 0.0)


@dataclass(frozen=True)
class SolverConfig:
    """Box-constrained solver settings.

    ``method="projected"`` runs projected (sub)gradient descent: with
    ``steps="backtracking"`` an Armijo line search on the projected step,
    falling back to diminishing steps once the search stalls at a kink, and
    with ``steps="diminishing"`` plain ``step0 / sqrt(t)`` steps.
    ``method="lbfgsb"`` hands smooth problems to scipy's L-BFGS-B.
    """

    max_iter: int = 5000
    tol: float = 1e-8
    step0: float = 1.0
    steps: str = "backtracking"
    method: str = "projected"

    def __post_init__(self):
        if self.steps not in ("backtracking", "diminishing"):
            raise InputError(f"unknown step rule {self.steps!r}")
        if self.method not in ("projected", "lbfgsb"):
            raise InputError(f"unknown solver method {self.method!r}")
        if self.max_iter < 1 or not self.step0 > 0:
            raise InputError("max_iter must be >= 1 and step0 positive")


# --- norms -------------------------------------------------------------------------


def dual_norm(v, norm) -> float:
    """Dual of the ball's norm: L2 is self-dual, L1 and LINF are each other's dual."""
    v = np.asarray(v, dtype=float).ravel()
    norm = Norm.parse(norm)
    if norm is Norm.L2:
        return float(np.linalg.norm(v))
    if norm is Norm.L1:
        return float(np.max(np.abs(v))) if v.size else 0.0
    return float(np.sum(np.abs(v)))


def _project_l1_ball(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    if np.sum(np.abs(v)) <= radius:
        return v
    u = np.sort(np.abs(v))[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u * np.arange(1, v.size + 1) > css - radius)[0][-1]
    theta = (css[k] - radius) / (k + 1)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def min_norm_subgradient(smooth_grad, z, eps: float, norm) -> np.ndarray:
    """Least-norm element of ``smooth_grad + eps * subdiff(dual_norm)(z)``.

    Where the dual norm is differentiable this is just the gradient; at kinks
    the choice makes descent steps stop at the kink instead of jumping over it.
    """
    g = np.asarray(smooth_grad, dtype=float)
    z = np.asarray(z, dtype=float)
    norm = Norm.parse(norm)
    if eps == 0:
        return g.copy()
    if norm is Norm.L2:
        nz = np.linalg.norm(z)
        if nz > 0:
            return g + eps * z / nz
        ng = np.linalg.norm(g)
        return g * max(0.0, 1.0 - eps / ng) if ng > 0 else g.copy()
    if norm is Norm.LINF:
        # dual is the sum of absolute values, separable per coordinate
        out = g + eps * np.sign(z)
        zero = z == 0
        out[zero] = np.sign(g[zero]) * np.maximum(np.abs(g[zero]) - eps, 0.0)
        return out
    # dual is the max absolute value
    az = np.abs(z)
    top = az.max() if az.size else 0.0
    if top == 0:
        return g - eps * _project_l1_ball(g / eps)
    out = g.copy()
    k = int(np.argmax(az))
    out[k] += eps * np.sign(z[k])
    return out


# --- closed-form values ----------------------------------------------------------------


def _scenarios(xi, d=None) -> np.ndarray:
    x = np.asarray(xi, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d in (None, 1) else x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("scenarios must be a nonempty (N, d) array")
    if d is not None and x.shape[1] != d:
        raise InputError(f"scenario dimension {x.shape[1]} does not match decision dimension {d}")
    if not np.all(np.isfinite(x)):
        raise InputError("scenarios must be finite")
    return x


def _vec(z) -> np.ndarray:
    return np.atleast_1d(np.asarray(z, dtype=float))


def _lme(u: np.ndarray, alpha: float) -> float:
    """Risk of the losses ``u`` (already in loss units)."""
    return float(_risk_along(u, alpha, 0))


def dro_value_linear(z, scenarios, alpha: float, ball: AmbiguityBall) -> float:
    """Worst-case risk of ``z . xi``: empirical risk plus ``eps * ||z||_*``."""
    z = _vec(z)
    x = _scenarios(scenarios, z.size)
    alpha = check_alpha(alpha)
    return _lme(x @ z, alpha) + ball.radius * dual_norm(z, ball.norm)


def dro_value_piecewise(z, loss: PiecewiseLinearLoss, scenarios, alpha: float, ball: AmbiguityBall) -> float:
    """Worst-case risk of a piecewise-linear loss of ``z . xi``.

    Each piece is shifted by ``eps * |a_k| * ||z||_*`` before the per-scenario max.
    """
    z = _vec(z)
    x = _scenarios(scenarios, z.size)
    alpha = check_alpha(alpha)
    a = np.asarray(loss.slopes)
    b = np.asarray(loss.intercepts)
    shift = ball.radius * np.abs(a) * dual_norm(z, ball.norm)
    u = np.max(np.multiply.outer(x @ z, a) + b + shift, axis=1)
    return _lme(u, alpha)


def newsvendor_worst_losses(spec: NewsvendorSpec, z: float, xi_hat, eps: float) -> np.ndarray:
    """Per-scenario worst-case newsvendor loss over ``[xi - eps, xi + eps]``."""
    xi = np.asarray(xi_hat, dtype=float)
    under = spec.b * (xi + eps) + z * (spec.w - spec.b)
    over = (eps - xi) * spec.h + z * (spec.w + spec.h)
    return np.maximum(under, over)


def dro_value_newsvendor(spec: NewsvendorSpec, z: float, scenarios, alpha: float, eps: float) -> float:
    x = _scenarios(scenarios, 1)[:, 0]
    return _lme(newsvendor_worst_losses(spec, float(z), x, eps), check_alpha(alpha))


def dro_value_regression(z, features, labels, alpha: float, ball: AmbiguityBall) -> float:
    """Worst-case risk of the absolute residual ``|y - x . z|``."""
    z = _vec(z)
    x = _scenarios(features, z.size)
    y = np.asarray(labels, dtype=float).ravel()
    if y.size != x.shape[0]:
        raise InputError("features and labels must have the same number of rows")
    resid = np.abs(y - x @ z)
    return _lme(resid, check_alpha(alpha)) + ball.radius * dual_norm(np.concatenate(([-1.0], z)), ball.norm)


# --- brute-force oracle -----------------------------------------------------------------


def _ball_points(d: int, eps: float, norm: Norm, grid: int) -> np.ndarray:
    """Offsets covering the ball: an axis grid filtered to the ball plus boundary points."""
    if eps == 0:
        return np.zeros((1, d))
    if d == 1:
        return np.linspace(-eps, eps, max(2, grid))[:, None]
    axis = np.linspace(-eps, eps, max(2, grid))
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = np.array([dual_norm(p, _primal_as_dual(norm)) for p in pts]) <= eps * (1 + 1e-12)
    extra = []
    if norm is Norm.L1:
        extra = np.concatenate([np.eye(d), -np.eye(d)]) * eps
    elif norm is Norm.L2:
        m = max(8, grid * 4)
        if d == 2:
            ang = np.linspace(0, 2 * np.pi, m, endpoint=False)
            extra = eps * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            i = np.arange(m * m) + 0.5
            phi = np.arccos(1 - 2 * i / (m * m))
            th = np.pi * (1 + 5**0.5) * i
            extra = eps * np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    out = pts[keep]
    return np.concatenate([out, extra]) if len(extra) else out


def _primal_as_dual(norm: Norm) -> Norm:
    # dual_norm(v, X) evaluates the dual of X; pick X whose dual is the primal norm
    return {Norm.L1: Norm.LINF, Norm.LINF: Norm.L1, Norm.L2: Norm.L2}[norm]


def worst_case_brute(z, loss: Callable, scenarios, alpha: float, ball: AmbiguityBall, grid: int = 2) -> float:
    """Enumerate each scenario's ball and keep the largest loss.

    ``loss(z, points)`` maps an (P, d) array of scenarios to P losses. Exact for
    losses whose maximum over the ball sits at an enumerated point (interval
    endpoints in one dimension for piecewise-linear losses).
    """
    x = _scenarios(scenarios)
    d = x.shape[1]
    if d > 3:
        raise UnsupportedError(f"brute force enumeration supports d <= 3, got {d}")
    alpha = check_alpha(alpha)
    offsets = _ball_points(d, ball.radius, ball.norm, grid)
    worst = np.array([np.max(np.asarray(loss(z, xi + offsets), dtype=float)) for xi in x])
    return _lme(worst, alpha)


# --- dual certificate ---------------------------------------------------------------------


def fenchel_constraint_value(xi_hat, phi, conjugate: Callable, eps: float, norm) -> float:
    """Left side ``phi . xi_hat - conj(phi) + eps * ||phi||_*`` of one dual constraint.

    ``conjugate(phi)`` returns the partial concave conjugate of the loss piece,
    or ``-inf`` (or None) when it is unbounded below.
    """
    xi = np.atleast_1d(np.asarray(xi_hat, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if xi.shape != phi.shape:
        raise InputError("xi_hat and phi must have the same shape")
    c = conjugate(phi)
    if c is None or c == -math.inf:
        raise InfeasibleDualError("conjugate is -inf at this phi; no bound is certified")
    return float(phi @ xi - c + eps * dual_norm(phi, norm))


# --- solvers ---------------------------------------------------------------------------------


def projected_residual(grad, z, lower, upper) -> float:
    """Norm of the gradient after removing components blocked by active box bounds."""
    g = np.asarray(grad, dtype=float).copy()
    at_lo = z <= lower
    at_hi = z >= upper
    g[at_lo] = np.minimum(g[at_lo], 0.0)
    g[at_hi] = np.maximum(g[at_hi], 0.0)
    return float(np.linalg.norm(g))


def _write_solver_trace(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective", "step"])
        writer.writerows(rows)


def _lbfgsb(fun_grad, x, lower, upper, cfg, trace_path):
    rows = []
    best = [np.inf, x]

    def fg(z):
        f, g = fun_grad(z)
        if not math.isfinite(f):
            raise NumericError(f"objective is not finite at {z}")
        if f < best[0]:
            best[0], best[1] = f, z.copy()
        return f, g

    def callback(zk):
        rows.append([len(rows), best[0], float(np.linalg.norm(zk - best[1]))])

    bounds = list(zip(np.where(np.isfinite(lower), lower, None), np.where(np.isfinite(upper), upper, None)))
    optimize.minimize(fg, x, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                      options={"maxiter": cfg.max_iter, "gtol": cfg.tol, "ftol": 1e-15})
    if trace_path is not None:
        _write_solver_trace(trace_path, rows)
    return best[1], best[0]


STALL_RTOL = 1e-15
STALL_ITERS = 50


def projected_descent(fun_grad: Callable, x0, lower, upper, cfg: SolverConfig = SolverConfig(),
                      trace_path=None) -> tuple[np.ndarray, float]:
    """Minimise a convex function over a box; returns the best iterate and its value.

    ``fun_grad`` returns the value and a (sub)gradient.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), np.shape(x0)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), np.shape(x0)).copy()
    if np.any(lower > upper):
        raise InputError("empty box: some lower bound exceeds its upper bound")
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    if cfg.method == "lbfgsb":
        return _lbfgsb(fun_grad, x, lower, upper, cfg, trace_path)
    f, g = fun_grad(x)
    if not math.isfinite(f):
        raise NumericError("objective is not finite at the starting point")
    best_x, best_f = x.copy(), f
    step = cfg.step0
    diminishing = cfg.steps == "diminishing"
    t_dim = 0
    stalled = 0
    rows = [] if trace_path is not None else None
    for it in range(cfg.max_iter):
        if np.linalg.norm(x - np.clip(x - g, lower, upper)) < cfg.tol:
            break
        if not diminishing:
            while True:
                xn = np.clip(x - step * g, lower, upper)
                dx = xn - x
                fn, gn = fun_grad(xn)
                if fn <= f + g @ dx + (dx @ dx) / (2 * step) + 1e-14 * abs(f):
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            if step < 1e-14:
                # line search stalled at a kink: continue with diminishing steps from the best point
                diminishing = True
                x, f = best_x.copy(), best_f
                _, g = fun_grad(x)
                continue
            x, f, g = xn, fn, gn
            step = min(step * 2.0, 1e6)
            cur = step
        else:
            t_dim += 1
            gn_ = np.linalg.norm(g)
            cur = cfg.step0 / math.sqrt(t_dim) / max(1.0, gn_)
            x = np.clip(x - cur * g, lower, upper)
            f, g = fun_grad(x)
        if not (math.isfinite(f) and np.all(np.isfinite(x))):
            raise NumericError(f"solver produced non-finite values at iteration {it}")
        if rows is not None:
            rows.append([it, f, cur])
        # round-off keeps the gradient map above tol near some optima; stop once progress stalls
        stalled = 0 if diminishing or f < best_f - STALL_RTOL * max(1.0, abs(best_f)) else stalled + 1
        if f < best_f:
            best_x, best_f = x.copy(), f
        if stalled >= STALL_ITERS:
            break
    if rows is not None:
        _write_solver_trace(trace_path, rows)
    return best_x, best_f


def _softmax_weights(u: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return np.full(u.size, 1.0 / u.size)
    return special.softmax(alpha * u)


def _box(lower, upper, d):
    lo = np.broadcast_to(np.asarray(-np.inf if lower is None else lower, dtype=float), (d,))
    hi = np.broadcast_to(np.asarray(np.inf if upper is None else upper, dtype=float), (d,))
    return lo, hi


def _start(lo, hi):
    return np.clip(np.zeros(lo.size), lo, hi)


def linear_objective(z, x, alpha, ball) -> tuple[float, np.ndarray]:
    u = x @ z
    p = _softmax_weights(u, alpha)
    val = _lme(u, alpha) + ball.radius * dual_norm(z, ball.norm)
    return val, min_norm_subgradient(x.T @ p, z, ball.radius, ball.norm)


def dro_solve_linear(scenarios, alpha: float, ball: AmbiguityBall, lower=None, upper=None,
                     cfg: SolverConfig = SolverConfig(), x0=None, trace_path=None) -> tuple[np.ndarray, float]:
    """Minimise the worst-case risk of ``z . xi`` over a box."""
    x = _scenarios(scenarios)
    alpha = check_alpha(alpha)
    lo, hi = _box(lower, upper, x.shape[1])
    start = _start(lo, hi) if x0 is None else np.asarray(x0, dtype=float)
    z, val = projected_descent(lambda z: linear_objective(z, x, alpha, ball), start, lo, hi, cfg, trace_path)
    return z, dro_value_linear(z, x, alpha, ball)


def piecewise_objective(z, loss, x, alpha, ball) -> tuple[float, np.ndarray]:
    a = np.asarray(loss.slopes)
    b = np.asarray(loss.intercepts)
    nz = dual_norm(z, ball.norm)
    u_all = np.multiply.outer(x @ z, a) + b + ball.radius * np.abs(a) * nz
    k = np.argmax(u_all, axis=1)
    u = u_all[np.arange(x.shape[0]), k]
    p = _softmax_weights(u, alpha)
    smooth = x.T @ (p * a[k])
    weight = float(p @ np.abs(a[k]))
    g = min_norm_subgradient(smooth, z, ball.radius * weight, ball.norm)
    return _lme(u, alpha), g


def dro_solve_piecewise(loss: PiecewiseLinearLoss, scenarios, alpha: float, ball: AmbiguityBall, lower=None,
                        upper=None, cfg: SolverConfig = SolverConfig(), trace_path=None):
    x = _scenarios(scenarios)
    alpha = check_alpha(alpha)
    lo, hi = _box(lower, upper, x.shape[1])
    z, _ = projected_descent(lambda z: piecewise_objective(z, loss, x, alpha, ball), _start(lo, hi), lo, hi,
                             cfg, trace_path)
    return z, dro_value_piecewise(z, loss, x, alpha, ball)


def dro_solve_newsvendor(spec: NewsvendorSpec, scenarios, alpha: float, eps: float,
                         tol: float = 1e-8) -> tuple[float, float]:
    """One-dimensional order quantity minimising the worst-case risk.

    The objective is convex in the order; bounded Brent search on
    ``[0, max xi + eps]`` with both endpoints also checked.
    """
    x = _scenarios(scenarios, 1)[:, 0]
    alpha = check_alpha(alpha)
    if eps < 0:
        raise InputError("eps must be nonnegative")
    hi = max(0.0, float(x.max()) + eps)

    def f(z):
        return _lme(newsvendor_worst_losses(spec, z, x, eps), alpha)

    cands = [0.0, hi]
    if hi > 0:
        res = optimize.minimize_scalar(f, bounds=(0.0, hi), method="bounded", options={"xatol": tol})
        cands.append(float(res.x))
    z = min(cands, key=f)
    return z, f(z)


def regression_objective(z, x, y, alpha, ball) -> tuple[float, np.ndarray]:
    r = y - x @ z
    u = np.abs(r)
    p = _softmax_weights(u, alpha)
    smooth = -(x.T @ (p * np.sign(r)))
    ext = np.concatenate(([-1.0], z))
    val = _lme(u, alpha) + ball.radius * dual_norm(ext, ball.norm)
    g_ext = min_norm_subgradient(np.concatenate(([0.0], smooth)), ext, ball.radius, ball.norm)
    return val, g_ext[1:]


def dro_solve_regression(features, labels, alpha: float, ball: AmbiguityBall,
                         cfg: SolverConfig = SolverConfig(), trace_path=None) -> tuple[np.ndarray, float]:
    """Robust entropic-risk regression on absolute residuals (unconstrained coefficients)."""
    x = _scenarios(features)
    y = np.asarray(labels, dtype=float).ravel()
    if y.size != x.shape[0]:
        raise InputError("features and labels must have the same number of rows")
    alpha = check_alpha(alpha)
    lo, hi = _box(None, None, x.shape[1])
    z, _ = projected_descent(lambda z: regression_objective(z, x, y, alpha, ball), np.zeros(x.shape[1]), lo, hi,
                             cfg, trace_path)
    return z, dro_value_regression(z, x, y, alpha, ball)
