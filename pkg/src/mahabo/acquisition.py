"""Confidence-bound acquisition functions and their optimization on the box.

The acquisition of a Mahalanobis-kernel GP depends on ``x`` only through
``B x``; consequently its gradient lies in the row space of ``B`` and plain
gradient descent never moves the null-space part of an iterate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .gp import BoxDomain, GPPosterior

SD_FLOOR = 1e-12
EST_SPREAD = 3.0
# curvature bound of exp(-r^2) along any direction; used by the auto step size
_RBF_CURVATURE = 2.0

PriorSampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class AcquisitionSpec:
    """``mu(x) - beta * spread(x)``.

    ``spread`` is the posterior standard deviation, or the variance when
    ``use_variance`` is set. In ``"est"`` mode ``min_estimate`` holds the
    estimated minimum the value of ``beta`` was derived from.
    """

    beta: float
    mode: str = "lcb"
    min_estimate: Optional[float] = None
    use_variance: bool = False

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if self.mode not in ("lcb", "est"):
            raise ValueError(f"unknown acquisition mode {self.mode!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 5
    mode: str = "quasi-newton"
    gd_step: Union[float, str] = "auto"
    grad_tol: float = 1e-6
    max_steps: int = 2000
    # when > 0, starts are the best ``restarts`` of this many prior draws
    raw_samples: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.mode not in ("vanilla-gd", "quasi-newton"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


class AcquisitionResult(NamedTuple):
    x: np.ndarray
    value: float
    degraded: bool = False


# ---------------------------------------------------------------------------
# Values and gradients
# ---------------------------------------------------------------------------


def _spread(var: np.ndarray, use_variance: bool) -> np.ndarray:
    return var if use_variance else np.sqrt(var)


def bound_values(post: GPPosterior, coef: float, X, use_variance: bool = False) -> np.ndarray:
    """``mu + coef * spread`` at the rows of ``X`` (``coef < 0`` is a lower bound)."""
    mean, var = post.mean_var(X)
    return mean + coef * _spread(var, use_variance)


def bound_value_and_grad(
    post: GPPosterior, coef: float, x, use_variance: bool = False
) -> tuple[float, np.ndarray, bool]:
    """Value and gradient of ``mu + coef * spread`` at one point.

    The third element flags a degenerate standard deviation, in which case
    only the mean contributes to the gradient.
    """
    mean, var, g_mean, g_var = post.mean_var_grad(x)
    if use_variance:
        return mean + coef * var, g_mean + coef * g_var, False
    sd = math.sqrt(var)
    if sd < SD_FLOOR:
        return mean + coef * sd, g_mean, True
    return mean + coef * sd, g_mean + coef * g_var / (2.0 * sd), False


def lcb_values(post: GPPosterior, spec: AcquisitionSpec, X) -> np.ndarray:
    return bound_values(post, -spec.beta, X, spec.use_variance)


def lcb_value(post: GPPosterior, spec: AcquisitionSpec, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (post.dim,):
        raise ValueError(f"query must have length {post.dim}")
    return float(lcb_values(post, spec, x[None, :])[0])


def lcb_value_and_grad(post: GPPosterior, spec: AcquisitionSpec, x) -> tuple[float, np.ndarray, bool]:
    return bound_value_and_grad(post, -spec.beta, x, spec.use_variance)


def lcb_gradient(post: GPPosterior, spec: AcquisitionSpec, x) -> np.ndarray:
    return lcb_value_and_grad(post, spec, x)[1]


# ---------------------------------------------------------------------------
# EST
# ---------------------------------------------------------------------------


def quasi_random_points(domain: BoxDomain, n: int, rng: np.random.Generator) -> np.ndarray:
    """Scrambled Sobol points scaled to the box."""
    if domain.dim > 21201:
        return domain.sample(n, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(domain.dim, scramble=True, seed=rng).random(n)
    return domain.lower + u * (domain.upper - domain.lower)


def est_from_candidates(post: GPPosterior, candidates: np.ndarray) -> AcquisitionSpec:
    """EST parameters computed over an explicit candidate set."""
    if post.n < 1:
        raise ValueError("EST needs at least one observation")
    mean, var = post.mean_var(candidates)
    sd = np.sqrt(var)
    ok = sd >= SD_FLOOR
    if not np.any(ok):
        return AcquisitionSpec(0.0, "est", float(np.min(post.train_y)))
    m_hat = min(float(np.min(mean[ok] - EST_SPREAD * sd[ok])), float(np.min(post.train_y)))
    beta = float(np.min((mean[ok] - m_hat) / sd[ok]))
    return AcquisitionSpec(max(beta, 0.0), "est", m_hat)


def est_beta(
    post: GPPosterior,
    domain: BoxDomain,
    candidates: int = 1000,
    rng: Optional[np.random.Generator] = None,
    mean_starts: int = 3,
) -> AcquisitionSpec:
    """Adaptive ``beta`` from an estimate of the minimum of the objective.

    The minimum estimate is ``min(mu - 3 sd)`` over quasi-random points, the
    observed inputs and a few local minima of the posterior mean, clipped to
    the best observation; ``beta`` is the smallest standardized gap
    ``(mu - m_hat) / sd`` over the same candidates.
    """
    rng = np.random.default_rng() if rng is None else rng
    cands = [quasi_random_points(domain, candidates, rng)]
    observed = post.train_inputs[domain.contains(post.train_inputs)] if post.n else post.train_inputs
    cands.append(observed)
    pool = np.vstack(cands)
    if mean_starts > 0:
        mean, _ = post.mean_var(pool)
        starts = pool[np.argsort(mean)[:mean_starts]]
        minima = [
            _lbfgsb(lambda x: bound_value_and_grad(post, 0.0, x)[:2], s, domain)[0] for s in starts
        ]
        pool = np.vstack([pool, np.array(minima)])
    return est_from_candidates(post, pool)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _lbfgsb(fun_and_grad, x0: np.ndarray, domain: BoxDomain, maxiter: int = 200) -> tuple[np.ndarray, float]:
    res = minimize(
        fun_and_grad, x0, jac=True, method="L-BFGS-B", bounds=domain.bounds, options={"maxiter": maxiter}
    )
    x = domain.clip(res.x)
    return x, float(fun_and_grad(x)[0])


def multistart_minimize(
    fun_and_grad,
    values: Callable[[np.ndarray], np.ndarray],
    domain: BoxDomain,
    restarts: int,
    rng: np.random.Generator,
    raw_samples: int = 0,
    prior_sampler: Optional[PriorSampler] = None,
) -> tuple[np.ndarray, float]:
    """L-BFGS-B from several starts; returns the best (x, value)."""
    sampler = prior_sampler or domain.sample
    if raw_samples > restarts:
        raw = sampler(raw_samples, rng)
        starts = raw[np.argsort(values(raw), kind="stable")[:restarts]]
    else:
        starts = sampler(restarts, rng)
    best_x, best_v = None, np.inf
    for s in starts:
        x, v = _lbfgsb(fun_and_grad, s, domain)
        if v < best_v:
            best_x, best_v = x, v
    return best_x, best_v


def auto_step(post: GPPosterior, spec: AcquisitionSpec) -> float:
    """``1 / (||B||^2 L)`` with ``L`` a curvature bound of the low-dimensional acquisition."""
    g = post.params.gamma
    weight = float(np.sum(np.abs(post.alpha))) if post.n else 0.0
    lip = _RBF_CURVATURE * (g * g * weight + spec.beta * g)
    lip = max(lip, 1e-12)
    norm_b = np.linalg.norm(post.params.B, 2)
    return 1.0 / (norm_b**2 * lip)


def gradient_descent(
    post: GPPosterior,
    spec: AcquisitionSpec,
    x0: np.ndarray,
    domain: BoxDomain,
    step: float,
    grad_tol: float,
    max_steps: int,
    history: Optional[list] = None,
) -> tuple[np.ndarray, float, bool]:
    """Fixed-step descent with backtracking; stops on small gradient or leaving the box.

    Returns ``(x, value, inside)``. A trial step that does not decrease the
    value is halved before being accepted, so accepted steps are monotone.
    """
    x = np.array(x0, dtype=float)
    val, grad, _ = lcb_value_and_grad(post, spec, x)
    if history is not None:
        history.append(val)
    for _ in range(max_steps):
        if np.linalg.norm(grad) < grad_tol:
            break
        s = step
        for _ in range(60):
            x_new = x - s * grad
            val_new, grad_new, _ = lcb_value_and_grad(post, spec, x_new)
            if val_new <= val + 1e-12:
                break
            s *= 0.5
        else:
            break
        x, val, grad = x_new, val_new, grad_new
        if history is not None:
            history.append(val)
        if not domain.contains(x):
            return x, val, False
    return x, val, True


def optimize_acquisition(
    post: GPPosterior,
    spec: AcquisitionSpec,
    domain: BoxDomain,
    cfg: OptimizerConfig = OptimizerConfig(),
    prior_sampler: Optional[PriorSampler] = None,
    rng: Optional[np.random.Generator] = None,
) -> AcquisitionResult:
    """Minimize the lower confidence bound over the box from ``cfg.restarts`` starts."""
    rng = np.random.default_rng() if rng is None else rng
    sampler = prior_sampler or domain.sample

    if cfg.mode == "quasi-newton":
        x, v = multistart_minimize(
            lambda x: lcb_value_and_grad(post, spec, x)[:2],
            lambda X: lcb_values(post, spec, X),
            domain,
            cfg.restarts,
            rng,
            cfg.raw_samples,
            sampler,
        )
        return AcquisitionResult(x, v)

    step = auto_step(post, spec) if cfg.gd_step == "auto" else float(cfg.gd_step)
    starts = sampler(cfg.restarts, rng)
    converged, escaped = [], []
    for s in starts:
        x, v, inside = gradient_descent(post, spec, s, domain, step, cfg.grad_tol, cfg.max_steps)
        (converged if inside else escaped).append(x)
    if converged:
        vals = [lcb_value(post, spec, x) for x in converged]
        i = int(np.argmin(vals))
        return AcquisitionResult(converged[i], vals[i])
    clipped = [domain.clip(x) for x in escaped]
    vals = [lcb_value(post, spec, x) for x in clipped]
    i = int(np.argmin(vals))
    return AcquisitionResult(clipped[i], vals[i], True)
