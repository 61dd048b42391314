"""Batch completion with a continuous k-DPP over the relevant region.

The first batch point comes from acquisition optimization. The remaining
``k = n_batch - 1`` points are drawn from a k-DPP whose kernel is the
posterior covariance after conditioning on the first point (no noise term,
no delta), restricted to the region where an inflated lower bound still
beats the smallest upper bound. Ground samples come from rejection
sampling on the box; the DPP itself is sampled by Metropolis-within-Gibbs
with the ground sampler as proposal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .acquisition import (
    AcquisitionSpec,
    OptimizerConfig,
    PriorSampler,
    bound_value_and_grad,
    bound_values,
    multistart_minimize,
    optimize_acquisition,
)
from .gp import BoxDomain, Dataset, GPPosterior, fit_posterior

LOG_DET_FLOOR = math.log(1e-300)


class RegionDegenerateError(RuntimeError):
    """The relevant region stayed empty even after inflating lambda past its cap."""


@dataclass(frozen=True)
class DppConfig:
    k: int = 1
    gibbs_steps: Optional[int] = None
    lambda_init: float = 2.0
    lambda_growth: float = 1.5
    rejection_budget: int = 5000
    lambda_max: float = 1e6
    init_budget: int = 100
    chunk: int = 1024

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.gibbs_steps is not None and self.gibbs_steps < self.k**2:
            raise ValueError("gibbs_steps must be at least k**2")
        if self.lambda_init < 1:
            raise ValueError("lambda_init must be >= 1")

    @property
    def steps(self) -> int:
        return 4 * self.k**2 if self.gibbs_steps is None else self.gibbs_steps


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def condition_on_pending(post: GPPosterior, x_pending) -> GPPosterior:
    """Posterior after adding ``x_pending`` as if it had been observed.

    The covariance does not depend on observed values, so the pending point
    is given its current posterior mean; the mean function is unchanged.
    """
    x_pending = np.atleast_2d(np.asarray(x_pending, dtype=float))
    m, _ = post.mean_var(x_pending)
    data = Dataset(np.vstack([post.train_inputs, x_pending]), np.concatenate([post.train_y, m]))
    return fit_posterior(data, post.params)


def dpp_kernel_eval(cond: GPPosterior, x, x2) -> float:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    value = float(cond.cov(x[None, :], x2[None, :])[0, 0])
    if np.array_equal(x, x2):
        if value < -1e-10:
            raise ArithmeticError(f"negative DPP kernel diagonal {value:.3e}")
        value = max(value, 0.0)
    return value


def log_det_stack(L: np.ndarray) -> np.ndarray:
    """Log-determinants of a stack of kernel minors; non-positive determinants map to -inf."""
    sign, logdet = np.linalg.slogdet(L)
    return np.where(sign > 0, logdet, -np.inf)


def acceptance_probability(logdet_current: float, logdet_proposed: float) -> float:
    if logdet_proposed == -np.inf:
        return 0.0
    if logdet_current == -np.inf:
        return 1.0
    return min(1.0, math.exp(min(0.0, logdet_proposed - logdet_current)))


# ---------------------------------------------------------------------------
# Relevant region
# ---------------------------------------------------------------------------


def min_ucb(
    post: GPPosterior,
    beta: float,
    domain: BoxDomain,
    cfg: OptimizerConfig = OptimizerConfig(),
    rng: Optional[np.random.Generator] = None,
    use_variance: bool = False,
) -> float:
    """Best value found of ``mu + beta * spread`` over the box (an upper bound on the minimum)."""
    rng = np.random.default_rng() if rng is None else rng
    _, v = multistart_minimize(
        lambda x: bound_value_and_grad(post, beta, x, use_variance)[:2],
        lambda X: bound_values(post, beta, X, use_variance),
        domain,
        cfg.restarts,
        rng,
        max(cfg.raw_samples, 16 * cfg.restarts),
    )
    return v


@dataclass
class RelevantRegion:
    """``{x : mu(x) - lam * beta * spread(x) <= ucb_min}``; ``lam`` grows during sampling."""

    post: GPPosterior
    beta: float
    ucb_min: float
    lam: float = 2.0
    use_variance: bool = False

    def margins(self, X) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.post.mean_var(X)
        spread = var if self.use_variance else np.sqrt(var)
        return mean - self.ucb_min, self.beta * spread

    def contains(self, X, lam: Optional[float] = None) -> np.ndarray:
        lam = self.lam if lam is None else lam
        gap, width = self.margins(np.atleast_2d(X))
        return gap - lam * width <= 0.0


def sample_relevant_region(
    region: RelevantRegion,
    domain: BoxDomain,
    cfg: DppConfig,
    rng: np.random.Generator,
    n: int = 1,
) -> np.ndarray:
    """Uniform samples on the region by rejection from the box, shape ``(n, D)``.

    After ``cfg.rejection_budget`` consecutive rejections ``region.lam`` is
    multiplied by ``cfg.lambda_growth``; the final value stays on the region.
    """
    out = []
    streak = 0
    while len(out) < n:
        X = domain.sample(cfg.chunk, rng)
        gap, width = region.margins(X)
        pos = 0
        while pos < X.shape[0] and len(out) < n:
            hit = np.flatnonzero(gap[pos:] - region.lam * width[pos:] <= 0.0)
            room = cfg.rejection_budget - streak
            if hit.size and hit[0] < room:
                out.append(X[pos + hit[0]])
                pos += hit[0] + 1
                streak = 0
                continue
            if X.shape[0] - pos < room:
                streak += X.shape[0] - pos
                break
            pos += room
            streak = 0
            region.lam *= cfg.lambda_growth
            if region.lam > cfg.lambda_max:
                raise RegionDegenerateError(f"relevant region still empty at lambda={region.lam:.3g}")
    return np.array(out)


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------


class GibbsResult(NamedTuple):
    points: np.ndarray
    degraded: bool
    acceptance_rate: float


def sample_kdpp_gibbs(
    kernel: Callable[[np.ndarray], np.ndarray],
    ground_sampler: Callable[[int, np.random.Generator], np.ndarray],
    cfg: DppConfig,
    rng: np.random.Generator,
    n_chains: Optional[int] = None,
) -> GibbsResult:
    """Continuous k-DPP sampling by Metropolis-within-Gibbs.

    ``kernel`` maps a stack of sets ``(..., k, D)`` to their kernel minors
    ``(..., k, k)``. Each step replaces one uniformly chosen element with a
    fresh ground sample, accepted with probability ``min(1, det ratio)``.
    With ``n_chains`` independent chains run side by side and the points
    come back with shape ``(n_chains, k, D)``; otherwise ``(k, D)``.
    """
    k = cfg.k
    C = 1 if n_chains is None else n_chains
    S = ground_sampler(C * k, rng)
    S = S.reshape(C, k, -1)
    ld = log_det_stack(kernel(S))
    for _ in range(cfg.init_budget):
        bad = np.flatnonzero(ld < LOG_DET_FLOOR)
        if bad.size == 0:
            break
        fresh = ground_sampler(bad.size * k, rng).reshape(bad.size, k, -1)
        S[bad] = fresh
        ld[bad] = log_det_stack(kernel(fresh))
    degraded = bool(np.any(ld < LOG_DET_FLOOR))

    rows = np.arange(C)
    accepted = 0
    for _ in range(cfg.steps):
        idx = rng.integers(k, size=C)
        proposal = ground_sampler(C, rng).reshape(C, -1)
        S_new = S.copy()
        S_new[rows, idx] = proposal
        ld_new = log_det_stack(kernel(S_new))
        log_u = np.log(rng.random(C))
        with np.errstate(invalid="ignore"):
            diff = ld_new - ld
        accept = np.isfinite(ld_new) & ((ld == -np.inf) | (log_u < diff))
        S[accept] = S_new[accept]
        ld[accept] = ld_new[accept]
        accepted += int(accept.sum())
    rate = accepted / max(1, cfg.steps * C)
    points = S[0] if n_chains is None else S
    return GibbsResult(points, degraded, rate)


# ---------------------------------------------------------------------------
# Batch selection
# ---------------------------------------------------------------------------


class BatchResult(NamedTuple):
    points: np.ndarray
    flags: tuple
    lam: Optional[float] = None
    ucb_min: Optional[float] = None


def select_batch(
    post: GPPosterior,
    domain: BoxDomain,
    n_batch: int,
    spec: AcquisitionSpec,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    dpp_cfg: DppConfig = DppConfig(),
    rng: Optional[np.random.Generator] = None,
    prior_sampler: Optional[PriorSampler] = None,
) -> BatchResult:
    """First point by acquisition optimization, the rest from a k-DPP on the relevant region."""
    if n_batch < 1:
        raise ValueError("n_batch must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    first = optimize_acquisition(post, spec, domain, opt_cfg, prior_sampler, rng)
    flags = ("acq_degraded",) if first.degraded else ()
    if n_batch == 1:
        return BatchResult(first.x[None, :], flags)

    cond = condition_on_pending(post, first.x)
    ucb = min_ucb(post, spec.beta, domain, opt_cfg, rng, spec.use_variance)
    region = RelevantRegion(post, spec.beta, ucb, dpp_cfg.lambda_init, spec.use_variance)
    cfg = replace(dpp_cfg, k=n_batch - 1)
    if cfg.gibbs_steps is not None and cfg.gibbs_steps < cfg.k**2:
        cfg = replace(cfg, gibbs_steps=None)
    gibbs = sample_kdpp_gibbs(
        cond.cov_stack,
        lambda n, r: sample_relevant_region(region, domain, cfg, r, n),
        cfg,
        rng,
    )
    if gibbs.degraded:
        flags += ("dpp_degraded",)
    return BatchResult(np.vstack([first.x[None, :], gibbs.points]), flags, region.lam, ucb)
