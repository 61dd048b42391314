"""Reconstruction of high-dimensional queries from low-dimensional ones.

Every ``x`` splits uniquely as ``x = B^+ (B x) + w`` with ``w`` in the null
space of ``B``. The pseudo-inverse map always returns ``w = 0``; the
randomized map keeps ``w`` from a random initial point and moves only the
row-space part onto the target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .acquisition import AcquisitionSpec, OptimizerConfig, PriorSampler, est_beta, optimize_acquisition
from .dpp import (
    DppConfig,
    RelevantRegion,
    condition_on_pending,
    min_ucb,
    sample_kdpp_gibbs,
    sample_relevant_region,
)
from .gp import BoxDomain, GPPosterior, lowdim_posterior


class LinearEmbedding:
    """A full-row-rank ``d x D`` matrix with its pseudo-inverse."""

    def __init__(self, B):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        self.B = B
        gram = B @ B.T
        self.pinv = np.linalg.solve(gram, B).T  # B^T (B B^T)^-1

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def D(self) -> int:
        return self.B.shape[1]

    @cached_property
    def null_projector(self) -> np.ndarray:
        return np.eye(self.D) - self.pinv @ self.B

    def zonotope_box(self, domain: BoxDomain) -> BoxDomain:
        """Axis-aligned bounding box of ``{B x : x in domain}``."""
        center = self.B @ domain.center
        half = np.abs(self.B) @ domain.half_width
        return BoxDomain(center - half, center + half)


def pseudo_inverse_map(emb: LinearEmbedding, z) -> np.ndarray:
    """``B^+ z``; may fall outside the box."""
    return emb.pinv @ np.asarray(z, dtype=float)


def null_space_component(emb: LinearEmbedding, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x - emb.pinv @ (emb.B @ x)


class Reconstruction(NamedTuple):
    x: np.ndarray
    x_init: Optional[np.ndarray]
    n_inits: int
    fallback: bool


def clipped_pinv(emb: LinearEmbedding, z, domain: BoxDomain) -> tuple[np.ndarray, bool]:
    x = pseudo_inverse_map(emb, z)
    clipped = domain.clip(x)
    return clipped, not np.array_equal(clipped, x)


def randomized_reconstruct(
    emb: LinearEmbedding,
    z_q,
    prior_sampler: Optional[PriorSampler],
    domain: BoxDomain,
    rng: np.random.Generator,
    tol: float = 1e-12,
    init_budget: int = 100,
    max_iter: int = 10_000,
) -> Reconstruction:
    """Steepest descent with exact line search on ``1/2 ||B x - z_q||^2``.

    Restarts from a fresh prior sample whenever an iterate leaves the box;
    after ``init_budget`` initializations falls back to the clipped
    pseudo-inverse.
    """
    z_q = np.asarray(z_q, dtype=float)
    sampler = prior_sampler or domain.sample
    B = emb.B
    for attempt in range(1, init_budget + 1):
        x0 = sampler(1, rng)[0]
        x = x0.copy()
        for _ in range(max_iter):
            if not domain.contains(x):
                break
            r = B @ x - z_q
            if 0.5 * float(r @ r) <= tol:
                return Reconstruction(x, x0, attempt, False)
            g = B.T @ r
            Bg = B @ g
            denom = float(Bg @ Bg)
            if denom == 0.0:
                break
            x = x - (float(g @ g) / denom) * g
    x, _ = clipped_pinv(emb, z_q, domain)
    return Reconstruction(x, None, init_budget, True)


# ---------------------------------------------------------------------------
# Two-step selection
# ---------------------------------------------------------------------------


class TwoStepResult(NamedTuple):
    points: np.ndarray
    z: np.ndarray
    flags: tuple


def two_step_select(
    post: GPPosterior,
    domain: BoxDomain,
    n_batch: int,
    strategy: str = "pinv",
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    dpp_cfg: DppConfig = DppConfig(),
    rng: Optional[np.random.Generator] = None,
    spec: Optional[AcquisitionSpec] = None,
    init_budget: int = 100,
) -> TwoStepResult:
    """Select in the projected space, then map each query back to the box.

    The low-dimensional search domain is the bounding box of the zonotope
    ``B X``. Without an explicit ``spec`` an EST spec is estimated on the
    low-dimensional posterior.
    """
    if strategy not in ("pinv", "randomized"):
        raise ValueError(f"unknown reconstruction strategy {strategy!r}")
    rng = np.random.default_rng() if rng is None else rng
    emb = LinearEmbedding(post.params.B)
    zbox = emb.zonotope_box(domain)
    low = lowdim_posterior(post)
    if spec is None:
        spec = est_beta(low, zbox, rng=rng)

    first = optimize_acquisition(low, spec, zbox, opt_cfg, None, rng)
    flags = ["acq_degraded"] if first.degraded else []
    zs = [first.x]
    if n_batch > 1:
        cond = condition_on_pending(low, first.x)
        ucb = min_ucb(low, spec.beta, zbox, opt_cfg, rng, spec.use_variance)
        region = RelevantRegion(low, spec.beta, ucb, dpp_cfg.lambda_init, spec.use_variance)
        cfg = replace(dpp_cfg, k=n_batch - 1, gibbs_steps=None)
        gibbs = sample_kdpp_gibbs(
            cond.cov_stack, lambda n, r: sample_relevant_region(region, zbox, cfg, r, n), cfg, rng
        )
        if gibbs.degraded:
            flags.append("dpp_degraded")
        zs.extend(gibbs.points)

    points = []
    for z in zs:
        if strategy == "pinv":
            x, clipped = clipped_pinv(emb, z, domain)
            if clipped:
                flags.append("pinv_clipped")
        else:
            rec = randomized_reconstruct(emb, z, None, domain, rng, init_budget=init_budget)
            x = rec.x
            if rec.fallback:
                flags.append("reconstruct_fallback")
        points.append(x)
    return TwoStepResult(np.array(points), np.array(zs), tuple(dict.fromkeys(flags)))
