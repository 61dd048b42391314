"""Quick smoke checks of the core identities, runnable without a test runner."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .acquisition import AcquisitionSpec, OptimizerConfig, lcb_gradient, lcb_value
from .benchmarks import get_base_function, make_embedded_problem, sobol_init
from .embedding import LinearEmbedding, randomized_reconstruct
from .gp import (
    AdamConfig,
    BoxDomain,
    Dataset,
    MahaKernelParams,
    fit_posterior,
    log_marginal_likelihood,
    lowdim_posterior,
    pack_params,
    unpack_params,
)
from .harness import ExperimentConfig, run_trial


def _central(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_projection_equivalence(rng) -> bool:
    D, d = 12, 2
    X = rng.uniform(-1, 1, size=(15, D))
    params = MahaKernelParams(1.3, rng.normal(size=(d, D)), 0.05)
    post = fit_posterior(Dataset(X, rng.normal(size=15)), params)
    low = lowdim_posterior(post)
    Q = rng.uniform(-1, 1, size=(20, D))
    m, v = post.mean_var(Q)
    ml, vl = low.mean_var(Q @ params.B.T)
    return bool(np.allclose(m, ml, atol=1e-8) and np.allclose(v, vl, atol=1e-8))


def check_lml_gradient(rng) -> bool:
    D, d = 5, 2
    data = Dataset(rng.uniform(-1, 1, size=(10, D)), rng.normal(size=10))
    params = MahaKernelParams(1.1, rng.normal(size=(d, D)) * 0.5, 0.1)
    _, grad = log_marginal_likelihood(data, params)
    theta = pack_params(params)
    fd = _central(lambda t: log_marginal_likelihood(data, unpack_params(t, d, D))[0], theta)
    return bool(np.linalg.norm(grad - fd) <= 1e-4 * np.linalg.norm(fd))


def check_acquisition_gradient(rng) -> bool:
    D = 6
    X = rng.uniform(-1, 1, size=(12, D))
    post = fit_posterior(Dataset(X, np.sin(X[:, 0])), MahaKernelParams(1.0, rng.normal(size=(2, D)) * 0.6, 0.02))
    spec = AcquisitionSpec(2.0)
    x = rng.uniform(-1, 1, size=D)
    fd = _central(lambda v: lcb_value(post, spec, v), x)
    return bool(np.linalg.norm(lcb_gradient(post, spec, x) - fd) <= 1e-4 * np.linalg.norm(fd))


def check_reconstruction(rng) -> bool:
    emb = LinearEmbedding(rng.normal(size=(2, 8)))
    domain = BoxDomain.cube(8)
    z = emb.B @ domain.sample(1, rng)[0]
    rec = randomized_reconstruct(emb, z, None, domain, rng)
    r = emb.B @ rec.x - z
    P = emb.null_projector
    return bool(not rec.fallback and r @ r <= 2e-12 and np.allclose(P @ rec.x, P @ rec.x_init, atol=1e-6))


def check_sobol(rng) -> bool:
    return bool(np.allclose(sobol_init(BoxDomain([0.0], [1.0]), 4)[:, 0], [0.5, 0.75, 0.25, 0.375]))


def check_containment(rng) -> bool:
    prob = make_embedded_problem(get_base_function("hartmann6"), 200, 0.0, rng)
    X = prob.domain.sample(2000, rng)
    return bool(np.allclose(np.abs(prob.A).sum(axis=1), 1, atol=1e-12) and np.abs(X @ prob.A.T).max() <= 1 + 1e-12)


def check_determinism(rng) -> bool:
    cfg = ExperimentConfig(
        D=6, d=1, n_init=4, budget=2, est_candidates=100,
        adam=AdamConfig(iterations=20, restarts=1), optimizer=OptimizerConfig(restarts=2, raw_samples=16),
    )
    return run_trial(cfg, 0).to_csv(timing=False) == run_trial(cfg, 0).to_csv(timing=False)


CHECKS = [
    ("projected posterior equivalence", check_projection_equivalence),
    ("marginal likelihood gradient", check_lml_gradient),
    ("acquisition gradient", check_acquisition_gradient),
    ("randomized reconstruction", check_reconstruction),
    ("sobol reference points", check_sobol),
    ("embedding containment", check_containment),
    ("trial determinism", check_determinism),
]


def run(report: Callable[[str], None] = print, seed: int = 0) -> bool:
    ok = True
    for name, check in CHECKS:
        t0 = time.perf_counter()
        try:
            passed = check(np.random.default_rng(seed))
        except Exception as exc:  # a crash is a failure, not an abort
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'}  {name}  [{time.perf_counter() - t0:.2f}s]")
    return ok
