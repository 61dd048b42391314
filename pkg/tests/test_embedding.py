import numpy as np
import pytest
from scipy import stats

from mahabo.acquisition import AcquisitionSpec, OptimizerConfig, optimize_acquisition
from mahabo.dpp import DppConfig
from mahabo.embedding import (
    LinearEmbedding,
    clipped_pinv,
    null_space_component,
    pseudo_inverse_map,
    randomized_reconstruct,
    two_step_select,
)
from mahabo.gp import BoxDomain, Dataset, MahaKernelParams, fit_posterior, lowdim_posterior


def random_embedding(d=3, D=20, seed=0):
    return LinearEmbedding(np.random.default_rng(seed).normal(size=(d, D)))


def test_embedding_invariants():
    emb = random_embedding()
    P = emb.null_projector
    assert np.allclose(emb.B @ emb.pinv, np.eye(3), atol=1e-8)
    assert np.allclose(P @ P, P, atol=1e-8)
    assert np.allclose(emb.B @ P, 0, atol=1e-8)


def test_pinv_simple_and_orthonormal():
    assert np.allclose(pseudo_inverse_map(LinearEmbedding([[1.0, 0.0]]), [0.5]), [0.5, 0.0])
    Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(8, 3)))
    emb = LinearEmbedding(Q.T)
    z = np.array([0.3, -1.2, 0.7])
    assert np.allclose(pseudo_inverse_map(emb, z), Q @ z, atol=1e-10)


def test_pinv_round_trip():
    emb = random_embedding()
    rng = np.random.default_rng(2)
    for z in rng.normal(size=(100, 3)):
        x = pseudo_inverse_map(emb, z)
        assert np.linalg.norm(emb.B @ x - z) < 1e-8
        assert np.linalg.norm(null_space_component(emb, x)) < 1e-8


def test_null_space_decomposition():
    emb = random_embedding()
    rng = np.random.default_rng(3)
    row = emb.B.T @ rng.normal(size=3)
    assert np.linalg.norm(null_space_component(emb, row)) < 1e-8
    null = emb.null_projector @ rng.normal(size=20)
    assert np.allclose(null_space_component(emb, null), null, atol=1e-8)
    for x in rng.normal(size=(20, 20)):
        w = null_space_component(emb, x)
        assert np.linalg.norm(emb.B @ w) < 1e-8
        assert np.allclose(emb.pinv @ (emb.B @ x) + w, x, atol=1e-8)


def test_clipped_pinv_flags():
    emb = LinearEmbedding([[0.5, 0.0]])
    domain = BoxDomain.cube(2)
    x, clipped = clipped_pinv(emb, [0.25], domain)
    assert not clipped and np.allclose(x, [0.5, 0.0])
    x, clipped = clipped_pinv(emb, [0.9], domain)
    assert clipped and np.array_equal(x, [1.0, 0.0])


# ---------------------------------------------------------------------------
# Randomized reconstruction
# ---------------------------------------------------------------------------


def test_randomized_reconstruct_axis_aligned():
    emb = LinearEmbedding([[1.0, 0.0]])
    domain = BoxDomain.cube(2)
    rec = randomized_reconstruct(emb, [0.3], None, domain, np.random.default_rng(0))
    assert not rec.fallback
    assert abs(rec.x[0] - 0.3) <= 1e-6
    assert rec.x[1] == rec.x_init[1]


def test_randomized_reconstruct_null_component_is_uniform():
    emb = LinearEmbedding([[1.0, 0.0]])
    domain = BoxDomain.cube(2)
    rng = np.random.default_rng(11)
    w = np.array([randomized_reconstruct(emb, [0.3], None, domain, rng).x[1] for _ in range(2000)])
    assert stats.kstest(w, stats.uniform(loc=-1, scale=2).cdf).pvalue > 0.01


def test_randomized_reconstruct_keeps_exact_start():
    emb = random_embedding(2, 6, seed=4)
    x0 = np.random.default_rng(5).uniform(-1, 1, size=6)
    rec = randomized_reconstruct(emb, emb.B @ x0, lambda n, r: x0[None, :], BoxDomain.cube(6), np.random.default_rng(0))
    assert np.array_equal(rec.x, x0) and rec.n_inits == 1


def test_randomized_reconstruct_properties():
    emb = random_embedding(2, 10, seed=6)
    domain = BoxDomain.cube(10)
    rng = np.random.default_rng(7)
    P = emb.null_projector
    for _ in range(20):
        z = emb.B @ domain.sample(1, rng)[0]
        rec = randomized_reconstruct(emb, z, None, domain, rng)
        assert not rec.fallback
        assert domain.contains(rec.x)
        r = emb.B @ rec.x - z
        assert r @ r <= 2e-12
        assert np.allclose(P @ rec.x, P @ rec.x_init, atol=1e-6)


def test_randomized_reconstruct_falls_back():
    emb = LinearEmbedding([[1.0, 0.0]])
    domain = BoxDomain.cube(2)
    rec = randomized_reconstruct(emb, [5.0], None, domain, np.random.default_rng(0), init_budget=7)
    assert rec.fallback and rec.n_inits == 7
    assert np.array_equal(rec.x, [1.0, 0.0])


# ---------------------------------------------------------------------------
# Two-step selection
# ---------------------------------------------------------------------------


def test_zonotope_box_axis_aligned_is_exact():
    zbox = LinearEmbedding([[1.0, 0.0]]).zonotope_box(BoxDomain.cube(2))
    assert np.array_equal(zbox.lower, [-1.0]) and np.array_equal(zbox.upper, [1.0])


def test_zonotope_box_contains_projections():
    emb = random_embedding(3, 12, seed=8)
    domain = BoxDomain(np.linspace(-2, 0, 12), np.linspace(1, 3, 12))
    zbox = emb.zonotope_box(domain)
    Z = domain.sample(10_000, np.random.default_rng(9)) @ emb.B.T
    assert np.all(Z >= zbox.lower - 1e-12) and np.all(Z <= zbox.upper + 1e-12)


@pytest.fixture
def fitted():
    rng = np.random.default_rng(12)
    D = 5
    X = rng.uniform(-1, 1, size=(15, D))
    y = np.sin(3 * X[:, 1]) + X[:, 2] ** 2
    B = rng.normal(size=(2, D)) * 0.6
    return fit_posterior(Dataset(X, y), MahaKernelParams(1.0, B, 0.01))


def test_two_step_pinv_single_point_matches_definition(fitted):
    domain = BoxDomain.cube(5)
    spec = AcquisitionSpec(2.0)
    cfg = OptimizerConfig(restarts=3, raw_samples=32)
    res = two_step_select(fitted, domain, 1, "pinv", cfg, rng=np.random.default_rng(0), spec=spec)

    emb = LinearEmbedding(fitted.params.B)
    zbox = emb.zonotope_box(domain)
    z_star = optimize_acquisition(lowdim_posterior(fitted), spec, zbox, cfg, None, np.random.default_rng(0)).x
    assert np.array_equal(res.z[0], z_star)
    assert np.array_equal(res.points[0], domain.clip(emb.pinv @ z_star))


@pytest.mark.parametrize("strategy", ["pinv", "randomized"])
def test_two_step_batch_is_feasible(fitted, strategy):
    domain = BoxDomain.cube(5)
    res = two_step_select(
        fitted, domain, 4, strategy, OptimizerConfig(restarts=2, raw_samples=32), DppConfig(), np.random.default_rng(1)
    )
    assert res.points.shape == (4, 5) and res.z.shape == (4, 2)
    assert np.all(domain.contains(res.points))
    if strategy == "randomized" and "reconstruct_fallback" not in res.flags:
        assert np.allclose(res.points @ fitted.params.B.T, res.z, atol=1e-5)


def test_two_step_rejects_unknown_strategy(fitted):
    with pytest.raises(ValueError):
        two_step_select(fitted, BoxDomain.cube(5), 1, "nearest")
