"""Gaussian-process regression with the Mahalanobis kernel.

The kernel is ``gamma**2 * exp(-||B (x - x')||**2)`` with a ``d x D``
embedding matrix ``B``. Every quantity of the posterior depends on the
inputs only through ``Z = X B^T``, so most of the work happens in the
``d``-dimensional projected space. An RBF kernel with automatic relevance
determination is the special case ``d == D`` with diagonal ``B``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

LOG_2PI = math.log(2.0 * math.pi)

JITTER_START = 1e-10
JITTER_MAX = 1e-6
NOISE_FLOOR = 1e-8


class NumericalError(ArithmeticError):
    """Raised when a Gram matrix cannot be factorized even with jitter."""


# ---------------------------------------------------------------------------
# Domain and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``lower <= x <= upper`` in R^D."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise ValueError("lower and upper must have the same length")
        if not np.all(lower < upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def cube(cls, dim: int, low: float = -1.0, high: float = 1.0) -> "BoxDomain":
        return cls(np.full(dim, low), np.full(dim, high))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x) -> bool | np.ndarray:
        """Exact membership; vectorized over leading axes."""
        x = np.asarray(x, dtype=float)
        inside = np.logical_and(x >= self.lower, x <= self.upper).all(axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples, shape ``(n, D)``."""
        u = rng.random((n, self.dim))
        return self.lower + u * (self.upper - self.lower)

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return list(zip(self.lower.tolist(), self.upper.tolist()))


@dataclass
class Dataset:
    """Ordered observations ``(x_tau, y_tau)``; append-only.

    If a domain is attached, every appended point is checked against it.
    """

    X: np.ndarray
    y: np.ndarray
    domain: Optional[BoxDomain] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim == 1:
            if X.size == 0:
                X = X.reshape(0, self.domain.dim if self.domain is not None else 0)
            else:
                X = X[None, :]
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} points but {y.shape[0]} values")
        if self.domain is not None and X.shape[0] and not np.all(self.domain.contains(X)):
            raise ValueError("dataset contains points outside the domain")
        self.X, self.y = X, y

    @classmethod
    def empty(cls, dim: int, domain: Optional[BoxDomain] = None) -> "Dataset":
        return cls(np.empty((0, dim)), np.empty(0), domain)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def append(self, X_new, y_new) -> None:
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        y_new = np.atleast_1d(np.asarray(y_new, dtype=float)).ravel()
        if X_new.shape[0] != y_new.shape[0]:
            raise ValueError("mismatched batch sizes")
        if self.domain is not None and not np.all(self.domain.contains(X_new)):
            raise ValueError("appended point lies outside the domain")
        self.X = np.vstack([self.X, X_new])
        self.y = np.concatenate([self.y, y_new])

    def standardized(self) -> tuple["Dataset", float, float]:
        """Copy with zero-mean, unit-variance values, plus (mean, scale)."""
        mean = float(self.y.mean()) if len(self) else 0.0
        scale = float(self.y.std()) if len(self) > 1 else 1.0
        if not scale > 0:
            scale = 1.0
        return Dataset(self.X.copy(), (self.y - mean) / scale), mean, scale


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MahaKernelParams:
    gamma: float
    B: np.ndarray
    noise_var: float

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def D(self) -> int:
        return self.B.shape[1]

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.D:
            raise ValueError(f"expected inputs of length {self.D}, got {X.shape[-1]}")
        return X @ self.B.T

    def has_full_row_rank(self, rtol: float = 1e-10) -> bool:
        s = np.linalg.svd(self.B, compute_uv=False)
        return bool(s[0] > 0 and s[-1] > rtol * s[0])

    def lowdim(self) -> "MahaKernelParams":
        """Same kernel acting directly on projected inputs (identity embedding)."""
        return replace(self, B=np.eye(self.d))


def rbf_from_projected(gamma: float, Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
    """``gamma^2 exp(-||z - z'||^2)`` for all pairs; shapes ``(..., n, d)``, ``(..., m, d)``."""
    sq = (
        np.sum(Z1**2, axis=-1)[..., :, None]
        + np.sum(Z2**2, axis=-1)[..., None, :]
        - 2.0 * Z1 @ np.swapaxes(Z2, -1, -2)
    )
    return gamma**2 * np.exp(-np.maximum(sq, 0.0))


def kernel_eval(params: MahaKernelParams, x, x2) -> float:
    """Mahalanobis kernel between two single points."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != (params.D,) or x2.shape != (params.D,):
        raise ValueError(f"both points must have length {params.D}")
    r = params.B @ (x - x2)
    return params.gamma**2 * math.exp(-float(r @ r))


def kernel_matrix(params: MahaKernelParams, X1, X2=None) -> np.ndarray:
    Z1 = params.project(X1)
    Z2 = Z1 if X2 is None else params.project(X2)
    K = rbf_from_projected(params.gamma, Z1, Z2)
    if X2 is None:
        # exact symmetry and exact diagonal
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, params.gamma**2)
    return K


def _cholesky_with_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of A, escalating diagonal jitter on failure."""
    n = A.shape[0]
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(A + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise NumericalError("Gram matrix not positive definite after jitter escalation")


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GPPosterior:
    """Fitted posterior; immutable and safe to share between threads.

    ``chol`` is the lower factor of ``K + (noise_var + jitter) I`` and
    ``alpha`` solves that system against ``train_y``.
    """

    params: MahaKernelParams
    train_inputs: np.ndarray
    train_y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    train_z: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.train_y.shape[0]

    @property
    def dim(self) -> int:
        return self.params.D

    def _cross(self, Z: np.ndarray) -> np.ndarray:
        """Kernel between training points and projected queries, ``(N, m)``."""
        return rbf_from_projected(self.params.gamma, self.train_z, Z)

    def mean_var(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.mean_var_projected(self.params.project(X))

    def mean_var_projected(self, Z) -> tuple[np.ndarray, np.ndarray]:
        Z = np.atleast_2d(Z)
        prior = np.full(Z.shape[0], self.params.gamma**2)
        if self.n == 0:
            return np.zeros(Z.shape[0]), prior
        Ks = self._cross(Z)
        mean = Ks.T @ self.alpha
        V = solve_triangular(self.chol, Ks, lower=True)
        var = prior - np.sum(V * V, axis=0)
        return mean, _clamp_variance(var)

    def cov(self, X1, X2=None) -> np.ndarray:
        """Posterior covariance matrix between rows of ``X1`` and ``X2``."""
        Z1 = self.params.project(np.atleast_2d(X1))
        Z2 = Z1 if X2 is None else self.params.project(np.atleast_2d(X2))
        return self.cov_projected(Z1, Z2)

    def cov_projected(self, Z1, Z2) -> np.ndarray:
        prior = rbf_from_projected(self.params.gamma, Z1, Z2)
        if self.n == 0:
            return prior
        V1 = solve_triangular(self.chol, self._cross(Z1), lower=True)
        V2 = V1 if Z2 is Z1 else solve_triangular(self.chol, self._cross(Z2), lower=True)
        return prior - V1.T @ V2

    def cov_stack(self, S: np.ndarray) -> np.ndarray:
        """Posterior covariance within each set of a stack ``(..., k, D) -> (..., k, k)``."""
        S = np.asarray(S, dtype=float)
        Z = self.params.project(S)
        prior = rbf_from_projected(self.params.gamma, Z, Z)
        if self.n == 0:
            return prior
        lead = Z.shape[:-1]
        flat = Z.reshape(-1, Z.shape[-1])
        V = solve_triangular(self.chol, self._cross(flat), lower=True)
        V = V.T.reshape(*lead, self.n)
        return prior - V @ np.swapaxes(V, -1, -2)

    def mean_var_grad(self, x) -> tuple[float, float, np.ndarray, np.ndarray]:
        """Mean, variance and their gradients with respect to ``x`` at one point."""
        x = np.asarray(x, dtype=float)
        z = self.params.project(x)
        g2 = self.params.gamma**2
        if self.n == 0:
            zero = np.zeros(self.params.D)
            return 0.0, g2, zero, zero.copy()
        diff = z[None, :] - self.train_z  # (N, d)
        k = g2 * np.exp(-np.sum(diff * diff, axis=1))
        dk = -2.0 * k[:, None] * diff  # d k_i / d z
        mean = float(k @ self.alpha)
        grad_mean_z = dk.T @ self.alpha
        v = cho_solve((self.chol, True), k)
        var = g2 - float(k @ v)
        grad_var_z = -2.0 * dk.T @ v
        B = self.params.B
        return mean, float(_clamp_variance(np.array([var]))[0]), B.T @ grad_mean_z, B.T @ grad_var_z


def _clamp_variance(var: np.ndarray) -> np.ndarray:
    if np.any(var < -1e-10 * max(1.0, float(np.max(np.abs(var))))):
        raise NumericalError(f"posterior variance {var.min():.3e} is negative")
    return np.maximum(var, 0.0)


def fit_posterior(data: Dataset, params: MahaKernelParams) -> GPPosterior:
    X = np.asarray(data.X, dtype=float).reshape(len(data), params.D)
    y = np.asarray(data.y, dtype=float)
    Z = params.project(X)
    if len(data) == 0:
        return GPPosterior(params, X, y, np.empty((0, 0)), np.empty(0), 0.0, Z)
    K = rbf_from_projected(params.gamma, Z, Z)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, params.gamma**2)
    K[np.diag_indices_from(K)] += params.noise_var
    L, jitter = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), y)
    return GPPosterior(params, X, y, L, alpha, jitter, Z)


def posterior_mean_var(post: GPPosterior, x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.shape != (post.dim,):
        raise ValueError(f"query must have length {post.dim}")
    m, v = post.mean_var(x[None, :])
    return float(m[0]), float(v[0])


def lowdim_posterior(post: GPPosterior) -> GPPosterior:
    """The equivalent RBF posterior living on projected inputs ``z = B x``."""
    data = Dataset(post.train_z, post.train_y)
    return fit_posterior(data, post.params.lowdim())


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------
# Packed parameter vector: [log gamma, log noise_var, B.ravel()].


def pack_params(params: MahaKernelParams) -> np.ndarray:
    return np.concatenate([[math.log(params.gamma), math.log(params.noise_var)], params.B.ravel()])


def unpack_params(theta: np.ndarray, d: int, D: int) -> MahaKernelParams:
    return MahaKernelParams(math.exp(theta[0]), theta[2:].reshape(d, D), math.exp(theta[1]))


def log_marginal_likelihood(data: Dataset, params: MahaKernelParams) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in packed coordinates.

    The gradient is taken with respect to ``log gamma``, ``log noise_var``
    and the raw entries of ``B`` (row-major), using
    ``d LML = 1/2 tr((alpha alpha^T - K^-1) dK)``.
    """
    if len(data) < 1:
        raise ValueError("log marginal likelihood needs at least one observation")
    X, y = data.X, data.y
    N = y.shape[0]
    Z = params.project(X)
    Kf = rbf_from_projected(params.gamma, Z, Z)
    Kf = 0.5 * (Kf + Kf.T)
    np.fill_diagonal(Kf, params.gamma**2)
    K = Kf + params.noise_var * np.eye(N)
    L, _ = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), y, check_finite=False)
    value = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * N * LOG_2PI

    Linv = solve_triangular(L, np.eye(N), lower=True, check_finite=False)
    Kinv = Linv.T @ Linv
    W = np.outer(alpha, alpha) - Kinv
    g_log_gamma = float(np.sum(W * Kf))  # dK/dlog(gamma) = 2 Kf
    g_log_noise = 0.5 * params.noise_var * float(np.trace(W))
    M = W * Kf
    s = M.sum(axis=1)
    g_B = -2.0 * (Z * s[:, None]).T @ X + 2.0 * Z.T @ (M @ X)
    return value, np.concatenate([[g_log_gamma, g_log_noise], g_B.ravel()])


def ard_log_marginal_likelihood(
    data: Dataset, gamma: float, inv_lengthscales: np.ndarray, noise_var: float
) -> tuple[float, np.ndarray]:
    """LML of an RBF-ARD GP, ``k = gamma^2 exp(-sum_k b_k^2 (x_k - x'_k)^2)``.

    Gradient coordinates are ``[log gamma, log noise_var, b_1..b_D]``.
    """
    X, y = data.X, data.y
    N = y.shape[0]
    b = np.asarray(inv_lengthscales, dtype=float)
    diff2 = (X[:, None, :] - X[None, :, :]) ** 2  # (N, N, D)
    Kf = gamma**2 * np.exp(-diff2 @ (b * b))
    K = Kf + noise_var * np.eye(N)
    L, _ = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), y)
    value = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * N * LOG_2PI
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(N))
    M = W * Kf
    g_b = -b * np.einsum("ij,ijk->k", M, diff2)
    return value, np.concatenate([[float(np.sum(M)), 0.5 * noise_var * float(np.trace(W))], g_b])


# ---------------------------------------------------------------------------
# Hyperparameter fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 500
    restarts: int = 4
    noise_floor: float = NOISE_FLOOR
    init_gamma: float = 1.0
    init_noise_var: float = 1e-2
    init_scale: float = 1.0  # B entries start as N(0, init_scale**2 / D)


def _adam_ascent(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: np.ndarray,
    cfg: AdamConfig,
    trace: Optional[list] = None,
) -> tuple[float, Optional[np.ndarray]]:
    """Maximize ``objective`` with Adam; return the best (value, theta) visited."""
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    log_floor = math.log(cfg.noise_floor)
    best_val, best_theta = -np.inf, None
    for it in range(cfg.iterations + 1):
        try:
            val, grad = objective(theta)
        except NumericalError:
            break
        if not (np.isfinite(val) and np.all(np.isfinite(grad))):
            break
        if trace is not None:
            trace.append(val)
        if val > best_val:
            best_val, best_theta = val, theta.copy()
        if it == cfg.iterations:
            break
        g = -grad
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** (it + 1))
        v_hat = v / (1 - cfg.beta2 ** (it + 1))
        theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        theta[1] = max(theta[1], log_floor)
    return best_val, best_theta


def _initial_thetas(D: int, d: int, cfg: AdamConfig, rng, init, restarts, diagonal):
    thetas = []
    if init is not None:
        thetas.append(pack_params(init) if not diagonal else _pack_diag(init))
    head = [math.log(cfg.init_gamma), math.log(max(cfg.init_noise_var, cfg.noise_floor))]
    for _ in range(restarts):
        if diagonal:
            B = rng.normal(size=D) * (cfg.init_scale / math.sqrt(D))
        else:
            B = rng.normal(size=(d, D)).ravel() * (cfg.init_scale / math.sqrt(D))
        thetas.append(np.concatenate([head, B]))
    return thetas


def _pack_diag(params: MahaKernelParams) -> np.ndarray:
    return np.concatenate([[math.log(params.gamma), math.log(params.noise_var)], np.diag(params.B)])


def fit_hyperparameters(
    data: Dataset,
    d: int,
    cfg: AdamConfig = AdamConfig(),
    rng: Optional[np.random.Generator] = None,
    *,
    init: Optional[MahaKernelParams] = None,
    restarts: Optional[int] = None,
    diagonal: bool = False,
    trace: Optional[list] = None,
) -> MahaKernelParams:
    """Maximize the marginal likelihood over ``(gamma, B, noise_var)`` with Adam.

    Each fresh restart draws ``B`` with i.i.d. ``N(0, 1/D)`` entries; ``init``
    adds one warm-started run in front of them. With ``diagonal=True`` the
    embedding is a ``D x D`` diagonal matrix and only its diagonal is
    optimized (RBF-ARD). Returns the best iterate over all runs.
    """
    if len(data) < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    rng = np.random.default_rng() if rng is None else rng
    D = data.dim
    if diagonal:
        d = D
    if not 1 <= d <= D:
        raise ValueError(f"embedding dimension d={d} must lie in [1, {D}]")
    restarts = cfg.restarts if restarts is None else restarts

    if diagonal:
        def objective(theta):
            params = MahaKernelParams(math.exp(theta[0]), np.diag(theta[2:]), math.exp(theta[1]))
            val, grad = log_marginal_likelihood(data, params)
            gB = grad[2:].reshape(D, D)
            return val, np.concatenate([grad[:2], np.diag(gB)])

        def to_params(theta):
            return MahaKernelParams(math.exp(theta[0]), np.diag(theta[2:]), math.exp(theta[1]))
    else:
        def objective(theta):
            return log_marginal_likelihood(data, unpack_params(theta, d, D))

        def to_params(theta):
            return unpack_params(theta, d, D)

    best_val, best_theta = -np.inf, None
    for theta0 in _initial_thetas(D, d, cfg, rng, init, restarts, diagonal):
        val, theta = _adam_ascent(objective, theta0, cfg, trace)
        if theta is not None and val > best_val:
            best_val, best_theta = val, theta
    if best_theta is None:
        raise NumericalError("all hyperparameter restarts failed")

    params = to_params(best_theta)
    if not params.has_full_row_rank():
        # one refit from a slightly perturbed embedding
        theta = best_theta.copy()
        theta[2:] += 1e-6 * rng.normal(size=theta.size - 2)
        val, refit = _adam_ascent(objective, theta, cfg, trace)
        if refit is not None:
            params = to_params(refit)
    return params


def fit_ard_hyperparameters(
    data: Dataset,
    cfg: AdamConfig = AdamConfig(),
    rng: Optional[np.random.Generator] = None,
    *,
    init: Optional[MahaKernelParams] = None,
    restarts: Optional[int] = None,
    trace: Optional[list] = None,
) -> MahaKernelParams:
    """Dedicated RBF-ARD fit; returns params with a diagonal ``B``."""
    if len(data) < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    rng = np.random.default_rng() if rng is None else rng
    D = data.dim
    restarts = cfg.restarts if restarts is None else restarts

    def objective(theta):
        return ard_log_marginal_likelihood(data, math.exp(theta[0]), theta[2:], math.exp(theta[1]))

    best_val, best_theta = -np.inf, None
    for theta0 in _initial_thetas(D, D, cfg, rng, init, restarts, True):
        val, theta = _adam_ascent(objective, theta0, cfg, trace)
        if theta is not None and val > best_val:
            best_val, best_theta = val, theta
    if best_theta is None:
        raise NumericalError("all hyperparameter restarts failed")
    return MahaKernelParams(math.exp(best_theta[0]), np.diag(best_theta[2:]), math.exp(best_theta[1]))
