"""Benchmark functions embedded in high-dimensional boxes.

Base functions are defined on their usual native domains and exposed on
``[-1, 1]^d_true`` through an affine rescale. An embedded problem draws a
Gaussian matrix, normalizes each row to unit L1 norm and evaluates
``f(x) = f_base(A x)`` on ``[-1, 1]^D``; the normalization keeps ``A x``
inside ``[-1, 1]^d_true``.
"""

from __future__ import annotations

import math
import shlex
import subprocess
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .gp import BoxDomain


# ---------------------------------------------------------------------------
# Base functions (native coordinates)
# ---------------------------------------------------------------------------


def branin(x) -> float:
    x1, x2 = x
    b = 5.1 / (4 * math.pi**2)
    c = 5 / math.pi
    t = 1 / (8 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * math.cos(x1) + 10


def colville(x) -> float:
    x1, x2, x3, x4 = x
    return (
        100 * (x1**2 - x2) ** 2
        + (x1 - 1) ** 2
        + (x3 - 1) ** 2
        + 90 * (x3**2 - x4) ** 2
        + 10.1 * ((x2 - 1) ** 2 + (x4 - 1) ** 2)
        + 19.8 * (x2 - 1) * (x4 - 1)
    )


def goldstein_price(x) -> float:
    x1, x2 = x
    a = 1 + (x1 + x2 + 1) ** 2 * (19 - 14 * x1 + 3 * x1**2 - 14 * x2 + 6 * x1 * x2 + 3 * x2**2)
    b = 30 + (2 * x1 - 3 * x2) ** 2 * (18 - 32 * x1 + 12 * x1**2 + 48 * x2 - 36 * x1 * x2 + 27 * x2**2)
    return a * b


_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H6_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ]
)
_H6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)


def hartmann6(x) -> float:
    x = np.asarray(x, dtype=float)
    inner = np.sum(_H6_A * (x - _H6_P) ** 2, axis=1)
    return -float(_H6_ALPHA @ np.exp(-inner))


def six_hump_camel(x) -> float:
    x1, x2 = x
    return (4 - 2.1 * x1**2 + x1**4 / 3) * x1**2 + x1 * x2 + (-4 + 4 * x2**2) * x2**2


@dataclass(frozen=True)
class BaseFunction:
    name: str
    d_true: int
    native_domain: BoxDomain
    eval: Callable[[np.ndarray], float]
    minimum: float

    def to_native(self, u) -> np.ndarray:
        """Map ``[-1, 1]^d_true`` affinely onto the native domain."""
        return self.native_domain.center + np.asarray(u, dtype=float) * self.native_domain.half_width

    def eval_normalized(self, u) -> float:
        return float(self.eval(self.to_native(u)))


def _box(lo, hi) -> BoxDomain:
    return BoxDomain(np.array(lo, dtype=float), np.array(hi, dtype=float))


BASE_FUNCTIONS: dict[str, BaseFunction] = {
    "branin": BaseFunction("branin", 2, _box([-5, 0], [10, 15]), branin, 0.397887),
    "colville": BaseFunction("colville", 4, _box([-10] * 4, [10] * 4), colville, 0.0),
    "goldstein-price": BaseFunction("goldstein-price", 2, _box([-2, -2], [2, 2]), goldstein_price, 3.0),
    "hartmann6": BaseFunction("hartmann6", 6, _box([0] * 6, [1] * 6), hartmann6, -3.32237),
    "six-hump-camel": BaseFunction("six-hump-camel", 2, _box([-3, -2], [3, 2]), six_hump_camel, -1.0316),
}


def get_base_function(name: str) -> BaseFunction:
    try:
        return BASE_FUNCTIONS[name.lower().replace("_", "-")]
    except KeyError:
        raise ValueError(f"unknown function {name!r}; choose from {sorted(BASE_FUNCTIONS)}") from None


# ---------------------------------------------------------------------------
# Embedded problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddedProblem:
    A: np.ndarray
    base: BaseFunction
    noise_sd: float = 0.0

    @property
    def D(self) -> int:
        return self.A.shape[1]

    @property
    def domain(self) -> BoxDomain:
        return BoxDomain.cube(self.D)

    def noiseless(self, x) -> float:
        return self.base.eval_normalized(self.A @ np.asarray(x, dtype=float))


def normalize_rows(A_raw: np.ndarray) -> np.ndarray:
    return A_raw / np.sum(np.abs(A_raw), axis=1, keepdims=True)


def make_embedded_problem(
    base: BaseFunction, D: int, noise_sd: float, rng: np.random.Generator
) -> EmbeddedProblem:
    if D < base.d_true:
        raise ValueError(f"D={D} is smaller than the intrinsic dimension {base.d_true}")
    A = normalize_rows(rng.standard_normal((base.d_true, D)))
    return EmbeddedProblem(A, base, noise_sd)


def eval_objective(problem: EmbeddedProblem, x, rng: Optional[np.random.Generator] = None) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.D,):
        raise ValueError(f"expected a point of length {problem.D}")
    if not problem.domain.contains(x):
        raise ValueError("point lies outside [-1, 1]^D")
    value = problem.noiseless(x)
    if problem.noise_sd > 0:
        if rng is None:
            raise ValueError("a random generator is required for noisy evaluation")
        value += problem.noise_sd * rng.standard_normal()
    return value


# ---------------------------------------------------------------------------
# Initial designs
# ---------------------------------------------------------------------------


def sobol_init(domain: BoxDomain, n: int, seed: Optional[int] = None, scramble: bool = False) -> np.ndarray:
    """First ``n`` Sobol points scaled to the box.

    Unscrambled by default (Joe-Kuo direction numbers), with the leading zero
    point skipped; ``seed`` only matters when ``scramble`` is set.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        engine = qmc.Sobol(domain.dim, scramble=scramble, seed=seed)
        if not scramble:
            engine.fast_forward(1)
        u = engine.random(n)
    return domain.lower + u * (domain.upper - domain.lower)


# ---------------------------------------------------------------------------
# External objectives
# ---------------------------------------------------------------------------


class ExternalObjective:
    """Objective evaluated by a child process over a line protocol.

    The child reads one whitespace-separated vector per line on stdin and
    answers with one number per line on stdout.
    """

    def __init__(self, command, dim: int):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.dim = dim
        self._proc: Optional[subprocess.Popen] = None

    @property
    def domain(self) -> BoxDomain:
        return BoxDomain.cube(self.dim)

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point of length {self.dim}")
        proc = self._ensure()
        proc.stdin.write(" ".join(repr(float(v)) for v in x) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if not line:
            raise RuntimeError(f"external objective {self.command[0]!r} closed its output")
        return float(line.strip())

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
