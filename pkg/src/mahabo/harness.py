"""Seeded experiment driver: trials, logs and summary statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .acquisition import AcquisitionSpec, OptimizerConfig, est_beta
from .benchmarks import ExternalObjective, eval_objective, get_base_function, make_embedded_problem, sobol_init
from .dpp import DppConfig, RegionDegenerateError, select_batch
from .embedding import two_step_select
from .gp import AdamConfig, BoxDomain, Dataset, NumericalError, fit_ard_hyperparameters, fit_hyperparameters, fit_posterior

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("maha-one-step", "maha-pinv", "maha-random", "rbf-ard")
CSV_COLUMNS = ("schema_version", "seed", "round", "batch_index", "x_digest", "y", "best_so_far", "wall_ms", "flags")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    function: str = "branin"
    D: int = 100
    d: int = 2
    method: str = "maha-one-step"
    n_init: int = 10
    n_batch: int = 1
    budget: int = 20  # rounds after the initial design
    seeds: list = field(default_factory=lambda: [0])
    acquisition: str = "est"
    beta: float = 2.0  # used when acquisition == "lcb"
    noise_sd: float = 0.0
    est_candidates: int = 1000
    sobol_scramble: bool = False
    max_evals: int = 5000
    warm_iterations: Optional[int] = 200
    external_command: Optional[str] = None
    # smaller B init than the fitting default: same LML objective, better optima at N < D
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(init_scale=0.1))
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(raw_samples=512))
    dpp: DppConfig = field(default_factory=DppConfig)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.D < 1:
            raise ConfigError("--dim must be positive")
        if self.method != "rbf-ard" and not 1 <= self.d <= self.D:
            raise ConfigError(f"--dim ({self.D}) must be at least --embed-dim ({self.d}), and --embed-dim at least 1")
        if self.n_init < 2:
            raise ConfigError("n_init must be at least 2")
        if self.n_batch < 1 or self.budget < 0:
            raise ConfigError("batch size must be positive and budget nonnegative")
        if self.budget * self.n_batch + self.n_init > self.max_evals:
            raise ConfigError(
                f"budget*batch + n_init = {self.budget * self.n_batch + self.n_init} exceeds the cap {self.max_evals}"
            )
        if self.acquisition not in ("est", "lcb"):
            raise ConfigError("acquisition must be 'est' or 'lcb'")
        if self.external_command is None:
            try:
                base = get_base_function(self.function)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if self.D < base.d_true:
                raise ConfigError(f"--dim ({self.D}) is below the intrinsic dimension of {self.function}")
        return self

    @property
    def label(self) -> str:
        d = "ard" if self.method == "rbf-ard" else f"d{self.d}"
        return f"{self.function}_D{self.D}_{self.method}_{d}_B{self.n_batch}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        try:
            defaults = {f.name: f.default_factory() for f in fields(cls) if f.name in ("adam", "optimizer", "dpp")}
            for key, base in defaults.items():
                if isinstance(raw.get(key), dict):
                    raw[key] = replace(base, **raw[key])
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def _key(part) -> int:
    return part if isinstance(part, int) else zlib.crc32(str(part).encode())


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; unrelated keys never share state."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(_key(k) for k in keys)]))


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------


def x_digest(x: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class TrialLog:
    config: dict
    seed: int
    records: list = field(default_factory=list)
    points: list = field(default_factory=list)

    def add(self, round_: int, batch_index: int, x: np.ndarray, y: float, wall_ms: float, flags=()) -> None:
        best = min(y, self.records[-1]["best_so_far"]) if self.records else y
        self.records.append(
            {
                "schema_version": SCHEMA_VERSION,
                "seed": self.seed,
                "round": round_,
                "batch_index": batch_index,
                "x_digest": x_digest(x),
                "y": float(y),
                "best_so_far": float(best),
                "wall_ms": float(wall_ms),
                "flags": "|".join(flags),
            }
        )
        self.points.append([float(v) for v in x])

    @property
    def best_by_round(self) -> dict[int, float]:
        out = {}
        for r in self.records:
            out[r["round"]] = r["best_so_far"]
        return out

    @property
    def final_best(self) -> float:
        return self.records[-1]["best_so_far"]

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        cols = CSV_COLUMNS if timing else tuple(c for c in CSV_COLUMNS if c != "wall_ms")
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "config": self.config, "x": self.points}

    def write(self, directory: Path, stem: str) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        csv_path.write_text(self.to_csv())
        (directory / f"{stem}.json").write_text(json.dumps(self.sidecar()))
        return csv_path

    @classmethod
    def read_csv(cls, path: Path) -> "TrialLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path} has no records")
        records = []
        for row in rows:
            records.append(
                {
                    "schema_version": int(row["schema_version"]),
                    "seed": int(row["seed"]),
                    "round": int(row["round"]),
                    "batch_index": int(row["batch_index"]),
                    "x_digest": row["x_digest"],
                    "y": float(row["y"]),
                    "best_so_far": float(row["best_so_far"]),
                    "wall_ms": float(row["wall_ms"]),
                    "flags": row["flags"],
                }
            )
        sidecar = path.with_suffix(".json")
        config, points = {}, []
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            config, points = meta.get("config", {}), meta.get("x", [])
        return cls(config, records[0]["seed"], records, points)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


def _fit_params(cfg: ExperimentConfig, data: Dataset, prev, rng):
    adam = cfg.adam
    restarts = None
    if prev is not None:
        restarts = 1
        if cfg.warm_iterations is not None:
            adam = replace(adam, iterations=cfg.warm_iterations)
    if cfg.method == "rbf-ard":
        return fit_ard_hyperparameters(data, adam, rng, init=prev, restarts=restarts)
    return fit_hyperparameters(data, cfg.d, adam, rng, init=prev, restarts=restarts)


def select_round(cfg: ExperimentConfig, post, domain: BoxDomain, rng: np.random.Generator):
    """Queries for one round and the flags raised while choosing them."""
    if cfg.acquisition == "lcb":
        spec = AcquisitionSpec(cfg.beta)
    else:
        spec = None
    if cfg.method in ("maha-one-step", "rbf-ard"):
        if spec is None:
            spec = est_beta(post, domain, cfg.est_candidates, rng)
        res = select_batch(post, domain, cfg.n_batch, spec, cfg.optimizer, cfg.dpp, rng)
        return res.points, res.flags
    strategy = "pinv" if cfg.method == "maha-pinv" else "randomized"
    res = two_step_select(post, domain, cfg.n_batch, strategy, cfg.optimizer, cfg.dpp, rng, spec)
    return res.points, res.flags


def run_trial(
    cfg: ExperimentConfig,
    seed: int,
    objective: Optional[Callable[[np.ndarray], float]] = None,
) -> TrialLog:
    """One seeded optimization run; deterministic given ``(cfg, seed)``.

    The embedded problem and the initial design depend on the seed only, so
    every method sees the same problem for the same seed.
    """
    cfg.validate()
    domain = BoxDomain.cube(cfg.D)
    if objective is None:
        problem = make_embedded_problem(get_base_function(cfg.function), cfg.D, cfg.noise_sd, stream(seed, "problem"))

        def objective(x, rng):
            return eval_objective(problem, x, rng)
    else:
        user = objective

        def objective(x, rng):
            return user(x)

    trial = TrialLog(cfg.to_dict(), seed)
    data = Dataset.empty(cfg.D, domain)

    t0 = time.perf_counter()
    X0 = sobol_init(domain, cfg.n_init, seed, cfg.sobol_scramble)
    for b, x in enumerate(X0):
        y = objective(x, stream(seed, "noise", 0, b))
        data.append(x, y)
        trial.add(0, b, x, y, 1000 * (time.perf_counter() - t0))

    params = None
    for t in range(1, cfg.budget + 1):
        t0 = time.perf_counter()
        flags: tuple = ()
        try:
            std, _, _ = data.standardized()
            params = _fit_params(cfg, std, params, stream(seed, "fit", t))
            post = fit_posterior(std, params)
            X_new, flags = select_round(cfg, post, domain, stream(seed, "select", t))
            if X_new.shape != (cfg.n_batch, cfg.D) or not np.all(domain.contains(X_new)):
                raise NumericalError("selection produced an invalid batch")
        except (NumericalError, RegionDegenerateError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("seed %s round %s: %s; using random queries", seed, t, exc)
            X_new = domain.sample(cfg.n_batch, stream(seed, "fallback", t))
            flags = ("fallback_random",)
        for b, x in enumerate(X_new):
            y = objective(x, stream(seed, "noise", t, b))
            data.append(x, y)
            trial.add(t, b, x, y, 1000 * (time.perf_counter() - t0), flags)
    return trial


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Optional[Path] = None,
    workers: int = 1,
) -> list[TrialLog]:
    """All seeds of ``cfg``; trials are independent and may run in parallel."""
    cfg.validate()
    objective = None
    ext = None
    if cfg.external_command:
        ext = ExternalObjective(cfg.external_command, cfg.D)
        objective = ext
        workers = 1
    try:
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(workers) as pool:
                logs = list(pool.map(run_trial, [cfg] * len(cfg.seeds), cfg.seeds))
        else:
            logs = [run_trial(cfg, s, objective) for s in cfg.seeds]
    finally:
        if ext is not None:
            ext.close()
    if out_dir is not None:
        for trial in logs:
            trial.write(Path(out_dir), f"{cfg.label}_seed{trial.seed}")
    return logs


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass
class Summary:
    rounds: np.ndarray
    mean_best: np.ndarray
    se_best: np.ndarray
    n_trials: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.mean_best - self.se_best

    @property
    def upper(self) -> np.ndarray:
        return self.mean_best + self.se_best

    def final_row(self) -> str:
        return format_mean_se(self.mean_best[-1], self.se_best[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "mean_best", "se_best"])
        for r, m, s in zip(self.rounds, self.mean_best, self.se_best):
            writer.writerow([int(r), repr(float(m)), repr(float(s))])
        return buf.getvalue()

    def plot_data(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "round": self.rounds.tolist(),
            "mean_best": self.mean_best.tolist(),
            "lower_68": self.lower.tolist(),
            "upper_68": self.upper.tolist(),
            "n_trials": self.n_trials.tolist(),
        }


def format_mean_se(mean: float, se: float) -> str:
    return f"{mean:.2f} ± {se:.2f}"


def summarize(logs: Sequence[TrialLog]) -> Summary:
    """Per-round mean of best-so-far with its standard error across trials."""
    if not logs:
        raise ValueError("nothing to summarize")
    per_trial = [trial.best_by_round for trial in logs]
    rounds = sorted(set().union(*per_trial))
    means, ses, counts = [], [], []
    for r in rounds:
        vals = np.array([b[r] for b in per_trial if r in b])
        means.append(vals.mean())
        ses.append(vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0)
        counts.append(vals.size)
    return Summary(np.array(rounds), np.array(means), np.array(ses), np.array(counts))


def _is_trial_csv(path: Path) -> bool:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    return tuple(header.split(",")) == CSV_COLUMNS


def load_logs(directory: Path) -> list[TrialLog]:
    """Trial logs found in ``directory``; summary files and other CSVs are skipped."""
    paths = sorted(Path(directory).glob("*.csv"))
    return [TrialLog.read_csv(p) for p in paths if _is_trial_csv(p)]
