"""Command line entry point: ``mahabo run``, ``mahabo summarize`` and ``mahabo selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from .harness import METHODS, ConfigError, ExperimentConfig, load_logs, run_experiment, summarize

OUT_ENV = "MAHABO_OUT_DIR"
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# CLI flag -> ExperimentConfig field
RUN_FLAGS = {
    "function": "function",
    "dim": "D",
    "embed_dim": "d",
    "method": "method",
    "batch": "n_batch",
    "budget": "budget",
    "n_init": "n_init",
    "seeds": "seeds",
    "acquisition": "acquisition",
    "beta": "beta",
    "noise_sd": "noise_sd",
    "external": "external_command",
}


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive), ``"1,3,7"`` or a single integer."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse seeds {text!r}; use e.g. 0..4 or 1,3,7") from None
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mahabo", description="Batch Bayesian optimization with learned linear embeddings")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run seeded trials and write one log per seed")
    run.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields; flags override it")
    run.add_argument("--function", help="benchmark name (branin, colville, goldstein-price, hartmann6, six-hump-camel)")
    run.add_argument("--dim", type=int, help="ambient dimension D")
    run.add_argument("--embed-dim", type=int, help="embedding dimension d")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--batch", type=int, help="queries per round")
    run.add_argument("--budget", type=int, help="number of rounds after the initial design")
    run.add_argument("--n-init", type=int, help="initial Sobol points")
    run.add_argument("--seeds", type=parse_seeds, help="e.g. 0..4 or 1,3,7")
    run.add_argument("--acquisition", choices=("est", "lcb"))
    run.add_argument("--beta", type=float, help="fixed beta for --acquisition lcb")
    run.add_argument("--noise-sd", type=float, help="observation noise standard deviation")
    run.add_argument("--external", help="command of an external objective speaking the line protocol")
    run.add_argument("--workers", type=int, default=1, help="parallel trials")
    run.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")

    summ = sub.add_parser("summarize", help="aggregate trial logs into a table and plot data")
    summ.add_argument("directory", type=Path)
    summ.add_argument("--format", choices=("csv", "json"), default="csv")
    summ.add_argument("--out", type=Path, default=None, help="where to write (default: the log directory)")

    sub.add_parser("selftest", help="run a quick property smoke suite")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read --config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("--config must hold a JSON object")
    for flag, name in RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            raw[name] = value
    return ExperimentConfig.from_dict(raw).validate()


def cmd_run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
    logs = run_experiment(cfg, out, workers=args.workers)
    for trial in logs:
        print(f"seed {trial.seed}: best {trial.final_best:.6g}")
    print(f"wrote {len(logs)} logs to {out}")
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    logs = load_logs(args.directory)
    if not logs:
        raise ConfigError(f"no trial logs found in {args.directory}")
    groups = defaultdict(list)
    for trial in logs:
        try:
            label = ExperimentConfig.from_dict(trial.config).label if trial.config else "trials"
        except ConfigError:
            label = "trials"
        groups[label].append(trial)
    out = args.out or args.directory
    out.mkdir(parents=True, exist_ok=True)
    single = len(groups) == 1
    for label, group in sorted(groups.items()):
        s = summarize(group)
        stem = "summary" if single else f"summary_{label}"
        if args.format == "csv":
            (out / f"{stem}.csv").write_text(s.to_csv())
        else:
            table = {"round": s.rounds.tolist(), "mean_best": s.mean_best.tolist(), "se_best": s.se_best.tolist()}
            (out / f"{stem}.json").write_text(json.dumps(table, indent=1))
        plot = "plot_data" if single else f"plot_data_{label}"
        (out / f"{plot}.json").write_text(json.dumps(s.plot_data(), indent=1))
        print(f"{label}\t{len(group)} trials\t{s.final_row()}")
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    from . import selftest

    ok = selftest.run(print)
    return 0 if ok else EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    handlers = {"run": cmd_run, "summarize": cmd_summarize, "selftest": cmd_selftest}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"mahabo: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # anything else is a runtime failure
        print(f"mahabo: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
