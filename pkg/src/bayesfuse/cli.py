"""Command-line driver writing metric tables as CSV.

Each subcommand sweeps one axis and writes ``<output_dir>/<name>_<axis>.csv``
with columns ``axis_value, rule, metric_name, mean, stderr, repetitions``.
Settings come from defaults, then an optional INI file (one section per
subcommand), then command-line flags.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import experiments as ex
from .divergence import AXES, sweep

log = logging.getLogger("bayesfuse")

OUTPUT_ENV = "BAYESFUSE_OUTPUT_DIR"
COLUMNS = ("axis_value", "rule", "metric_name", "mean", "stderr", "repetitions")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

DEFAULT_GRIDS = {
    "regression": ("M", "2:50:4"),
    "lda": ("P1", ",".join([*(f"{k}/41" for k in range(1, 21)), "0.5", *(f"{k}/41" for k in range(21, 41))])),
    "bnn": ("q0", "1,2,4,9,16,25,32"),
    "federated": ("round", None),
    "kl-sweep": ("M", None),
}
KL_DEFAULT_GRIDS = {
    "M": "2:50:1",
    "q0": "1,2,3,4,9,16,25,36,64,81",
    "P1": DEFAULT_GRIDS["lda"][1],
    "round": None,
}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def parse_grid(text: str) -> tuple[float, ...]:
    """``start:stop:step`` (stop included when reached) or a comma list; ``a/b`` fractions allowed."""
    text = str(text).strip()
    try:
        if ":" in text:
            parts = [_number(p) for p in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0:
                raise ConfigError(f"range grid {text!r} needs start:stop:step with a positive step")
            start, stop, step = parts
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            grid = tuple(start + i * step for i in range(max(n, 0)))
        else:
            grid = tuple(_number(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse grid {text!r}: {exc}") from None
    if not grid:
        raise ConfigError(f"grid {text!r} is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError(f"grid {text!r} is not strictly increasing")
    return grid


def _number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/")
        return float(num) / float(den)
    return float(text)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="INI file with a section named after the subcommand")
    p.add_argument("--seed", type=int, dest="base_seed", help="base seed for all repetitions")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--output-dir", help=f"defaults to ${OUTPUT_ENV} or ./results")
    p.add_argument("--rules", help="comma-separated subset of CIL,CIP")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (results do not depend on it)")
    p.add_argument("--plot-data", action="store_true", help="also write a wide x/series table")
    p.add_argument("-v", "--verbose", action="store_true")


def _nn_flags(p: argparse.ArgumentParser):
    p.add_argument("--hidden", help="comma-separated hidden layer widths")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--activation", choices=("tanh", "relu"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bayesfuse", description="Shared-prior Bayesian fusion experiments")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("regression", help="linear-Gaussian one-shot fusion (test MSE, KL)")
    _common(p)
    p.add_argument("--M", type=int)
    p.add_argument("--M-grid")
    p.add_argument("--q0", type=float)
    p.add_argument("--q0-grid")
    p.add_argument("--noise-var", type=float, dest="model_noise_var", help="observation noise variance assumed by the model")

    p = sub.add_parser("lda", help="two-class LDA posterior fusion (accuracy, KL)")
    _common(p)
    p.add_argument("--M", type=int)
    p.add_argument("--M-grid")
    p.add_argument("--P1", type=float)
    p.add_argument("--P1-grid")

    p = sub.add_parser("bnn", help="one-shot Laplace neural-network fusion (accuracy ratios, KL)")
    _common(p)
    _nn_flags(p)
    p.add_argument("--M", type=int)
    p.add_argument("--M-grid")
    p.add_argument("--q0", type=float)
    p.add_argument("--q0-grid")

    p = sub.add_parser("federated", help="recursive fusion over communication rounds")
    _common(p)
    _nn_flags(p)
    p.add_argument("--M", type=int)
    p.add_argument("--q0", type=float)
    p.add_argument("--rounds", type=int)

    p = sub.add_parser("kl-sweep", help="KL(CIL || CIP) along one axis")
    _common(p)
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--grid")
    p.add_argument("--model", choices=("regression", "bnn"), help="model family for the M and q0 axes")
    p.add_argument("--M", type=int)
    p.add_argument("--q0", type=float)
    p.add_argument("--P1", type=float)
    p.add_argument("--rounds", type=int)

    sub.add_parser("selftest", help="run the built-in oracle and property checks")
    return parser


def _read_ini(path: Path, section: str) -> dict[str, str]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not cp.has_section(section):
        return dict(cp.defaults())
    return dict(cp.items(section))


_INI_KEYS = {
    "M": "M",
    "M_grid": "M_grid",
    "q0": "q0",
    "q0_grid": "q0_grid",
    "P1": "P1",
    "P1_grid": "P1_grid",
    "grid": "grid",
    "axis": "axis",
    "model": "model",
    "rounds": "rounds",
    "repetitions": "repetitions",
    "seed": "base_seed",
    "base_seed": "base_seed",
    "output_dir": "output_dir",
    "rules": "rules",
    "jobs": "jobs",
    "hidden": "hidden",
    "epochs": "epochs",
    "learning_rate": "learning_rate",
    "activation": "activation",
    "noise_var": "model_noise_var",
    "model_noise_var": "model_noise_var",
}
_INT_KEYS = {"M", "rounds", "repetitions", "base_seed", "jobs", "epochs"}
_FLOAT_KEYS = {"q0", "P1", "learning_rate", "model_noise_var"}


def _settings(args: argparse.Namespace) -> dict:
    """Merge the INI section with explicit flags; flags win."""
    merged: dict = {}
    if args.config is not None:
        for key, raw in _read_ini(args.config, args.command).items():
            if key not in _INI_KEYS:
                raise ConfigError(f"unknown key {key!r} in [{args.command}] of {args.config}")
            name = _INI_KEYS[key]
            try:
                merged[name] = int(raw) if name in _INT_KEYS else float(raw) if name in _FLOAT_KEYS else raw.strip()
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key!r} in {args.config}") from None
    for name, value in vars(args).items():
        if name in ("command", "config", "plot_data", "verbose") or value is None:
            continue
        merged[name] = value
    return merged


def _axis_and_grid(command: str, s: dict) -> tuple[str, tuple[float, ...] | None]:
    if command == "kl-sweep":
        axis = s.get("axis", "M")
        raw = s.get("grid", KL_DEFAULT_GRIDS[axis])
        return axis, None if raw is None else parse_grid(raw)
    given = [a for a in ("M", "q0", "P1") if f"{a}_grid" in s]
    if len(given) > 1:
        raise ConfigError(f"give at most one grid, got {', '.join(given)}")
    if given:
        return given[0], parse_grid(s[f"{given[0]}_grid"])
    axis, raw = DEFAULT_GRIDS[command]
    return axis, None if raw is None else parse_grid(raw)


def build_config(command: str, s: dict) -> tuple[ex.ExperimentConfig, str, tuple[float, ...]]:
    axis, grid = _axis_and_grid(command, s)
    kw = {}
    for name in ("M", "q0", "P1", "rounds", "repetitions", "base_seed", "epochs", "learning_rate", "activation", "model_noise_var"):
        if name in s:
            kw[name] = s[name]
    if "hidden" in s:
        try:
            kw["hidden"] = tuple(int(h) for h in str(s["hidden"]).split(",") if h.strip())
        except ValueError:
            raise ConfigError(f"bad hidden layer list {s['hidden']!r}") from None
    if "rules" in s:
        kw["rules"] = tuple(r.strip().upper() for r in str(s["rules"]).split(",") if r.strip())
    kw["output_dir"] = s.get("output_dir") or os.environ.get(OUTPUT_ENV) or "results"
    kw["axis"] = axis

    family = command
    if command == "kl-sweep":
        family = {"P1": "lda", "round": "federated"}.get(axis, s.get("model", "regression"))
    if axis == "M" and grid is not None:
        if any(g != int(g) or g < 1 for g in grid):
            raise ConfigError("agent counts must be positive integers")
    factory = {
        "regression": ex.regression_config,
        "lda": ex.lda_config,
        "bnn": ex.bnn_config,
        "federated": ex.federated_config,
    }[family]
    try:
        cfg = factory(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if axis == "round":
        grid = tuple(float(t) for t in range(1, cfg.rounds + 1)) if grid is None else grid
        if any(t != int(t) or not 1 <= t <= cfg.rounds for t in grid):
            raise ConfigError(f"round grid must hold integers in 1..{cfg.rounds}")
    if axis == "q0" and any(q <= 0 for q in grid):
        raise ConfigError("prior variances must be positive")
    if axis == "P1" and any(not 0 < p < 1 for p in grid):
        raise ConfigError("class-1 prior probabilities must lie in (0, 1)")
    return cfg, axis, grid


def _fmt(v: float) -> str:
    return repr(float(v))


def write_rows(path: Path, rows: Sequence[ex.MetricRow]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.axis_value), r.rule, r.metric_name, _fmt(r.mean), _fmt(r.stderr), r.repetitions])


def write_plot_data(path: Path, axis: str, rows: Sequence[ex.MetricRow]) -> None:
    """Wide table: one x column and one ``rule:metric`` column per series."""
    series = sorted({(r.rule, r.metric_name) for r in rows})
    xs = sorted({r.axis_value for r in rows})
    lookup = {(r.axis_value, r.rule, r.metric_name): r.mean for r in rows}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis] + [f"{rule}:{name}" for rule, name in series])
        for x in xs:
            w.writerow([_fmt(x)] + [_fmt(lookup.get((x, rule, name), float("nan"))) for rule, name in series])


def _run_experiment(command: str, cfg: ex.ExperimentConfig, axis: str, grid, jobs: int):
    if command == "kl-sweep":
        result = sweep(axis, grid, cfg)
        rows = [
            ex.MetricRow(g, ex.KL_RULE, "kl_cil_cip", v, e, cfg.repetitions)
            for g, v, e in zip(result.grid, result.values, result.stderr)
            if g not in result.failures
        ]
        return rows, dict(result.failures)
    return ex.metric_table(cfg, axis, grid, jobs)


def _summary(command: str, axis: str, rows, failures, path: Path, elapsed: float) -> str:
    lines = [f"{command}: {len({r.axis_value for r in rows})} grid points along {axis}, {len(failures)} failed, {elapsed:.1f}s -> {path}"]
    focus = [r for r in rows if r.metric_name in ("test_mse", "test_accuracy", "kl_cil_cip", "accuracy_ratio")]
    for r in focus[:40]:
        lines.append(f"  {axis}={r.axis_value:g} {r.rule:>6} {r.metric_name:<16} {r.mean:.6g} +/- {r.stderr:.2g}")
    if len(focus) > 40:
        lines.append(f"  ... {len(focus) - 40} more rows in the CSV")
    for g, msg in failures.items():
        lines.append(f"  FAILED {axis}={g:g}: {msg}")
    return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"bayesfuse: configuration error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "selftest":
        from .selftest import run_selftest

        return EXIT_OK if run_selftest() else EXIT_RUNTIME

    try:
        settings = _settings(args)
        cfg, axis, grid = build_config(args.command, settings)
    except ConfigError as exc:
        print(f"bayesfuse: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(cfg.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"bayesfuse: cannot create output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    start = time.perf_counter()
    rows, failures = _run_experiment(args.command, cfg, axis, grid, int(settings.get("jobs", 1)))
    stem = f"{args.command.replace('-', '_')}_{axis}"
    path = out_dir / f"{stem}.csv"
    try:
        write_rows(path, rows)
        if args.plot_data:
            write_plot_data(out_dir / f"{stem}_plot.csv", axis, rows)
    except OSError as exc:
        print(f"bayesfuse: cannot write results to {out_dir}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(_summary(args.command, axis, rows, failures, path, time.perf_counter() - start))
    if failures:
        print(f"bayesfuse: {len(failures)} configuration point(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
