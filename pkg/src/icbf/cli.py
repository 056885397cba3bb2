"""Command-line scenario runner.

Usage::

    icbf run CONFIG         simulate the configured controller variants
    icbf selftest [--seed]  run the built-in property checks
    icbf print-defaults     show every config key with its default

Configs are flat ``key = value`` files; ``#`` starts a comment. Exit codes:
0 ok, 1 config error, 2 simulation halted, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import importlib
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .acc import CHANNELS, PREDICTOR_MODES, VARIANTS, AccParams, build_acc_scenario
from .controllers import HALT, ZERO, tracking_error_metrics
from .core import AugmentedState, EvaluationError
from .integrator import IntegrationError, SimulationHalted, Trajectory, simulate
from .minnorm import RelativeDegreeError

EXIT_OK, EXIT_CONFIG, EXIT_HALT, EXIT_IO = 0, 1, 2, 3
CONTROLLERS = VARIANTS + ("all",)
SCENARIOS = ("acc", "custom")
PARAM_KEYS = tuple(f.name for f in dataclasses.fields(AccParams))


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key + ': ' if key else ''}{message}")


def _positive(v):
    return v > 0


def _choice(options):
    def check(v):
        return v in options
    check.options = options
    return check


# key -> (type, default, check or None, description)
_SCHEMA = {
    "scenario": (str, "acc", _choice(SCENARIOS), "acc, or custom with a factory"),
    "factory": (str, "", None, "module:callable returning a scenario (scenario=custom)"),
    "controller": (str, "combined", _choice(CONTROLLERS), "variant to run"),
    "dt": (float, 1e-3, _positive, "integration step (s)"),
    "t_end": (float, 40.0, _positive, "horizon (s)"),
    "predictor_mode": (str, "exact_linear", _choice(PREDICTOR_MODES), "ACC output predictor"),
    "infeasibility_policy": (str, HALT, _choice((HALT, ZERO)), "halt, or zero (continue with v = 0, unsafe)"),
    "output_dir": (str, "icbf_out", None, "directory for CSV and summary files"),
    "seed": (int, 0, None, "seed for selftest"),
    "x1_0": (float, 0.0, None, "initial position (m)"),
    "x2_0": (float, 20.0, None, "initial speed (m/s)"),
    "x3_0": (float, 100.0, None, "initial gap (m)"),
    "u_0": (float, 0.0, None, "initial wheel force (N)"),
    "r_amp": (float, 0.0, None, "amplitude of the sinusoidal speed reference offset (m/s)"),
    "r_freq": (float, 0.2, None, "frequency of the reference offset (rad/s)"),
    "tail_fraction": (float, 0.25, lambda v: 0 < v <= 1, "trailing window for the tracking metric"),
}
for _f in dataclasses.fields(AccParams):
    _SCHEMA[_f.name] = (float, _f.default, None, "vehicle parameter")


@dataclass
class RunConfig:
    values: Dict[str, object]
    explicit: List[str] = field(default_factory=list)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def defaults_applied(self) -> List[str]:
        return [k for k in _SCHEMA if k not in self.explicit]

    def params(self) -> AccParams:
        return AccParams(**{k: self.values[k] for k in PARAM_KEYS})

    def variants(self) -> List[str]:
        return list(VARIANTS) if self.controller == "all" else [self.controller]


def defaults() -> Dict[str, object]:
    return {k: spec[1] for k, spec in _SCHEMA.items()}


def _convert(key: str, raw: str, line: Optional[int]):
    typ, _, check, _ = _SCHEMA[key]
    try:
        if typ is int:
            value = int(raw)
        elif typ is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"expected {typ.__name__}, got {raw!r}", key, line) from None
    if check is not None and not check(value):
        options = getattr(check, "options", None)
        hint = f"one of {', '.join(options)}" if options else "out of range"
        raise ConfigError(f"invalid value {raw!r} ({hint})", key, line)
    return value


def parse_config_text(text: str) -> RunConfig:
    values = defaults()
    explicit, lines = [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected key = value, got {content!r}", None, lineno)
        key, val = (s.strip() for s in content.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError("unknown key", key, lineno)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        values[key] = _convert(key, val, lineno)
        explicit.append(key)
        lines[key] = lineno

    if not values["t_end"] >= values["dt"]:
        raise ConfigError("t_end must be at least dt", "t_end", lines.get("t_end"))
    if values["scenario"] == "custom" and not values["factory"]:
        raise ConfigError("scenario=custom requires a factory", "factory", None)
    try:
        AccParams(**{k: values[k] for k in PARAM_KEYS})
    except ValueError as exc:
        key = str(exc).split()[0]
        raise ConfigError(str(exc), key, lines.get(key)) from None
    return RunConfig(values, explicit)


def parse_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else "%.17g" % v


def write_trajectory_csv(traj: Trajectory, path: str) -> None:
    """Write ``t, x1..xn, u1..um`` plus the diagnostic channels, one row per step."""
    header = ["t"] + [f"x{i + 1}" for i in range(traj.n)] + [f"u{j + 1}" for j in range(traj.m)] + list(CHANNELS)
    K = len(traj)
    missing = np.full(K, np.nan)
    cols = [traj.times] + [traj.x[:, i] for i in range(traj.n)] + [traj.u[:, j] for j in range(traj.m)]
    cols += [traj.aux.get(c, missing) for c in CHANNELS]
    table = np.column_stack(cols).tolist()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(map(_fmt, row)) + "\n")


def read_trajectory_csv(path: str) -> Dict[str, np.ndarray]:
    """Parse a CSV written by :func:`write_trajectory_csv`; empty fields become NaN."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) if v else np.nan for v in line.rstrip("\n").split(",")] for line in fh]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, j] for j, name in enumerate(header)}


def _nanmin(a) -> Optional[float]:
    a = np.asarray(a, dtype=float)
    return None if a.size == 0 or np.isnan(a).all() else float(np.nanmin(a))


def build_scenario(cfg: RunConfig):
    if cfg.scenario == "custom":
        module, _, attr = cfg.factory.partition(":")
        try:
            factory = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError, ValueError) as exc:
            raise ConfigError(f"cannot load {cfg.factory!r}: {exc}", "factory") from None
        return factory(cfg)
    z0 = AugmentedState(np.array([cfg.x1_0, cfg.x2_0, cfg.x3_0]), np.array([cfg.u_0]))
    return build_acc_scenario(cfg.params(), cfg.predictor_mode, z0, cfg.infeasibility_policy,
                              cfg.r_amp, cfg.r_freq)


def run_variant(scenario, name: str, cfg: RunConfig):
    """Simulate one variant; returns ``(trajectory, halt_reason or None)``."""
    variant = scenario.controllers[name]
    try:
        traj = simulate(variant.rhs, scenario.z0, cfg.t_end, cfg.dt, variant.channels)
        return traj, None
    except SimulationHalted as exc:
        return exc.trajectory, f"t={exc.t!r}: {exc.reason}"
    except IntegrationError as exc:
        return exc.trajectory, f"t={exc.t!r}: {exc}"
    except (RelativeDegreeError, EvaluationError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def summarize(traj: Optional[Trajectory], scenario, cfg: RunConfig, wall: float, halt: Optional[str]) -> dict:
    out = {"halted": halt is not None, "halt_reason": halt, "wall_time_s": wall}
    if traj is None or len(traj) == 0:
        return out
    aux = traj.aux
    out["steps"] = len(traj)
    out["min_h_x"] = _nanmin(aux.get("h_x", []))
    out["min_h_u"] = _nanmin(aux.get("h_u", []))
    out["min_h_e"] = _nanmin(aux.get("h_e", []))
    out["max_abs_u"] = float(np.max(np.linalg.norm(traj.u, axis=1)))
    if "feasible" in aux and not np.isnan(aux["feasible"]).all():
        out["infeasible_steps"] = int(np.sum(aux["feasible"] == 0.0))
    else:
        out["infeasible_steps"] = 0
    if len(traj) > 1:
        err, eta2 = tracking_error_metrics(traj, scenario.reference, lambda x: np.atleast_1d(scenario.output(x)),
                                           cfg.tail_fraction)
        out["sup_tail_error"] = err
        out["eta2_estimate"] = eta2
    return out


def run(cfg: RunConfig, stream=None) -> int:
    scenario = build_scenario(cfg)
    try:
        os.makedirs(cfg.output_dir, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {cfg.output_dir}: {exc}", file=sys.stderr)
        return EXIT_IO

    summary = {"config": dict(cfg.values), "defaults_applied": cfg.defaults_applied, "controllers": {}}
    combined = getattr(scenario, "combined_filter", None)
    if combined is not None and "combined" in cfg.variants():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            problems = combined.check_initial(scenario.z0.x, scenario.z0.u)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        summary["initial_condition_violations"] = problems

    status = EXIT_OK
    for name in cfg.variants():
        start = time.perf_counter()
        traj, halt = run_variant(scenario, name, cfg)
        wall = time.perf_counter() - start
        entry = summarize(traj, scenario, cfg, wall, halt)
        if traj is not None:
            path = os.path.join(cfg.output_dir, f"{name}.csv")
            try:
                write_trajectory_csv(traj, path)
            except OSError as exc:
                print(f"error: cannot write {path}: {exc}", file=sys.stderr)
                return EXIT_IO
            entry["csv"] = path
        summary["controllers"][name] = entry
        line = f"{name}: {len(traj) if traj is not None else 0} steps in {wall:.2f}s"
        if halt:
            line += f", halted ({halt})"
            status = EXIT_HALT
        print(line, file=stream or sys.stdout)

    path = os.path.join(cfg.output_dir, "summary.json")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, allow_nan=True)
            fh.write("\n")
    except OSError as exc:
        print(f"error: cannot write {path}: {exc}", file=sys.stderr)
        return EXIT_IO
    return status


def print_defaults(stream=None) -> None:
    for key, (typ, default, _, desc) in _SCHEMA.items():
        print(f"{key} = {default}  # {typ.__name__}: {desc}", file=stream or sys.stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="icbf", description="Integral CBF scenario runner")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="simulate a config file")
    p_run.add_argument("config")
    p_self = sub.add_parser("selftest", help="run the built-in property checks")
    p_self.add_argument("--seed", type=int, default=0)
    sub.add_parser("print-defaults", help="list config keys and defaults")
    args = parser.parse_args(argv)

    if args.command == "print-defaults":
        print_defaults()
        return EXIT_OK
    if args.command == "selftest":
        from .selftest import run_selftest
        return EXIT_OK if run_selftest(args.seed) else EXIT_HALT
    try:
        cfg = parse_config(args.config)
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO
    except UnicodeDecodeError as exc:
        print(f"error: {args.config} is not UTF-8: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
