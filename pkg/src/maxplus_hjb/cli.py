"""Command-line front end.

Configuration is a flat INI file.  Every key has a default, so an empty file
describes the full uncertain-correlation butterfly run::

    [problem]
    d = 2
    T = 0.25
    h = 0.05
    epsilon = 0.75
    state_box = 20 80; 30 70

    [mode.low]
    sigma1 = 0.4
    sigma2 = 0.3
    rho = -0.8

    [sampling]
    N_in = 1000
    N_rg = 10000
    N_x = 10
    N_w = 1000
    method = 2

Vectors are whitespace separated, matrix rows are separated by ``;``.
Without any ``[mode.*]`` section the two correlation modes ``rho=-0.8`` and
``rho=0.8`` are used.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ControlMode, ProblemSpec, correlation_mode, correlation_parameters
from .oracle_bench import (
    BenchmarkCase,
    EvaluationGrid,
    format_table,
    oracle_constant_mode,
    run_benchmark,
    write_figure_csv,
    write_table_csv,
)
from .quadform import RidgePayoff, approximate_payoff, write_csv
from .sampling import SamplePlan
from .solver import (
    THREADS_ENV,
    argmax_mode,
    backward_solve,
    evaluate_value,
    result_manifest,
    write_manifest,
    write_value_sets,
)


class ConfigError(ValueError):
    """Invalid configuration; ``section`` and ``key`` locate the problem."""

    def __init__(self, section: str, key: str, message: str):
        super().__init__(f"[{section}] {key}: {message}" if key else f"[{section}] {message}")
        self.section = section
        self.key = key


DEFAULT_RHOS = (-0.8, 0.8)

# section -> key -> default (None means "not set")
DEFAULTS: dict[str, dict[str, object]] = {
    "problem": {
        "d": 2,
        "T": 0.25,
        "h": 0.05,
        "epsilon": 0.75,
        "state_box": "20 80; 30 70",
        "guard_low": 1e-8,
    },
    "payoff": {
        "K1": -5.0,
        "K2": 5.0,
        "direction": "1 -1",
        "band": "-100 100",
        "n_forms": 601,
        "c_kink": 3.0,
        "transverse": 1e-8,
        "target_eps": 0.05,
        "transverse_radius": 150.0,
        "adaptive": True,
        "c_min": 1e-3,
    },
    "sampling": {
        "N_in": 1000,
        "N_rg": 10000,
        "N_x": 10,
        "N_w": 1000,
        "method": 2,
        "moment_match": True,
    },
    "run": {
        "seed": 1,
        "threads": None,
        "out_dir": "out",
        "xi1_range": "20 80",
        "xi1_step": 1.0,
        "xi2": 50.0,
        "oracle_nodes": 64,
        "benchmark_seeds": "1",
        "outputs": "value_sets manifest grid",
    },
}

MODE_KEYS_CORRELATION = ("sigma1", "sigma2", "rho")
MODE_KEYS_GENERAL = ("drift_matrix", "drift_offset", "sigma_const", "sigma_lin", "delta")
OUTPUT_NAMES = ("value_sets", "manifest", "grid")


@dataclass
class RunOptions:
    seed: int = 1
    threads: Optional[int] = None
    out_dir: str = "out"
    grid: EvaluationGrid = EvaluationGrid()
    oracle_nodes: int = 64
    benchmark_seeds: tuple = (1,)
    outputs: tuple = OUTPUT_NAMES


@dataclass
class Config:
    """Fully resolved configuration (every key present)."""

    values: dict
    modes: dict  # label -> {key: str}
    spec: ProblemSpec = field(repr=False)
    plan: SamplePlan = field(repr=False)
    run: RunOptions = field(repr=False)
    payoff_error: float = 0.0


# -- value parsing -------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _vector(text: str, section: str, key: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.replace(",", " ").split()], dtype=float)
    except ValueError:
        raise ConfigError(section, key, f"expected numbers, got {text!r}") from None


def _matrix(text: str, section: str, key: str) -> np.ndarray:
    rows = [_vector(r, section, key) for r in text.split(";") if r.strip()]
    if not rows or len({r.size for r in rows}) != 1:
        raise ConfigError(section, key, "matrix rows must be nonempty and of equal length")
    return np.vstack(rows)


def _number(raw, kind, section: str, key: str):
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            f = float(raw)
            if f != int(f):
                raise ValueError
            return int(f)
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(section, key, f"expected {kind.__name__}, got {raw!r}") from None


# -- parsing ---------------------------------------------------------------------


def _read_parser(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive (N_in, K1, ...)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", "", str(exc).splitlines()[0]) from None
    return parser


def _resolve(parser: configparser.ConfigParser) -> tuple[dict, dict]:
    values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    modes: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        if section.startswith("mode."):
            label = section[len("mode.") :].strip()
            if not label:
                raise ConfigError(section, "", "empty mode label")
            allowed = set(MODE_KEYS_CORRELATION) | set(MODE_KEYS_GENERAL)
            for key in items:
                if key not in allowed:
                    raise ConfigError(section, key, "unknown key")
            modes[label] = items
            continue
        if section not in DEFAULTS:
            raise ConfigError(section, "", "unknown section")
        for key, raw in items.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(section, key, "unknown key")
            values[section][key] = raw
    if not modes:
        for rho in DEFAULT_RHOS:
            modes[f"rho={rho:g}"] = {"sigma1": "0.4", "sigma2": "0.3", "rho": repr(rho)}
    return values, modes


def _build_mode(label: str, items: dict, d: int) -> ControlMode:
    section = f"mode.{label}"
    corr = [k for k in items if k in MODE_KEYS_CORRELATION]
    general = [k for k in items if k in MODE_KEYS_GENERAL]
    if corr and general:
        raise ConfigError(section, general[0], "correlation keys and general keys cannot be mixed")
    if not general:
        if d != 2:
            raise ConfigError(section, "", "correlation modes need d = 2")
        sigma1 = _number(items.get("sigma1", 0.4), float, section, "sigma1")
        sigma2 = _number(items.get("sigma2", 0.3), float, section, "sigma2")
        rho = _number(items.get("rho", 0.0), float, section, "rho")
        if not -1 < rho < 1:
            raise ConfigError(section, "rho", "must lie in (-1, 1)")
        return correlation_mode(rho, sigma1, sigma2, label=label)
    A = _matrix(items["drift_matrix"], section, "drift_matrix") if "drift_matrix" in items else np.zeros((d, d))
    f0 = _vector(items["drift_offset"], section, "drift_offset") if "drift_offset" in items else np.zeros(d)
    S0 = _matrix(items["sigma_const"], section, "sigma_const") if "sigma_const" in items else np.zeros((d, d))
    if "sigma_lin" in items:
        flat = _vector(items["sigma_lin"].replace(";", " "), section, "sigma_lin")
        if flat.size != d**3:
            raise ConfigError(section, "sigma_lin", f"needs d^3 = {d**3} numbers (index order i, j, k)")
        S1 = flat.reshape(d, d, d)
    else:
        S1 = np.zeros((d, d, d))
    delta = _number(items.get("delta", 0.0), float, section, "delta")
    try:
        return ControlMode(label, A, f0, S0, S1, delta)
    except ValueError as exc:
        raise ConfigError(section, "", str(exc)) from None


def build_config(text: str) -> Config:
    """Parse INI text into a resolved :class:`Config`."""
    values, modes = _resolve(_read_parser(text))
    P = values["problem"]
    d = _number(P["d"], int, "problem", "d")
    T = _number(P["T"], float, "problem", "T")
    h = _number(P["h"], float, "problem", "h")
    eps = _number(P["epsilon"], float, "problem", "epsilon")
    box = _matrix(str(P["state_box"]), "problem", "state_box")
    if box.shape != (d, 2) or np.any(box[:, 0] >= box[:, 1]):
        raise ConfigError("problem", "state_box", f"needs {d} rows 'low high' with low < high")
    guard_low = _number(P["guard_low"], float, "problem", "guard_low")

    Y = values["payoff"]
    direction = _vector(str(Y["direction"]), "payoff", "direction")
    if direction.size != d:
        raise ConfigError("payoff", "direction", f"needs {d} entries")
    band = _vector(str(Y["band"]), "payoff", "band")
    if band.size != 2 or band[0] >= band[1]:
        raise ConfigError("payoff", "band", "needs 'low high' with low < high")
    K1 = _number(Y["K1"], float, "payoff", "K1")
    K2 = _number(Y["K2"], float, "payoff", "K2")
    if K1 >= K2:
        raise ConfigError("payoff", "K2", "must exceed K1")
    payoff = RidgePayoff.butterfly(K1, K2, direction=tuple(direction))
    try:
        terminal, achieved = approximate_payoff(
            payoff,
            band=(band[0], band[1]),
            n_forms=_number(Y["n_forms"], int, "payoff", "n_forms"),
            c_kink=_number(Y["c_kink"], float, "payoff", "c_kink"),
            transverse=_number(Y["transverse"], float, "payoff", "transverse"),
            target_eps=_number(Y["target_eps"], float, "payoff", "target_eps"),
            transverse_radius=_number(Y["transverse_radius"], float, "payoff", "transverse_radius"),
            adaptive=_number(Y["adaptive"], bool, "payoff", "adaptive"),
            c_min=_number(Y["c_min"], float, "payoff", "c_min"),
        )
    except ValueError as exc:
        raise ConfigError("payoff", "", str(exc)) from None

    mode_objs = tuple(_build_mode(label, items, d) for label, items in modes.items())
    guard = np.column_stack([np.full(d, guard_low), np.full(d, np.inf)])
    try:
        spec = ProblemSpec(d, T, h, eps, mode_objs, terminal, box, guard, payoff)
    except (ValueError, KeyError) as exc:
        raise ConfigError("problem", "", str(exc)) from None

    S = values["sampling"]
    try:
        plan = SamplePlan(
            _number(S["N_in"], int, "sampling", "N_in"),
            _number(S["N_rg"], int, "sampling", "N_rg"),
            _number(S["N_x"], int, "sampling", "N_x"),
            _number(S["N_w"], int, "sampling", "N_w"),
            _number(S["method"], int, "sampling", "method"),
            _number(S["moment_match"], bool, "sampling", "moment_match"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("sampling", "", f"SamplePlan invariant violated: {exc}") from None

    R = values["run"]
    xr = _vector(str(R["xi1_range"]), "run", "xi1_range")
    if xr.size != 2 or xr[0] > xr[1]:
        raise ConfigError("run", "xi1_range", "needs 'low high'")
    step = _number(R["xi1_step"], float, "run", "xi1_step")
    if step <= 0:
        raise ConfigError("run", "xi1_step", "must be positive")
    grid = EvaluationGrid(xr[0], xr[1], _number(R["xi2"], float, "run", "xi2"), step)
    s_vals = direction[0] * grid.points()[:, 0] + direction[-1] * grid.xi2 if d == 2 else None
    if s_vals is not None and (s_vals.min() < band[0] or s_vals.max() > band[1]):
        raise ConfigError("run", "xi1_range", "evaluation grid leaves the payoff approximation band")
    threads = None if R["threads"] in (None, "") else _number(R["threads"], int, "run", "threads")
    outputs = tuple(str(R["outputs"]).split())
    for name in outputs:
        if name not in OUTPUT_NAMES:
            raise ConfigError("run", "outputs", f"unknown output {name!r}; choose from {OUTPUT_NAMES}")
    run = RunOptions(
        seed=_number(R["seed"], int, "run", "seed"),
        threads=threads,
        out_dir=str(R["out_dir"]),
        grid=grid,
        oracle_nodes=_number(R["oracle_nodes"], int, "run", "oracle_nodes"),
        benchmark_seeds=tuple(int(v) for v in _vector(str(R["benchmark_seeds"]), "run", "benchmark_seeds")),
        outputs=outputs,
    )
    return Config(values, modes, spec, plan, run, achieved)


def parse_config(path) -> tuple[ProblemSpec, SamplePlan, RunOptions]:
    """Read a config file and return ``(spec, plan, run_options)``."""
    cfg = load_config(path)
    return cfg.spec, cfg.plan, cfg.run


def load_config(path) -> Config:
    text = Path(path).read_text(encoding="utf-8")
    return build_config(text)


def serialize_config(cfg: Config) -> str:
    """Canonical INI text with every key written out explicitly."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in ("problem", "payoff", "sampling", "run"):
        parser[section] = {k: _fmt(v) for k, v in cfg.values[section].items() if v is not None}
    for label, items in cfg.modes.items():
        parser[f"mode.{label}"] = {k: str(v) for k, v in items.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def spec_hash(cfg: Config) -> str:
    """sha256 over the resolved problem, modes, terminal forms and sampling plan.

    Only parsed values enter the hash, so ``0.25`` and ``.25`` agree.
    """
    h = hashlib.sha256()
    h.update(json.dumps([m.label for m in cfg.spec.modes]).encode())
    h.update(cfg.spec.terminal.params().tobytes())
    for m in cfg.spec.modes:
        for arr in (m.drift_matrix, m.drift_offset, m.sigma_const, m.sigma_lin):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(float(m.delta)).encode())
    h.update(np.array([cfg.spec.horizon, cfg.spec.step, cfg.spec.epsilon]).tobytes())
    h.update(np.ascontiguousarray(cfg.spec.state_box, dtype=float).tobytes())
    h.update(repr(cfg.plan.as_tuple() + (cfg.plan.moment_match,)).encode())
    return h.hexdigest()


# -- subcommands -----------------------------------------------------------------


def resolve_threads(flag: Optional[int], cfg: Config) -> int:
    """``--threads`` wins, then ``[run] threads``, then the environment, then 1."""
    if flag is not None:
        return max(1, flag)
    if cfg.run.threads is not None:
        return max(1, cfg.run.threads)
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("env", THREADS_ENV, f"expected an integer, got {env!r}") from None
    return 1


def _out_dir(args, cfg: Config) -> Path:
    out = Path(args.out_dir if args.out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: Config) -> int:
    return cfg.run.seed if args.seed is None else args.seed


def cmd_solve(args, cfg: Config) -> int:
    out = _out_dir(args, cfg)
    threads = resolve_threads(args.threads, cfg)
    seed = _seed(args, cfg)
    res = backward_solve(cfg.spec, cfg.plan, seed, threads=threads)
    if "value_sets" in cfg.run.outputs:
        with open(out / "value_sets.csv", "w", newline="") as fp:
            write_value_sets(fp, res)
    if "grid" in cfg.run.outputs and cfg.spec.dim == 2:
        X = cfg.run.grid.points()
        v = evaluate_value(res, 0.0, X)
        labels = argmax_mode(res, 0.0, X)
        with open(out / "value_grid.csv", "w", newline="") as fp:
            fp.write("xi1,xi2,v,mode_label\n")
            for (a, b), val, lab in zip(X, v, labels):
                fp.write(f"{float(a)!r},{float(b)!r},{float(val)!r},{lab}\n")
    if "manifest" in cfg.run.outputs:
        entries = result_manifest(res, spec_hash(cfg))
        entries["threads"] = threads
        entries["payoff_error"] = repr(cfg.payoff_error)
        with open(out / "manifest.txt", "w") as fp:
            write_manifest(fp, entries)
    print(f"solved {len(cfg.spec.modes)} mode(s), {cfg.spec.n_steps} steps in {res.seconds:.1f}s -> {out}")
    return 0


def benchmark_cases(cfg: Config, seeds=None) -> list[BenchmarkCase]:
    """Each mode on its own plus all modes together, for every seed."""
    seeds = tuple(cfg.run.benchmark_seeds if seeds is None else seeds)
    labels = [m.label for m in cfg.spec.modes]
    groups = [(lab,) for lab in labels]
    if len(labels) > 1:
        groups.append(tuple(labels))
    cases = []
    for s in seeds:
        for g in groups:
            name = g[0] if len(g) == 1 else "controlled"
            if len(seeds) > 1:
                name = f"{name}@seed{s}"
            cases.append(BenchmarkCase(g, cfg.plan, s, cfg.run.grid, name))
    return cases


def cmd_benchmark(args, cfg: Config) -> int:
    if cfg.spec.dim != 2:
        raise ConfigError("problem", "d", "the benchmark needs d = 2")
    out = _out_dir(args, cfg)
    threads = resolve_threads(args.threads, cfg)
    seeds = (args.seed,) if args.seed is not None else None
    cases = benchmark_cases(cfg, seeds)
    t0 = time.perf_counter()
    report = run_benchmark(cases, cfg.spec, threads=threads)
    with open(out / "table.csv", "w", newline="") as fp:
        write_table_csv(fp, report, cfg.spec)
    with open(out / "figure.csv", "w", newline="") as fp:
        write_figure_csv(fp, report)
    entries = {"spec_hash": spec_hash(cfg), "threads": threads, "total_seconds": f"{time.perf_counter() - t0:.3f}"}
    for o in report.outcomes:
        entries[f"case.{o.case.name}.seconds"] = f"{o.seconds:.3f}"
        entries[f"case.{o.case.name}.max_forms"] = o.max_forms
    with open(out / "manifest.txt", "w") as fp:
        write_manifest(fp, entries)
    print(format_table(report))
    failed = [o for o in report.outcomes if o.error]
    if failed:
        _error("BenchmarkCaseFailed", f"{len(failed)} of {len(report.outcomes)} cases failed")
        return 3
    return 0


def cmd_oracle(args, cfg: Config) -> int:
    if cfg.spec.dim != 2:
        raise ConfigError("problem", "d", "the reference values need d = 2")
    out = _out_dir(args, cfg)
    base = cfg.spec.modes[0]
    try:
        sigma1, sigma2, _ = correlation_parameters(base)
    except ValueError:
        sigma1, sigma2 = 0.4, 0.3
    mode = correlation_mode(args.rho, sigma1, sigma2)
    X = cfg.run.grid.points()
    v = oracle_constant_mode(cfg.spec, mode, X, n_nodes=cfg.run.oracle_nodes)
    path = out / f"oracle_rho{args.rho:g}.csv"
    with open(path, "w", newline="") as fp:
        fp.write("xi1,xi2,v\n")
        for (a, b), val in zip(X, v):
            fp.write(f"{float(a)!r},{float(b)!r},{float(val)!r}\n")
    print(f"wrote {path}")
    return 0


def cmd_dump_payoff(args, cfg: Config) -> int:
    out = _out_dir(args, cfg)
    with open(out / "payoff.csv", "w", newline="") as fp:
        write_csv(fp, [(cfg.spec.horizon, cfg.spec.terminal)])
    target = cfg.values["payoff"]["target_eps"]
    with open(out / "payoff_report.txt", "w") as fp:
        write_manifest(
            fp,
            {
                "achieved_error": repr(cfg.payoff_error),
                "target_eps": _fmt(target),
                "n_forms": len(cfg.spec.terminal),
                "spec_hash": spec_hash(cfg),
            },
        )
    print(f"{len(cfg.spec.terminal)} forms, achieved error {cfg.payoff_error:.4g} (target {_fmt(target)})")
    return 0


COMMANDS = {"solve": cmd_solve, "benchmark": cmd_benchmark, "oracle": cmd_oracle, "dump-payoff": cmd_dump_payoff}


def _error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message, **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxplus-hjb", description="Max-plus probabilistic solver for switching HJB equations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="INI configuration file (may be empty)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        if name == "oracle":
            p.add_argument("--rho", type=float, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _error("ConfigError", str(exc), section=exc.section, key=exc.key)
        return 2
    except FileNotFoundError as exc:
        _error("FileNotFoundError", str(exc))
        return 2
    except Exception as exc:  # any failure becomes one parsable line
        _error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
