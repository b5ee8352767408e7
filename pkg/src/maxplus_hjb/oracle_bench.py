"""Reference values and the constant/uncertain correlation benchmark.

For a single correlation mode the state at the horizon is an explicit
bivariate lognormal, so ``E[psi(x_T)]`` can be integrated directly.  For a
ridge payoff ``g(a1 x1 + a2 x2)`` with piecewise linear ``g`` the expectation
conditional on the Gaussian factor driving ``x2`` reduces to Black-Scholes
type call prices in ``x1``; the remaining one-dimensional integral is done
by Gauss-Hermite quadrature.  Other payoffs fall back to a tensor
Gauss-Hermite rule.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr, roots_hermitenorm

from .model import ControlMode, ProblemSpec, correlation_parameters
from .quadform import RidgePayoff
from .sampling import SamplePlan
from .solver import SolveResult, backward_solve, evaluate_value

logger = logging.getLogger(__name__)


def _gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = roots_hermitenorm(n)
    return z, w / w.sum()


def _lognormal_call(C, A, beta):
    """``E[(C exp(beta G) - A)^+]`` for standard normal ``G`` and ``C > 0``."""
    C, A = np.broadcast_arrays(np.asarray(C, float), np.asarray(A, float))
    fwd = C * math.exp(0.5 * beta * beta)
    if beta == 0:
        return np.maximum(C - A, 0.0)
    out = fwd - A
    pos = A > 0
    k = np.log(A[pos] / C[pos]) / beta
    out[pos] = fwd[pos] * ndtr(beta - k) - A[pos] * ndtr(-k)
    return out


def _ridge_expectation(payoff: RidgePayoff, C, beta, rest):
    """``E[g(a1 C exp(beta G) + rest)]`` for piecewise linear ``g``.

    Uses ``g(s) = g(k0) + l (s - k0) + sum_i jump_i (s - k_i)^+``.
    """
    a1 = payoff.direction[0]
    fwd = C * math.exp(0.5 * beta * beta)
    mean_s = a1 * fwd + rest
    k = payoff.knots
    sl = payoff.slopes()
    total = payoff.values[0] + sl[0] * (mean_s - k[0])
    for knot, jump in zip(k, np.diff(sl)):
        if jump == 0:
            continue
        # E[(a1 X + rest - knot)^+] with X = C exp(beta G)
        if a1 > 0:
            part = a1 * _lognormal_call(C, (knot - rest) / a1, beta)
        elif a1 < 0:
            strike = (knot - rest) / a1
            # (|a1| (strike - X))^+  = |a1| (call - (fwd - strike))
            part = -a1 * (_lognormal_call(C, strike, beta) - (fwd - strike))
        else:
            part = np.maximum(rest - knot, 0.0)
        total = total + jump * part
    return total


def oracle_constant_mode(
    spec: ProblemSpec,
    mode: ControlMode,
    x,
    n_nodes: int = 64,
    payoff: Optional[Callable] = None,
    horizon: Optional[float] = None,
) -> np.ndarray:
    """``E[psi(x_T)]`` under the exact law of a constant-correlation mode.

    ``x`` is a point or an array of points (positive coordinates).  Without
    ``payoff`` the exact ridge payoff of ``spec`` is used with the
    semi-analytic rule; a callable ``payoff`` (acting on arrays of shape
    ``(..., 2)``) is integrated with an ``n_nodes x n_nodes`` tensor rule.
    ``horizon`` overrides the remaining time ``T``.
    """
    sigma1, sigma2, rho = correlation_parameters(mode)
    T = spec.horizon if horizon is None else float(horizon)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if np.any(X <= 0):
        raise ValueError("the lognormal reference needs positive states")
    z, w = _gauss_hermite(n_nodes)
    rt = math.sqrt(T)
    sq = math.sqrt(max(0.0, 1.0 - rho * rho))
    out = np.empty(X.shape[0])
    if sigma1 * rt == 0 and sigma2 * rt == 0:
        # the law of x_T is the point mass at x
        f = spec.payoff if payoff is None else payoff
        out = np.asarray(f(X), dtype=float).reshape(-1)
    elif payoff is None:
        ridge = spec.payoff
        if ridge is None or ridge.dim != 2:
            raise ValueError("spec carries no two-dimensional ridge payoff")
        beta = sigma1 * rt * sq
        for i, (x1, x2) in enumerate(X):
            # condition on the factor Y of x2; x1 = C(Y) exp(beta G) with G independent
            xi2 = x2 * np.exp(-0.5 * sigma2**2 * T + sigma2 * rt * z)
            C = x1 * np.exp(-0.5 * sigma1**2 * T + sigma1 * rt * rho * z)
            rest = ridge.direction[1] * xi2
            out[i] = w @ _ridge_expectation(ridge, C, beta, rest)
    else:
        g1, g2 = np.meshgrid(z, z, indexing="ij")
        W = np.outer(w, w)
        for i, (x1, x2) in enumerate(X):
            a = x1 * np.exp(-0.5 * sigma1**2 * T + sigma1 * rt * g1)
            b = x2 * np.exp(-0.5 * sigma2**2 * T + sigma2 * rt * (rho * g1 + sq * g2))
            out[i] = np.sum(W * payoff(np.stack([a, b], axis=-1)))
    return out if np.ndim(x) > 1 else out[0]


def error_norms(values, reference) -> tuple[float, float]:
    """Sup-norm and mean absolute error over the grid."""
    err = np.abs(np.asarray(values, dtype=float) - np.asarray(reference, dtype=float))
    return float(err.max()), float(err.mean())


def seed_spread(curves) -> np.ndarray:
    """Pointwise sample standard deviation across independent replications."""
    curves = np.asarray(curves, dtype=float)
    if curves.shape[0] < 2:
        return np.zeros(curves.shape[1:])
    return curves.std(axis=0, ddof=1)


@dataclass(frozen=True)
class EvaluationGrid:
    xi1_lo: float = 20.0
    xi1_hi: float = 80.0
    xi2: float = 50.0
    step: float = 1.0

    def points(self) -> np.ndarray:
        n = int(round((self.xi1_hi - self.xi1_lo) / self.step)) + 1
        if n < 1:
            raise ValueError("empty evaluation grid")
        xi1 = self.xi1_lo + self.step * np.arange(n)
        return np.column_stack([xi1, np.full(n, self.xi2)])


@dataclass(frozen=True)
class BenchmarkCase:
    """One solve: a subset of the problem's modes, a sample plan and a seed."""

    modes: tuple
    plan: SamplePlan
    seed: int
    grid: EvaluationGrid = EvaluationGrid()
    label: str = ""

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return self.modes[0] if len(self.modes) == 1 else "controlled"


@dataclass
class CaseOutcome:
    case: BenchmarkCase
    grid: np.ndarray
    values: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None
    e_inf: Optional[float] = None
    e_1: Optional[float] = None
    seconds: float = 0.0
    error: str = ""
    max_forms: int = 0
    result: Optional[SolveResult] = field(default=None, repr=False)


@dataclass
class BenchmarkReport:
    outcomes: list = field(default_factory=list)


def restrict_modes(spec: ProblemSpec, labels: Sequence[str]) -> ProblemSpec:
    by_label = {m.label: m for m in spec.modes}
    missing = [l for l in labels if l not in by_label]
    if missing:
        raise KeyError(f"unknown mode labels {missing}")
    return replace(spec, modes=tuple(by_label[l] for l in labels))


def run_case(spec: ProblemSpec, case: BenchmarkCase, threads: int | None = None, keep_result: bool = False, n_nodes: int = 64) -> CaseOutcome:
    grid = case.grid.points()
    out = CaseOutcome(case, grid)
    t0 = time.perf_counter()
    try:
        sub = restrict_modes(spec, case.modes)
        res = backward_solve(sub, case.plan, case.seed, threads=threads)
        M = len(sub.modes)
        out.max_forms = max(len(res.Z[k]) for k in res.Z if k < sub.n_steps)
        if out.max_forms > M * case.plan.n_in:
            raise AssertionError("card(Z_t) exceeds M*N_in")
        out.values = evaluate_value(res, 0.0, grid)
        if M == 1:
            out.reference = oracle_constant_mode(sub, sub.modes[0], grid, n_nodes)
            out.e_inf, out.e_1 = error_norms(out.values, out.reference)
        if keep_result:
            out.result = res
    except Exception as exc:  # recorded per case; the run continues
        logger.exception("case %s failed", case.name)
        out.error = f"{type(exc).__name__}: {exc}"
    out.seconds = time.perf_counter() - t0
    return out


def run_benchmark(cases: Sequence[BenchmarkCase], spec: ProblemSpec, threads: int | None = None, keep_results: bool = False) -> BenchmarkReport:
    """Solve every case and score single-mode cases against the reference."""
    report = BenchmarkReport()
    for case in cases:
        report.outcomes.append(run_case(spec, case, threads, keep_results))
    return report


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


TABLE_HEADER = ["case", "rho", "N_in", "N_rg", "N_x", "N_w", "N_m", "seed", "e_inf", "e_1", "error"]


def write_table_csv(fp, report: BenchmarkReport, spec: ProblemSpec) -> None:
    """One row per case; ``rho`` is empty for multi-mode cases.

    Timings are deliberately left out so the file only depends on the
    inputs; they go to the run manifest.
    """
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    by_label = {m.label: m for m in spec.modes}
    for o in report.outcomes:
        c = o.case
        rho = ""
        if len(c.modes) == 1:
            try:
                rho = repr(correlation_parameters(by_label[c.modes[0]])[2])
            except (KeyError, ValueError):
                rho = ""
        writer.writerow([c.name, rho, *c.plan.as_tuple(), c.seed, _fmt(o.e_inf), _fmt(o.e_1), o.error])


def write_figure_csv(fp, report: BenchmarkReport) -> None:
    """``xi1`` followed by one value column ``v_<case>`` per successful case."""
    done = [o for o in report.outcomes if o.values is not None]
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(["xi1"] + [f"v_{o.case.name}" for o in done])
    if not done:
        return
    grid = done[0].grid
    for i in range(grid.shape[0]):
        writer.writerow([repr(float(grid[i, 0]))] + [repr(float(o.values[i])) for o in done])


def format_table(report: BenchmarkReport) -> str:
    lines = [f"{'case':>12} {'N':>28} {'seed':>5} {'e_inf':>8} {'e_1':>8}"]
    for o in report.outcomes:
        n = "(" + ",".join(str(v) for v in o.case.plan.as_tuple()) + ")"
        if o.error:
            lines.append(f"{o.case.name:>12} {n:>28} {o.case.seed:>5}  failed: {o.error}")
        elif o.e_inf is None:
            lines.append(f"{o.case.name:>12} {n:>28} {o.case.seed:>5} {'-':>8} {'-':>8}")
        else:
            lines.append(f"{o.case.name:>12} {n:>28} {o.case.seed:>5} {o.e_inf:8.3f} {o.e_1:8.3f}")
    return "\n".join(lines)
