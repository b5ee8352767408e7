"""Control modes, problem definition and the Euler transition map.

Each mode ``m`` carries an affine drift ``x -> A_f x + b_f``, a diffusion
matrix ``Sigma(x)`` whose entries are affine in ``x``, a constant discount
rate and an optional quadratic running reward.  The simulated process uses
the scaled diffusion ``eps * Sigma`` and the same drift; the remainder of the
Hamiltonian is the nonlinear generator evaluated pointwise by the scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .quadform import MaxPlusFunction, QuadraticForm, RidgePayoff

# G(x, r, p, Gamma) with leading batch axes; see nonlinear_generator
GeneratorHook = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class SplitConditionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControlMode:
    """One value of the switching control.

    ``Sigma(x)[i, j] = sigma_const[i, j] + sum_k sigma_lin[i, j, k] * x[k]``.
    ``generator`` optionally replaces the default proportional-split
    nonlinear generator (e.g. for an inner maximization over a continuum
    control); it must accept batched arrays.
    """

    label: str
    drift_matrix: np.ndarray
    drift_offset: np.ndarray
    sigma_const: np.ndarray
    sigma_lin: np.ndarray
    delta: float = 0.0
    running_reward: Optional[QuadraticForm] = None
    generator: Optional[GeneratorHook] = field(default=None, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.drift_matrix, dtype=float))
        d = A.shape[0]
        arrays = {
            "drift_matrix": (A, (d, d)),
            "drift_offset": (np.array(self.drift_offset, dtype=float).reshape(-1), (d,)),
            "sigma_const": (np.array(self.sigma_const, dtype=float).reshape(d, d), (d, d)),
            "sigma_lin": (np.array(self.sigma_lin, dtype=float).reshape(d, d, d), (d, d, d)),
        }
        for name, (arr, shape) in arrays.items():
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.isscalar(self.delta) and np.ndim(self.delta) != 0:
            raise ValueError("the discount rate must be a constant")
        if self.delta < 0:
            raise ValueError("the discount rate must be nonnegative")
        object.__setattr__(self, "delta", float(self.delta))
        if self.running_reward is not None and self.running_reward.dim != d:
            raise ValueError("running reward dimension mismatch")

    @property
    def dim(self) -> int:
        return self.drift_offset.shape[0]

    def drift(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.drift_matrix.T + self.drift_offset

    def sigma(self, x) -> np.ndarray:
        """``Sigma(x)`` for ``x`` of shape ``(..., d)``; returns ``(..., d, d)``."""
        x = np.asarray(x, dtype=float)
        return self.sigma_const + np.einsum("ijk,...k->...ij", self.sigma_lin, x)

    def euler_affine(self, eps: float, h: float, w) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients ``(A, b0)`` with ``euler_step(x, w) == A x + b0``.

        ``w`` may carry leading batch axes; ``A`` then has shape ``(..., d, d)``.
        """
        w = np.asarray(w, dtype=float)
        d = self.dim
        A = np.eye(d) + h * self.drift_matrix + eps * np.einsum("ijk,...j->...ik", self.sigma_lin, w)
        b0 = h * self.drift_offset + eps * np.einsum("ij,...j->...i", self.sigma_const, w)
        return A, b0

    def reward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.running_reward is None:
            return np.zeros(x.shape[:-1])
        q = self.running_reward
        return 0.5 * np.einsum("...i,ij,...j->...", x, q.Q, x) + x @ q.b + q.c


def correlation_mode(rho: float, sigma1: float = 0.4, sigma2: float = 0.3, label: str | None = None) -> ControlMode:
    """Two correlated geometric Brownian motions with correlation ``rho``.

    ``Sigma(x) = [[sigma1 x1, 0], [sigma2 rho x2, sigma2 sqrt(1 - rho^2) x2]]``,
    zero drift, no discount, no running reward.
    """
    if not -1.0 <= rho <= 1.0:
        raise ValueError("correlation must lie in [-1, 1]")
    lin = np.zeros((2, 2, 2))
    lin[0, 0, 0] = sigma1
    lin[1, 0, 1] = sigma2 * rho
    lin[1, 1, 1] = sigma2 * math.sqrt(1.0 - rho * rho)
    return ControlMode(
        label=label or f"rho={rho:g}",
        drift_matrix=np.zeros((2, 2)),
        drift_offset=np.zeros(2),
        sigma_const=np.zeros((2, 2)),
        sigma_lin=lin,
    )


def correlation_parameters(mode: ControlMode) -> tuple[float, float, float]:
    """Recover ``(sigma1, sigma2, rho)`` from a mode built like :func:`correlation_mode`.

    Raises ``ValueError`` when the mode does not have that structure.
    """
    lin = mode.sigma_lin
    expected_zero = lin.copy()
    expected_zero[0, 0, 0] = expected_zero[1, 0, 1] = expected_zero[1, 1, 1] = 0.0
    if (
        mode.dim != 2
        or np.any(expected_zero != 0)
        or np.any(mode.sigma_const != 0)
        or np.any(mode.drift_matrix != 0)
        or np.any(mode.drift_offset != 0)
        or mode.delta != 0
        or mode.running_reward is not None
        or mode.generator is not None
    ):
        raise ValueError(f"mode {mode.label!r} is not a two-asset correlation model")
    sigma1 = float(lin[0, 0, 0])
    sigma2 = float(math.hypot(lin[1, 0, 1], lin[1, 1, 1]))
    rho = float(lin[1, 0, 1] / sigma2) if sigma2 > 0 else 0.0
    return sigma1, sigma2, rho


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Horizon, time step, split parameter, modes and terminal data.

    ``state_box`` has shape ``(d, 2)`` (low, high per coordinate) and is the
    initial sampling law's support.  ``guard_box`` bounds simulated states;
    states leaving it are clamped and counted.  ``payoff`` is the exact
    terminal payoff when known (used by reference values only).
    """

    dim: int
    horizon: float
    step: float
    epsilon: float
    modes: tuple
    terminal: MaxPlusFunction
    state_box: np.ndarray
    guard_box: Optional[np.ndarray] = None
    payoff: Optional[RidgePayoff] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.horizon <= 0 or self.step <= 0:
            raise ValueError("horizon and step must be positive")
        ratio = self.horizon / self.step
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"horizon/step = {ratio:g} is not an integer")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        modes = tuple(self.modes)
        if not modes:
            raise ValueError("at least one control mode is required")
        if any(m.dim != self.dim for m in modes):
            raise ValueError("mode dimension mismatch")
        if len({m.label for m in modes}) != len(modes):
            raise ValueError("mode labels must be unique")
        if self.terminal.dim != self.dim:
            raise ValueError("terminal dimension mismatch")
        box = np.array(self.state_box, dtype=float).reshape(self.dim, 2)
        if np.any(box[:, 0] > box[:, 1]):
            raise ValueError("state box bounds are reversed")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "state_box", box)
        if self.guard_box is not None:
            object.__setattr__(self, "guard_box", np.array(self.guard_box, dtype=float).reshape(self.dim, 2))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))

    @property
    def times(self) -> np.ndarray:
        """``0, h, ..., T``."""
        return np.arange(self.n_steps + 1) * self.step

    def time_index(self, t: float) -> int:
        k = t / self.step
        if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)) or not 0 <= round(k) <= self.n_steps:
            raise KeyError(f"t={t!r} is not a discretization time")
        return int(round(k))


@dataclass(frozen=True)
class SplitReport:
    passed: bool
    trace_value: float
    margin: float
    checked_modes: tuple

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"{state}: tr(a^-1 dG/dGamma) = {self.trace_value:.6g}, margin {self.margin:.6g}"


def split_trace(dim: int, eps: float) -> float:
    """``tr(a^{-1} dG/dGamma)`` for the proportional split: ``d(1-eps^2)/(2 eps^2)``."""
    return dim * (1.0 - eps * eps) / (2.0 * eps * eps)


def validate_split(spec: ProblemSpec, strict: bool = True) -> SplitReport:
    """Check the ellipticity/trace condition of the proportional split.

    With ``sigma_ = eps * Sigma`` the trace condition reduces to
    ``eps^2 >= d / (d + 2)``; the PSD condition holds for any ``eps <= 1``.
    Modes with a custom generator are not checked.
    """
    checked = tuple(m.label for m in spec.modes if m.generator is None)
    trace = split_trace(spec.dim, spec.epsilon) if checked else 0.0
    # guard against rounding exactly at the boundary, e.g. eps^2 = 1/2 for d = 2
    passed = trace <= 1.0 + 1e-12
    report = SplitReport(passed, trace, 1.0 - trace, checked)
    if strict and not passed:
        raise SplitConditionError(
            f"epsilon={spec.epsilon:g} violates eps^2 >= d/(d+2) = {spec.dim / (spec.dim + 2):g} ({report})"
        )
    return report


def default_epsilon(dim: int, configured: float = 0.75) -> float:
    return max(math.sqrt(dim / (dim + 2.0)), configured)


def diffusion_conditioning(mode: ControlMode, box) -> float:
    """Largest condition number of ``Sigma`` over the box corners and center.

    Raises ``ValueError`` when ``Sigma`` is singular at one of them.
    """
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    corners = np.array(np.meshgrid(*box, indexing="ij")).reshape(d, -1).T
    pts = np.vstack([corners, box.mean(axis=1)])
    conds = np.linalg.cond(mode.sigma(pts))
    if not np.all(np.isfinite(conds)) or conds.max() > 1e12:
        raise ValueError(f"diffusion of mode {mode.label!r} is singular on the state box")
    return float(conds.max())


def euler_step(mode: ControlMode, eps: float, h: float, x, w) -> np.ndarray:
    """``x + f(x) h + eps * Sigma(x) w``."""
    if h <= 0:
        raise ValueError("time step must be positive")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-1] != mode.dim or w.shape[-1] != mode.dim:
        raise ValueError("state/increment dimension mismatch")
    return x + h * mode.drift(x) + eps * np.einsum("...ij,...j->...i", mode.sigma(x), w)


def nonlinear_generator(mode: ControlMode, eps: float, x, r, p, Gamma) -> np.ndarray:
    """Nonlinear part of the Hamiltonian left after the linear generator.

    Default (proportional split, same drift):
    ``0.5 (1 - eps^2) tr(Sigma Sigma' Gamma) - delta r + l(x)``.
    All arguments may carry matching leading batch axes.
    """
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    if mode.generator is not None:
        return np.asarray(mode.generator(x, r, p, Gamma), dtype=float)
    S = mode.sigma(x)
    a = np.einsum("...ik,...jk->...ij", S, S)
    trace = np.einsum("...ij,...ji->...", a, Gamma)
    return 0.5 * (1.0 - eps * eps) * trace - mode.delta * r + mode.reward(x)


def uncertain_correlation_problem(
    rhos: Sequence[float] = (-0.8, 0.8),
    sigma1: float = 0.4,
    sigma2: float = 0.3,
    K1: float = -5.0,
    K2: float = 5.0,
    horizon: float = 0.25,
    step: float = 0.05,
    epsilon: float = 0.75,
    state_box=((20.0, 80.0), (30.0, 70.0)),
    guard_low: float = 1e-8,
    terminal: MaxPlusFunction | None = None,
    **payoff_options,
) -> ProblemSpec:
    """Two-asset butterfly on ``x1 - x2`` with uncertain correlation.

    ``payoff_options`` are forwarded to
    :func:`~maxplus_hjb.quadform.approximate_payoff` when ``terminal`` is not
    given.
    """
    from .quadform import approximate_payoff

    payoff = RidgePayoff.butterfly(K1, K2)
    if terminal is None:
        terminal, _ = approximate_payoff(payoff, **payoff_options)
    modes = tuple(correlation_mode(r, sigma1, sigma2) for r in rhos)
    guard = np.array([[guard_low, np.inf], [guard_low, np.inf]])
    return ProblemSpec(2, horizon, step, epsilon, modes, terminal, np.array(state_box), guard, payoff)
