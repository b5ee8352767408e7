"""Simulation of the uncontrolled Euler processes and regression sample pairs.

All randomness comes from Philox streams keyed by ``(seed, purpose, ...)``
with logical indices (time step, mode, outer sample), so results do not
depend on evaluation order or thread count.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec, euler_step

logger = logging.getLogger(__name__)

_INITIAL, _INCREMENTS, _PAIRS = 0, 1, 2


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the logical coordinates ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *key])))


@dataclass(frozen=True)
class SamplePlan:
    """Sample sizes ``(N_in, N_rg, N_x, N_w)`` and sampling method ``1..5``."""

    n_in: int
    n_rg: int
    n_x: int
    n_w: int
    method: int
    moment_match: bool = True

    def __post_init__(self):
        for name in ("n_in", "n_rg", "n_x", "n_w"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        m = self.method
        if m not in (1, 2, 3, 4, 5):
            raise ValueError(f"sampling method must be 1..5, got {m}")
        if m == 1 and self.n_rg != self.n_in:
            raise ValueError("method 1 requires N_rg == N_in")
        if m in (2, 3, 4) and self.n_rg != self.n_x * self.n_w:
            raise ValueError(f"method {m} requires N_rg == N_x * N_w")
        if m == 4 and self.n_w != self.n_in:
            raise ValueError("method 4 requires N_w == N_in")
        if m == 5 and self.n_rg != self.n_in**2:
            raise ValueError("method 5 requires N_rg == N_in^2")

    @classmethod
    def of(cls, n_in, n_rg, n_x, n_w, method, **kw) -> "SamplePlan":
        return cls(int(n_in), int(n_rg), int(n_x), int(n_w), int(method), **kw)

    def as_tuple(self) -> tuple:
        return (self.n_in, self.n_rg, self.n_x, self.n_w, self.method)

    @property
    def shared_pairs(self) -> bool:
        """True when every (omega, m) uses the same pair list."""
        return self.method != 3


@dataclass(frozen=True, eq=False)
class PathTable:
    """Simulated Euler paths.

    ``increments[k, w]`` is the Brownian increment over ``[t_k, t_k + h]``
    for sample ``w`` (shared by all modes); ``states[m, k, w]`` is the state
    of mode ``m`` at ``t_k``, for ``k = 0..n_steps``.
    """

    increments: np.ndarray
    states: np.ndarray
    seed: int
    n_clamped: int = 0

    @property
    def n_in(self) -> int:
        return self.increments.shape[1]


def simulate_paths(spec: ProblemSpec, plan: SamplePlan, seed: int, zero_increments: bool = False) -> PathTable:
    """Draw ``N_in`` initial states uniformly on the state box and run every mode forward.

    Increments are ``Normal(0, h I)``.  ``zero_increments`` is a test hook.
    States leaving ``spec.guard_box`` are clamped onto it and counted.
    """
    n, d, K, h = plan.n_in, spec.dim, spec.n_steps, spec.step
    lo, hi = spec.state_box[:, 0], spec.state_box[:, 1]
    x0 = lo + (hi - lo) * stream(seed, _INITIAL).random((n, d))
    dW = np.empty((K, n, d))
    for k in range(K):
        dW[k] = np.sqrt(h) * stream(seed, _INCREMENTS, k).standard_normal((n, d))
    if zero_increments:
        dW[:] = 0.0

    M = len(spec.modes)
    X = np.empty((M, K + 1, n, d))
    n_clamped = 0
    for m, mode in enumerate(spec.modes):
        X[m, 0] = x0
        for k in range(K):
            nxt = euler_step(mode, spec.epsilon, h, X[m, k], dW[k])
            if spec.guard_box is not None:
                g_lo, g_hi = spec.guard_box[:, 0], spec.guard_box[:, 1]
                outside = np.any((nxt < g_lo) | (nxt > g_hi), axis=1)
                if outside.any():
                    n_clamped += int(outside.sum())
                    nxt = np.clip(nxt, g_lo, g_hi)
            X[m, k + 1] = nxt
    if n_clamped:
        logger.warning("%d simulated states left the guard box and were clamped", n_clamped)
    mean = dW.mean(axis=1)
    if n > 1 and np.any(np.abs(mean) > 5 * np.sqrt(h / n)):
        logger.warning("increment sample mean outside 5 standard errors")
    dW.setflags(write=False)
    X.setflags(write=False)
    return PathTable(dW, X, int(seed), n_clamped)


def build_pairs(plan: SamplePlan, seed: int, t_index: int = 0, mode_index: int = 0, omega: int = 0) -> np.ndarray:
    """Regression pairs ``(state sample, increment sample)`` for one ``(omega, m)``.

    Returns an integer array of shape ``(N_rg, 2)`` of 0-based indices into
    the ``N_in`` simulated samples, in row-major product order (states
    outer, increments inner).  Random index draws use replacement.

    * method 1: ``(i, i)`` for every sample;
    * method 2: one random state subset and one random increment subset,
      drawn once per solve and shared by every ``(omega, m)`` and time step;
    * method 3: as method 2 with fresh draws for each ``(t, m, omega)``;
    * method 4: random states (shared) times every increment;
    * method 5: every state times every increment.
    """
    n = plan.n_in
    if plan.method == 1:
        idx = np.arange(n)
        return np.stack([idx, idx], axis=1)
    if plan.method == 5:
        states, incs = np.arange(n), np.arange(n)
    else:
        rng = stream(seed, _PAIRS) if plan.method in (2, 4) else stream(seed, _PAIRS, 1 + t_index, mode_index, omega)
        states = rng.integers(0, n, plan.n_x)
        incs = np.arange(n) if plan.method == 4 else rng.integers(0, n, plan.n_w)
    return np.stack(
        [np.repeat(states, incs.size), np.tile(incs, states.size)], axis=1
    )


def write_paths_csv(fp, table: PathTable, labels=None) -> None:
    """Rows ``m, t_index, omega, x1..xd, dW1..dWd`` (``dW`` empty at the last time)."""
    M, K1, n, d = table.states.shape
    labels = labels or [str(m) for m in range(M)]
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(["m", "t_index", "omega"] + [f"x{i + 1}" for i in range(d)] + [f"dW{i + 1}" for i in range(d)])
    for m in range(M):
        for k in range(K1):
            for w in range(n):
                inc = [repr(float(v)) for v in table.increments[k, w]] if k < K1 - 1 else [""] * d
                writer.writerow([labels[m], k, w] + [repr(float(v)) for v in table.states[m, k, w]] + inc)
