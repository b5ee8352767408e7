"""Backward induction producing the value sets ``Z_t``.

At every time step and for every ``(omega, m)`` a selection of the next
value set is built at the outer state ``X^m(t, omega)``, the one-step
operator is evaluated at the regression states with that selection, and a
quadratic form is fitted to the results.  ``Z_t`` collects one form per
``(omega, m)`` in mode-major, sample-minor order.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import ProblemSpec, diffusion_conditioning, validate_split
from .quadform import MaxPlusFunction, prune_duplicates, quadratic_features, write_csv
from .regression import fit_quadratic_many, project_concave_arrays
from .sampling import PathTable, SamplePlan, build_pairs, simulate_paths
from .scheme import argmax_features, combine, euler_images, group_weights, moment_match

logger = logging.getLogger(__name__)

THREADS_ENV = "MAXPLUS_HJB_THREADS"
# cap on the (outer samples x increments x forms) buffer per chunk
_CHUNK_BUDGET = 8_000_000


class SolverError(RuntimeError):
    pass


@dataclass
class StepDiagnostics:
    t: float
    n_forms: int
    n_unique: int
    max_clamp: float
    churn: int
    unscaled_groups: int
    seconds: float


@dataclass
class SolveResult:
    """Value sets per time index plus diagnostics and run echoes."""

    Z: dict
    spec: ProblemSpec
    plan: SamplePlan
    seed: int
    diagnostics: list = field(default_factory=list)
    n_clamped_states: int = 0
    seconds: float = 0.0

    def value_set(self, t: float) -> MaxPlusFunction:
        return self.Z[self.spec.time_index(t)]


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class _Block:
    """Work shared by outer samples using the same pair list."""

    x_groups: np.ndarray  # (G, d)
    unique_incs: np.ndarray  # (U, d) transformed increments
    row_inc: np.ndarray  # (R,) index into unique_incs
    feats: np.ndarray  # (R, p) features of S(x_g, w)
    P1: np.ndarray
    P2: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    unscaled: int


def _prepare_block(spec, mode, states_t, dW_t, pairs, moment: bool) -> _Block:
    eps, h = spec.epsilon, spec.step
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    g_idx, starts = np.unique(pairs[:, 0], return_index=True)
    ends = np.append(starts[1:], pairs.shape[0])

    inc_lists = [pairs[s:e, 1] for s, e in zip(starts, ends)]
    shared = all(np.array_equal(inc_lists[0], l) for l in inc_lists[1:])
    cache: dict = {}
    unscaled = 0
    group_incs = []
    for l in inc_lists:
        key = l.tobytes() if not shared else b""
        if key not in cache:
            W = dW_t[l]
            if moment:
                W, ok = moment_match(W, h)
                unscaled += not ok
            cache[key] = W
        group_incs.append(cache[key])

    if shared:
        U = group_incs[0]
        row_inc = np.tile(np.arange(U.shape[0]), len(group_incs))
    else:
        U = np.concatenate(group_incs)
        row_inc = np.arange(U.shape[0])

    x_groups = states_t[g_idx]
    feats, P1s, P2s, counts = [], [], [], []
    for x_g, W in zip(x_groups, group_incs):
        feats.append(quadratic_features(euler_images(mode, eps, h, x_g, W)))
        P1, P2 = group_weights(mode, eps, h, x_g, W)
        P1s.append(P1)
        P2s.append(P2)
        counts.append(W.shape[0])
    counts = np.array(counts)
    return _Block(
        x_groups,
        U,
        row_inc,
        np.concatenate(feats),
        np.concatenate(P1s),
        np.concatenate(P2s),
        np.concatenate([[0], np.cumsum(counts)[:-1]]),
        counts,
        unscaled,
    )


def _solve_outer(spec, mode, block: _Block, x_outer, coefs):
    """Operator values at the group states for each outer state: ``(B, G)``."""
    eps, h = spec.epsilon, spec.step
    pts = euler_images(mode, eps, h, x_outer, block.unique_incs)  # (B, U, d)
    B, U, d = pts.shape
    sel = argmax_features(quadratic_features(pts.reshape(-1, d)), coefs).reshape(B, U)
    chosen = coefs.T[sel[:, block.row_inc]]  # (B, R, p)
    V = np.einsum("rp,brp->br", block.feats, chosen)
    y = combine(mode, eps, h, block.x_groups, V, block.P1, block.P2, block.starts, block.counts)
    return y, sel


def _step(spec, plan, paths: PathTable, Z_next: MaxPlusFunction, k: int, threads: int, eta_min, ridge):
    """Build ``Z_{t_k}`` from ``Z_{t_{k+1}}``."""
    M, n = len(spec.modes), plan.n_in
    d = spec.dim
    coefs = Z_next.feature_coefficients()
    Qs = np.empty((M * n, d, d))
    bs = np.empty((M * n, d))
    cs = np.empty(M * n)
    used = np.zeros(len(Z_next), dtype=bool)
    unscaled = 0

    for m, mode in enumerate(spec.modes):
        states_t = paths.states[m, k]
        dW_t = paths.increments[k]
        if plan.shared_pairs:
            pairs = build_pairs(plan, paths.seed, k, m, 0)
            block = _prepare_block(spec, mode, states_t, dW_t, pairs, plan.moment_match)
            unscaled += block.unscaled
            per = max(1, _CHUNK_BUDGET // max(1, block.unique_incs.shape[0] * max(len(Z_next), block.feats.shape[0] // 4)))
            chunks = [np.arange(s, min(s + per, n)) for s in range(0, n, per)]

            def work(idx, block=block, mode=mode, states_t=states_t):
                y, sel = _solve_outer(spec, mode, block, states_t[idx], coefs)
                return y, sel

            if threads > 1 and len(chunks) > 1:
                with ThreadPoolExecutor(threads) as pool:
                    outs = list(pool.map(work, chunks))
            else:
                outs = [work(c) for c in chunks]
            Y = np.concatenate([o[0] for o in outs])  # (n, G)
            for o in outs:
                used[np.unique(o[1])] = True
            Q, b, c = fit_quadratic_many(block.x_groups, Y.T, ridge=ridge)
        else:

            def work(w, mode=mode, states_t=states_t, dW_t=dW_t, m=m):
                pairs = build_pairs(plan, paths.seed, k, m, w)
                block = _prepare_block(spec, mode, states_t, dW_t, pairs, plan.moment_match)
                y, sel = _solve_outer(spec, mode, block, states_t[w : w + 1], coefs)
                Q, b, c = fit_quadratic_many(block.x_groups, y[0], ridge=ridge)
                return Q, b, c, np.unique(sel), block.unscaled

            if threads > 1:
                with ThreadPoolExecutor(threads) as pool:
                    outs = list(pool.map(work, range(n)))
            else:
                outs = [work(w) for w in range(n)]
            Q = np.stack([o[0] for o in outs])
            b = np.stack([o[1] for o in outs])
            c = np.array([o[2] for o in outs])
            for o in outs:
                used[o[3]] = True
                unscaled += o[4]
        Qs[m * n : (m + 1) * n] = Q
        bs[m * n : (m + 1) * n] = b
        cs[m * n : (m + 1) * n] = c

    if not (np.all(np.isfinite(Qs)) and np.all(np.isfinite(bs)) and np.all(np.isfinite(cs))):
        bad = int(np.argmax(~np.isfinite(cs) | ~np.isfinite(bs).all(1) | ~np.isfinite(Qs).all((1, 2))))
        raise SolverError(f"non-finite fitted form at t={k * spec.step:g}, omega={bad % n}, m={spec.modes[bad // n].label}")
    max_clamp = 0.0
    if eta_min is not None:
        Qs, shift = project_concave_arrays(Qs, eta_min)
        max_clamp = float(shift.max())
    labels = tuple(mode.label for mode in spec.modes for _ in range(n))
    Z = MaxPlusFunction(Qs, bs, cs, labels)
    return Z, max_clamp, int(used.sum()), unscaled


def backward_solve(
    spec: ProblemSpec,
    plan: SamplePlan,
    seed: int,
    threads: int | None = None,
    eta_min: float | None = 0.0,
    ridge: float = 0.0,
    paths: PathTable | None = None,
) -> SolveResult:
    """Run the backward induction from ``T - h`` down to ``0``.

    ``eta_min=None`` disables the concavity projection of fitted forms.
    """
    validate_split(spec)
    for mode in spec.modes:
        diffusion_conditioning(mode, spec.state_box)
    M = len(spec.modes)
    if len(spec.terminal) > M * plan.n_in:
        raise ValueError(
            f"terminal set has {len(spec.terminal)} forms, more than M*N_in = {M * plan.n_in}"
        )
    threads = default_threads() if threads is None else max(1, int(threads))
    t0 = time.perf_counter()
    if paths is None:
        paths = simulate_paths(spec, plan, seed)
    K = spec.n_steps
    Z = {K: spec.terminal}
    result = SolveResult(Z, spec, plan, int(seed), n_clamped_states=paths.n_clamped)
    for k in range(K - 1, -1, -1):
        ts = time.perf_counter()
        try:
            raw, clamp, churn, unscaled = _step(spec, plan, paths, Z[k + 1], k, threads, eta_min, ridge)
        except SolverError:
            raise
        except Exception as exc:
            raise SolverError(f"step t={k * spec.step:g} failed: {exc}") from exc
        Z[k] = prune_duplicates(raw, 0.0)
        if len(Z[k]) > M * plan.n_in:
            raise SolverError("cardinality bound card(Z_t) <= M*N_in violated")
        diag = StepDiagnostics(k * spec.step, len(raw), len(Z[k]), clamp, churn, unscaled, time.perf_counter() - ts)
        result.diagnostics.append(diag)
        logger.info("t=%.4g: %d forms (%d unique), clamp %.3g, %.2fs", diag.t, diag.n_forms, diag.n_unique, clamp, diag.seconds)
    result.seconds = time.perf_counter() - t0
    return result


def evaluate_value(result: SolveResult, t: float, x) -> np.ndarray:
    """Approximate value at time ``t`` for one point or an array of points."""
    F = result.value_set(t)
    x = np.asarray(x, dtype=float)
    vals = F(x.reshape(-1, F.dim))
    return float(vals[0]) if x.ndim == 1 else vals


def argmax_mode(result: SolveResult, t: float, x) -> list[str]:
    """Label of the mode whose form attains the maximum at each point."""
    F = result.value_set(t)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    idx = np.argmax(F.values(X), axis=1)
    return [F.labels[i] for i in idx]


def write_value_sets(fp, result: SolveResult) -> None:
    times = result.spec.times
    write_csv(fp, ((times[k], result.Z[k]) for k in sorted(result.Z)))


def write_manifest(fp, entries: dict) -> None:
    """Flat ``key = value`` text, one entry per line, keys sorted."""
    for key in sorted(entries):
        fp.write(f"{key} = {entries[key]}\n")


def result_manifest(result: SolveResult, spec_hash: str = "") -> dict:
    out = {
        "seed": result.seed,
        "plan": " ".join(str(v) for v in result.plan.as_tuple()),
        "moment_match": result.plan.moment_match,
        "spec_hash": spec_hash,
        "wall_clock_seconds": f"{result.seconds:.3f}",
        "clamped_states": result.n_clamped_states,
    }
    for dg in result.diagnostics:
        key = f"step.{dg.t:.6g}"
        out[key] = (
            f"forms={dg.n_forms} unique={dg.n_unique} max_clamp={dg.max_clamp:.3g} "
            f"churn={dg.churn} unscaled_groups={dg.unscaled_groups} seconds={dg.seconds:.3f}"
        )
    return out


def value_sets_digest(result: SolveResult) -> str:
    h = hashlib.sha256()
    for k in sorted(result.Z):
        h.update(result.Z[k].params().tobytes())
    return h.hexdigest()
