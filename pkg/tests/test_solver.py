from __future__ import annotations

import io
import time

import numpy as np
import pytest

from maxplus_hjb.model import uncertain_correlation_problem
from maxplus_hjb.quadform import MaxPlusFunction, QuadraticForm, read_csv
from maxplus_hjb.sampling import SamplePlan
from maxplus_hjb.solver import (
    SolverError,
    argmax_mode,
    backward_solve,
    evaluate_value,
    result_manifest,
    value_sets_digest,
    write_manifest,
    write_value_sets,
)

SMALL = SamplePlan.of(60, 60, 6, 10, 2)


@pytest.fixture(scope="module")
def spec():
    # few terminal forms so the small plan respects M*N_in
    return uncertain_correlation_problem(n_forms=61, target_eps=0.5)


@pytest.fixture(scope="module")
def small_result(spec):
    return backward_solve(spec, SMALL, 3)


def test_constant_terminal_is_fixed_point():
    const = MaxPlusFunction.from_forms([QuadraticForm.constant(4.0, 2)])
    spec = uncertain_correlation_problem(rhos=(0.8,), horizon=0.05, terminal=const)
    res = backward_solve(spec, SamplePlan.of(50, 500, 10, 50, 2), 0)
    Z0 = res.Z[0]
    assert np.allclose(Z0.Q, 0, atol=1e-9) and np.allclose(Z0.b, 0, atol=1e-9)
    assert np.allclose(Z0.c, 4.0, atol=1e-9)
    X = np.random.default_rng(0).uniform([20, 30], [80, 70], (50, 2))
    assert np.allclose(evaluate_value(res, 0.0, X), 4.0, atol=1e-8)


def test_smallest_instance_method5():
    const = MaxPlusFunction.from_forms([QuadraticForm(-np.eye(2) * 1e-3, [0.1, 0.0], 1.0)])
    spec = uncertain_correlation_problem(rhos=(0.8,), terminal=const)
    res = backward_solve(spec, SamplePlan.of(1, 1, 1, 1, 5), 0)
    assert all(len(res.Z[k]) == 1 for k in range(spec.n_steps))


def test_cardinality_bound(small_result, spec):
    for k in range(spec.n_steps):
        assert len(small_result.Z[k]) <= len(spec.modes) * SMALL.n_in
    assert small_result.Z[spec.n_steps] is spec.terminal


def test_terminal_cardinality_is_checked():
    spec = uncertain_correlation_problem(rhos=(0.8,))
    with pytest.raises(ValueError, match="M\\*N_in"):
        backward_solve(spec, SamplePlan.of(10, 10, 2, 5, 2), 0)


def test_evaluate_value_examples(small_result, spec):
    X = np.random.default_rng(1).uniform([20, 30], [80, 70], (100, 2))
    assert np.array_equal(evaluate_value(small_result, spec.horizon, X), spec.terminal(X))
    v0 = evaluate_value(small_result, 0.0, X)
    assert np.all(v0[:, None] >= small_result.Z[0].values(X) - 0)
    assert isinstance(evaluate_value(small_result, 0.0, [50.0, 50.0]), float)
    with pytest.raises(KeyError):
        evaluate_value(small_result, 0.07, X)


def test_singleton_constant_value_set(small_result):
    res = small_result
    saved = res.Z[0]
    try:
        res.Z[0] = MaxPlusFunction.from_forms([QuadraticForm.constant(2.0, 2)])
        assert evaluate_value(res, 0.0, [[30.0, 40.0], [70.0, 60.0]]).tolist() == [2.0, 2.0]
    finally:
        res.Z[0] = saved


def test_labels_follow_modes(small_result, spec):
    Z0 = small_result.Z[0]
    assert set(Z0.labels) <= {m.label for m in spec.modes}
    labels = argmax_mode(small_result, 0.0, [[50.0, 50.0], [20.0, 60.0]])
    assert all(l in {m.label for m in spec.modes} for l in labels)


def test_determinism_across_thread_counts(spec):
    a = backward_solve(spec, SMALL, 5, threads=1)
    b = backward_solve(spec, SMALL, 5, threads=3)
    assert value_sets_digest(a) == value_sets_digest(b)
    m3 = SamplePlan.of(40, 40, 4, 10, 3)
    assert value_sets_digest(backward_solve(spec, m3, 5, threads=1)) == value_sets_digest(backward_solve(spec, m3, 5, threads=2))


def test_nonfinite_fit_aborts_with_context():
    bad = MaxPlusFunction(np.zeros((1, 2, 2)), np.zeros((1, 2)), np.array([np.nan]))
    spec = uncertain_correlation_problem(rhos=(0.8,), terminal=bad)
    with pytest.raises(SolverError, match="t="):
        backward_solve(spec, SamplePlan.of(10, 10, 2, 5, 2), 0)


def test_method1_runs_and_reports_unscaled_groups():
    spec = uncertain_correlation_problem(rhos=(0.8,), horizon=0.05, n_forms=601)
    res = backward_solve(spec, SamplePlan.of(601, 601, 1, 1, 1), 0)
    assert res.diagnostics[0].unscaled_groups == 601


def test_every_method_runs():
    small = uncertain_correlation_problem(rhos=(0.8,), horizon=0.1, n_forms=21, target_eps=10.0)
    plans = [
        SamplePlan.of(30, 30, 1, 1, 1),
        SamplePlan.of(30, 60, 3, 20, 2),
        SamplePlan.of(30, 60, 3, 20, 3),
        SamplePlan.of(30, 90, 3, 30, 4),
        SamplePlan.of(30, 900, 1, 1, 5),
    ]
    for plan in plans:
        res = backward_solve(small, plan, 0)
        assert np.all(np.isfinite(res.Z[0].params()))
        assert len(res.Z[0]) <= plan.n_in


def test_mode_dominance():
    """Adding a mode can only raise the value, up to Monte Carlo noise."""
    both = uncertain_correlation_problem(n_forms=241, target_eps=0.2)
    one = uncertain_correlation_problem(rhos=(-0.8,), n_forms=241, target_eps=0.2)
    plan = SamplePlan.of(300, 600, 6, 100, 2)
    X = np.column_stack([np.arange(20, 81.0), np.full(61, 50.0)])
    singles, controlled = [], []
    for seed in (1, 2, 3):
        singles.append(evaluate_value(backward_solve(one, plan, seed), 0.0, X))
        controlled.append(evaluate_value(backward_solve(both, plan, seed), 0.0, X))
    tol = 3 * np.std(singles, axis=0, ddof=1)
    for s, c in zip(singles, controlled):
        assert np.all(c >= s - tol - 1e-12)


def test_cost_grows_with_initial_sample_count():
    spec = uncertain_correlation_problem(rhos=(0.8,), horizon=0.05, n_forms=241, target_eps=0.2)
    times = []
    for n in (250, 500, 1000):
        plan = SamplePlan.of(n, 200, 10, 20, 2)
        best = np.inf
        for _ in range(2):
            t0 = time.perf_counter()
            backward_solve(spec, plan, 0)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    assert times[0] < times[1] < times[2]


def test_value_set_csv_and_manifest(small_result, spec):
    buf = io.StringIO()
    write_value_sets(buf, small_result)
    back = read_csv(buf.getvalue())
    assert sorted(back) == pytest.approx(list(spec.times))
    assert np.array_equal(back[0.0].params(), small_result.Z[0].params())
    out = io.StringIO()
    write_manifest(out, result_manifest(small_result, "abc"))
    lines = out.getvalue().splitlines()
    assert lines == sorted(lines)
    assert "spec_hash = abc" in lines and "seed = 3" in lines
