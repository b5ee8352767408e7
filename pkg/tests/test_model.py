from __future__ import annotations

import math

import numpy as np
import pytest

from maxplus_hjb.model import (
    ControlMode,
    ProblemSpec,
    SplitConditionError,
    correlation_mode,
    correlation_parameters,
    diffusion_conditioning,
    euler_step,
    nonlinear_generator,
    split_trace,
    uncertain_correlation_problem,
    validate_split,
)
from maxplus_hjb.quadform import MaxPlusFunction, QuadraticForm


def _spec(eps, dim=2, modes=None):
    modes = modes or (correlation_mode(0.5),)
    terminal = MaxPlusFunction.from_forms([QuadraticForm.constant(0.0, dim)])
    return ProblemSpec(dim, 0.1, 0.05, eps, modes, terminal, np.array([[1, 2]] * dim, dtype=float))


def test_correlation_mode_diffusion():
    m = correlation_mode(0.8)
    S = m.sigma(np.array([50.0, 40.0]))
    assert S == pytest.approx(np.array([[20.0, 0.0], [0.3 * 0.8 * 40, 0.3 * 0.6 * 40]]))
    cov = S @ S.T
    corr = cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1])
    assert corr == pytest.approx(0.8)


def test_correlation_parameters_roundtrip():
    assert correlation_parameters(correlation_mode(-0.8, 0.4, 0.3)) == pytest.approx((0.4, 0.3, -0.8))
    general = ControlMode("g", np.eye(2), np.zeros(2), np.eye(2), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        correlation_parameters(general)


def test_split_condition_boundary_and_violation():
    assert split_trace(2, 0.75) == pytest.approx(2 * (1 - 0.5625) / (2 * 0.5625))
    assert validate_split(_spec(0.75)).passed
    # eps^2 = d/(d+2) = 1/2 sits exactly on the boundary
    assert validate_split(_spec(math.sqrt(0.5))).passed
    with pytest.raises(SplitConditionError):
        validate_split(_spec(0.6))
    assert not validate_split(_spec(0.6), strict=False).passed


def test_split_condition_scales_with_dimension():
    modes3 = (ControlMode("m", np.zeros((3, 3)), np.zeros(3), np.eye(3), np.zeros((3, 3, 3))),)
    assert validate_split(_spec(math.sqrt(3 / 5), 3, modes3)).passed
    with pytest.raises(SplitConditionError):
        validate_split(_spec(0.75, 3, modes3))


def test_trace_identity_of_proportional_split():
    rng = np.random.default_rng(0)
    m = correlation_mode(0.3)
    for _ in range(20):
        x = rng.uniform(10, 90, 2)
        eps = rng.uniform(0.7, 1.0)
        S = m.sigma(x)
        Sl_inv = np.linalg.inv(eps * S)
        B = rng.normal(size=(2, 2))
        M = B + B.T
        lhs = np.trace(S @ S.T @ Sl_inv.T @ M @ Sl_inv)
        assert lhs == pytest.approx(np.trace(M) / eps**2, rel=1e-10)


def test_euler_step_matches_affine_form():
    rng = np.random.default_rng(1)
    m = ControlMode("g", rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 2)))
    for _ in range(10):
        x, w = rng.normal(size=2), rng.normal(size=2)
        A, b0 = m.euler_affine(0.8, 0.1, w)
        assert euler_step(m, 0.8, 0.1, x, w) == pytest.approx(A @ x + b0, rel=1e-12, abs=1e-12)


def test_euler_step_rejects_bad_input():
    m = correlation_mode(0.0)
    with pytest.raises(ValueError):
        euler_step(m, 0.75, 0.0, [1.0, 1.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        euler_step(m, 0.75, 0.1, [1.0, 1.0, 1.0], [0.0, 0.0])


def test_nonlinear_generator_default_form():
    m = correlation_mode(0.5)
    x = np.array([30.0, 60.0])
    G = np.array([[-1.0, 0.2], [0.2, -0.5]])
    S = m.sigma(x)
    expected = 0.5 * (1 - 0.75**2) * np.trace(S @ S.T @ G)
    assert nonlinear_generator(m, 0.75, x, 3.0, np.zeros(2), G) == pytest.approx(expected)
    assert nonlinear_generator(m, 1.0, x, 3.0, np.zeros(2), G) == 0.0


def test_discount_must_be_constant_nonnegative():
    with pytest.raises(ValueError):
        ControlMode("d", np.zeros((1, 1)), [0.0], [[1.0]], np.zeros((1, 1, 1)), delta=-0.1)
    with pytest.raises(ValueError):
        ControlMode("d", np.zeros((1, 1)), [0.0], [[1.0]], np.zeros((1, 1, 1)), delta=np.array([0.1, 0.2]))


def test_generator_hook_is_used():
    hook = lambda x, r, p, G: np.full(np.shape(r), 7.0)
    m = ControlMode("h", np.zeros((1, 1)), [0.0], [[1.0]], np.zeros((1, 1, 1)), generator=hook)
    assert nonlinear_generator(m, 0.9, [[1.0]], np.array([0.0]), [[0.0]], [[[0.0]]]) == pytest.approx([7.0])


def test_problem_spec_validation():
    with pytest.raises(ValueError):
        uncertain_correlation_problem(horizon=0.25, step=0.1)
    with pytest.raises(ValueError):
        uncertain_correlation_problem(epsilon=0.0)
    with pytest.raises(ValueError):
        uncertain_correlation_problem(rhos=(0.8, 0.8))


def test_problem_times_and_lookup():
    spec = uncertain_correlation_problem(rhos=(0.8,))
    assert spec.n_steps == 5
    assert spec.times == pytest.approx([0, 0.05, 0.1, 0.15, 0.2, 0.25])
    assert spec.time_index(0.15) == 3
    with pytest.raises(KeyError):
        spec.time_index(0.07)


def test_diffusion_conditioning_flags_singular_box():
    m = correlation_mode(0.8)
    assert diffusion_conditioning(m, np.array([[20, 80], [30, 70]])) < 100
    with pytest.raises(ValueError):
        diffusion_conditioning(m, np.array([[0, 80], [30, 70]]))
    with pytest.raises(ValueError):
        diffusion_conditioning(correlation_mode(1.0), np.array([[20, 80], [30, 70]]))
