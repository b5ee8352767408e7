"""How the regression pairs are drawn matters.

Method 2 shares one random state/increment sample among all outer samples.
Method 3 draws a fresh one for each, so every candidate form carries its own
noise and the max over forms is biased upward.  Method 1 regresses each
outer sample on its own single increment and fails even after one step.
"""

# %%
from __future__ import annotations

from maxplus_hjb import EvaluationGrid, SamplePlan, backward_solve, error_norms, evaluate_value, oracle_constant_mode
from maxplus_hjb import uncertain_correlation_problem

grid = EvaluationGrid().points()
spec = uncertain_correlation_problem(rhos=(-0.8,))
ref = oracle_constant_mode(spec, spec.modes[0], grid)

# %% [markdown]
# Methods 2 and 3 at ``N = (1000, 1000, 10, 100)``: about half a minute each.

# %%
for method in (2, 3):
    res = backward_solve(spec, SamplePlan.of(1000, 1000, 10, 100, method), seed=1)
    e_inf, e_1 = error_norms(evaluate_value(res, 0.0, grid), ref)
    print(f"method {method}: e_inf {e_inf:.3f}  e_1 {e_1:.3f}")

# %% [markdown]
# One step before the horizon, Method 1 against Method 2 with the same
# number of initial samples.

# %%
one_step = uncertain_correlation_problem(rhos=(-0.8,), horizon=0.05)
ref1 = oracle_constant_mode(one_step, one_step.modes[0], grid)
for plan in (SamplePlan.of(1000, 1000, 1, 1, 1), SamplePlan.of(1000, 1000, 10, 100, 2)):
    res = backward_solve(one_step, plan, seed=1)
    e_inf, _ = error_norms(evaluate_value(res, 0.0, grid), ref1)
    print(f"method {plan.method} at T-h: e_inf {e_inf:.3f}")
