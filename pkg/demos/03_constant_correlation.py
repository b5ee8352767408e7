"""Solve one constant-correlation mode and compare with the reference value.

For a single mode the value is ``E[psi(x_T)]`` under a bivariate lognormal
law, which the oracle integrates to about 1e-8.  The sample plan here is
small so the script finishes in well under a minute; pass ``--full`` for the
plan ``(1000, 10000, 10, 1000, 2)`` (a few minutes per mode).
"""

# %%
from __future__ import annotations

import sys

import numpy as np

from maxplus_hjb import EvaluationGrid, SamplePlan, backward_solve, error_norms, evaluate_value, oracle_constant_mode
from maxplus_hjb import uncertain_correlation_problem

full = "--full" in sys.argv
plan = SamplePlan.of(1000, 10000, 10, 1000, 2) if full else SamplePlan.of(400, 1000, 10, 100, 2)
grid = EvaluationGrid().points()
# 241 forms reach the same payoff error as the default 601 and fit N_in = 400
n_forms = 601 if full else 241

# %%
for rho in (0.8, -0.8):
    spec = uncertain_correlation_problem(rhos=(rho,), n_forms=n_forms)
    res = backward_solve(spec, plan, seed=1)
    v = evaluate_value(res, 0.0, grid)
    ref = oracle_constant_mode(spec, spec.modes[0], grid)
    e_inf, e_1 = error_norms(v, ref)
    print(f"rho={rho:+.1f}  forms at t=0: {len(res.Z[0]):5d}  e_inf {e_inf:.3f}  e_1 {e_1:.3f}  ({res.seconds:.0f}s)")
    for xi1 in (30, 45, 50, 55, 70):
        i = xi1 - 20
        print(f"    xi1={xi1}  v={v[i]:.4f}  reference={ref[i]:.4f}")
