"""Uncertain correlation: switch between rho = -0.8 and rho = 0.8.

The controlled value dominates both constant-correlation values, and the
argmax form at each state tells which correlation is the worst case there.
Writes ``figure.csv`` in the current directory.
"""

# %%
from __future__ import annotations

import csv

import numpy as np

from maxplus_hjb import EvaluationGrid, SamplePlan, backward_solve, evaluate_value, uncertain_correlation_problem
from maxplus_hjb.solver import argmax_mode

plan = SamplePlan.of(400, 1000, 10, 100, 2)
grid = EvaluationGrid().points()
# 241 payoff forms keep the terminal set within M * N_in
both = uncertain_correlation_problem(n_forms=241)

# %%
curves = {}
for mode in both.modes:
    spec = uncertain_correlation_problem(rhos=(float(mode.label.split("=")[1]),), n_forms=241)
    curves[mode.label] = evaluate_value(backward_solve(spec, plan, seed=1), 0.0, grid)
res = backward_solve(both, plan, seed=1)
curves["controlled"] = evaluate_value(res, 0.0, grid)
labels = argmax_mode(res, 0.0, grid)

# %% [markdown]
# With rho = -0.8 the spread x1 - x2 has the larger variance.  Below the
# middle of the payoff the convex kink at K1 rewards variance, so rho = -0.8
# gives the higher value; towards the concave kink at K2 less variance is
# better and rho = 0.8 wins.  Around the middle, where both kinks are within
# reach, switching correlation as the spread moves beats either constant
# choice by more than one unit.

# %%
for i in range(0, 61, 5):
    row = "  ".join(f"{k}={curves[k][i]:.3f}" for k in curves)
    print(f"xi1={grid[i, 0]:.0f}  {row}  argmax={labels[i]}")
gap = curves["controlled"] - np.maximum(curves["rho=-0.8"], curves["rho=0.8"])
print("min of controlled - max(single):", gap.min())

# %%
with open("figure.csv", "w", newline="") as fp:
    w = csv.writer(fp)
    w.writerow(["xi1"] + [f"v_{k}" for k in curves])
    for i in range(grid.shape[0]):
        w.writerow([grid[i, 0]] + [curves[k][i] for k in curves])
print("wrote figure.csv")
