"""The sampled operator on a fixed selection of quadratic forms.

Shows the three facts the backward scheme relies on: the image of a fixed
selection is a quadratic function of the state, the argmax selection attains
the maximum over all selections, and constants pass through unchanged.
"""

# %%
from __future__ import annotations

import itertools

import numpy as np

from maxplus_hjb import MaxPlusFunction, QuadraticForm, apply_operator, build_selection, correlation_mode, fit_quadratic
from maxplus_hjb.scheme import SelectionMap, moment_match

rng = np.random.default_rng(0)
h, eps = 0.05, 0.75
mode = correlation_mode(0.8)

# %% [markdown]
# A small value set: three concave forms peaked at different states.

# %%
forms = []
for peak in ([45.0, 50.0], [55.0, 48.0], [50.0, 55.0]):
    Q = -0.02 * np.eye(2)
    forms.append(QuadraticForm(Q, -Q @ np.array(peak), 3.0))
Z = MaxPlusFunction.from_forms(forms)

# %% [markdown]
# Increments are made antithetic and rescaled so their sample covariance is
# exactly ``h I``.  Two raw draws become four increments.

# %%
W, scaled = moment_match(rng.normal(0.0, np.sqrt(h), (2, 2)), h)
print("increments:\n", W, "\nrescaled:", scaled)

# %% [markdown]
# With the selection frozen, the operator value is a quadratic function of the
# state: six points determine it and it predicts any other point exactly.

# %%
x0 = np.array([50.0, 50.0])
sel = build_selection(Z, mode, eps, h, x0, W)
X = rng.uniform([40.0, 40.0], [60.0, 60.0], (10, 2))
y = np.array([apply_operator(mode, eps, h, x, sel, Z) for x in X])
q = fit_quadratic(X[:6], y[:6])
print("held-out residual:", max(abs(q(x) - v) for x, v in zip(X[6:], y[6:])))

# %% [markdown]
# The argmax selection at ``x0`` gives the largest value among all
# ``3^4 = 81`` selections.

# %%
best = apply_operator(mode, eps, h, x0, sel, Z)
brute = max(
    apply_operator(mode, eps, h, x0, SelectionMap(W, np.array(idx)), Z)
    for idx in itertools.product(range(len(Z)), repeat=W.shape[0])
)
print(f"argmax selection {best:.12f}   brute force {brute:.12f}")

# %% [markdown]
# Adding a constant to every form shifts the result by the same constant.

# %%
shifted = MaxPlusFunction(Z.Q, Z.b, Z.c + 7.0)
print("shift:", apply_operator(mode, eps, h, x0, sel, shifted) - best)
