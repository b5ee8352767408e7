"""Max-plus approximation of the spread butterfly payoff.

The butterfly ``psi(x) = (x1 - x2 + 5)^+ - (x1 - x2 - 5)^+`` is neither
concave nor convex, so it is represented as the pointwise maximum of concave
quadratic forms.  Run with ``python demos/01_payoff_approximation.py``.
"""

# %%
from __future__ import annotations

import numpy as np

from maxplus_hjb import RidgePayoff, approximate_payoff

payoff = RidgePayoff.butterfly(-5.0, 5.0)
print("psi(50, 50) =", payoff([50.0, 50.0]))

# %% [markdown]
# Each form is a tangent of the ridge profile ``g`` at an anchor on the band
# ``[-100, 100]`` of spreads, bent downward along the spread direction and
# very slightly across it.  The curvature adapts to the distance to the
# nearest concave kink, so the envelope hugs ``g`` between anchors.

# %%
F, err = approximate_payoff(payoff)
print(f"{len(F)} forms, sup-error on the band {err:.4f}")

# %% [markdown]
# The envelope never exceeds the payoff and stays within the reported error.

# %%
s = np.linspace(-20.0, 20.0, 9)
X = np.column_stack([50.0 + s, np.full_like(s, 50.0)])
for si, exact, approx in zip(s, payoff(X), F(X)):
    print(f"spread {si:6.1f}   psi {exact:6.3f}   F {approx:6.3f}")

# %% [markdown]
# Fewer anchors give a coarser envelope.  A target that is too tight for the
# chosen number of forms raises ``PayoffApproximationError``.

# %%
for n in (61, 241, 601):
    _, e = approximate_payoff(payoff, n_forms=n, target_eps=10.0)
    print(f"n_forms={n:4d}  achieved error {e:.4f}")
