"""Least-squares fitting of quadratic forms and projection onto concave ones."""

from __future__ import annotations

import warnings

import numpy as np

from .quadform import QuadraticForm, compose_affine_arrays, n_features

RCOND = 1e-10


def _design(X: np.ndarray) -> np.ndarray:
    """Columns ``1, z_k, z_k z_l (k <= l)``."""
    d = X.shape[1]
    iu, ju = np.triu_indices(d)
    return np.hstack([np.ones((X.shape[0], 1)), X, X[:, iu] * X[:, ju]])


def fit_quadratic_many(X, Y, ridge: float = 0.0, rcond: float = RCOND):
    """Fit one quadratic per column of ``Y`` over the shared points ``X``.

    Features are centered and scaled by the sample mean/stddev (product
    columns are centered as well), the
    (possibly rank deficient) system is solved in the minimal-norm sense by
    SVD with singular values below ``rcond * s_max`` dropped, and the
    coefficients are mapped back to the original coordinates exactly.

    Returns arrays ``Q (k, d, d)``, ``b (k, d)``, ``c (k,)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    n, d = X.shape
    if Y.shape[0] != n:
        raise ValueError("one target per point is required")
    if n < n_features(d):
        warnings.warn(
            f"{n} points for {n_features(d)} quadratic coefficients; using the minimal-norm fit",
            RuntimeWarning,
            stacklevel=2,
        )
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Phi = _design((X - mu) / sd)
    # centering the product columns too makes constant data a pure intercept
    # fit, also when the system is underdetermined
    q_mean = Phi[:, 1 + d :].mean(axis=0)
    Phi[:, 1 + d :] -= q_mean
    U, s, Vt = np.linalg.svd(Phi, full_matrices=False)
    keep = s > rcond * s[0] if s.size else s.astype(bool)
    inv_s = np.zeros_like(s)
    if ridge > 0:
        inv_s[keep] = s[keep] / (s[keep] ** 2 + ridge)
    else:
        inv_s[keep] = 1.0 / s[keep]
    coef = Vt.T @ (inv_s[:, None] * (U.T @ Y))  # (p, k)

    k = coef.shape[1]
    iu, ju = np.triu_indices(d)
    Qz = np.zeros((k, d, d))
    quad = coef[1 + d :].T
    Qz[:, iu, ju] = np.where(iu == ju, 2.0, 1.0) * quad
    Qz[:, ju, iu] = Qz[:, iu, ju]
    bz = coef[1 : 1 + d].T
    cz = coef[0] - q_mean @ coef[1 + d :]
    # z = D x - D mu with D = diag(1/sd)
    D = np.diag(1.0 / sd)
    Q, b, c = compose_affine_arrays(Qz, bz, cz, D, -mu / sd)
    if squeeze:
        return Q[0], b[0], c[0]
    return Q, b, c


def fit_quadratic(X, y, ridge: float = 0.0, rcond: float = RCOND) -> QuadraticForm:
    """Least-squares quadratic form through the points ``(X[i], y[i])``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("at least one point is required")
    Q, b, c = fit_quadratic_many(X, y, ridge=ridge, rcond=rcond)
    return QuadraticForm(Q, b, float(c))


def project_concave_arrays(Q, eta_min: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Clamp eigenvalues of stacked symmetric matrices to ``<= -eta_min``.

    Returns the projected matrices and, per matrix, the largest amount by
    which an eigenvalue was lowered.  Matrices already compliant are
    returned untouched.
    """
    if eta_min < 0:
        raise ValueError("eta_min must be nonnegative")
    Q = np.asarray(Q, dtype=float)
    lam, vec = np.linalg.eigh(Q)
    shift = np.maximum(lam + eta_min, 0.0)
    bad = shift.max(axis=-1) > 0
    out = Q.copy()
    if np.any(bad):
        lam_c = np.minimum(lam[bad], -eta_min)
        P = np.einsum("...ik,...k,...jk->...ij", vec[bad], lam_c, vec[bad])
        out[bad] = 0.5 * (P + np.swapaxes(P, -1, -2))
    return out, shift.max(axis=-1)


def project_concave(q: QuadraticForm, eta_min: float = 0.0) -> QuadraticForm:
    """Nearest form with every eigenvalue of ``Q`` at most ``-eta_min``; ``b``, ``c`` unchanged."""
    Q, _ = project_concave_arrays(q.Q[None], eta_min)
    if Q[0] is q.Q or np.array_equal(Q[0], q.Q):
        return q
    return QuadraticForm(Q[0], q.b, q.c)
