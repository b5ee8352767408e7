"""Probabilistic one-step operator applied to a quadratic selection.

For a state ``x`` and increments ``w_j`` the derivative estimators are
sample averages of ``phi_j * P^k(w_j)`` where ``phi_j`` is the selected
quadratic evaluated at the Euler image ``S(x, w_j)``::

    P^0 = 1
    P^1(w) = sigma_^{-T} w / h
    P^2(w) = sigma_^{-T} (w w' - h I) sigma_^{-1} / h^2

with ``sigma_ = eps * Sigma(x)``.  The operator value is
``D^0 + h * G(x, D^0, D^1, D^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ControlMode, nonlinear_generator
from .quadform import MaxPlusFunction, quadratic_features


class SingularDiffusionError(ValueError):
    pass


def _scaled_sigma_inverse(mode: ControlMode, eps: float, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    S = eps * mode.sigma(x)
    try:
        inv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        raise SingularDiffusionError(f"eps*Sigma is singular for mode {mode.label!r} at x={x.tolist()}") from None
    if not np.all(np.isfinite(inv)) or np.any(np.linalg.cond(S) > 1e14):
        raise SingularDiffusionError(f"eps*Sigma is singular for mode {mode.label!r} at x={x.tolist()}")
    return inv


def weight_P(k: int, mode: ControlMode, eps: float, h: float, x, w):
    """Weight polynomial of degree ``k`` at a single ``(x, w)``."""
    if k == 0:
        return 1.0
    P1, P2 = group_weights(mode, eps, h, x, np.asarray(w, dtype=float)[None, :])
    if k == 1:
        return P1[0]
    if k == 2:
        return P2[0]
    raise ValueError("k must be 0, 1 or 2")


def group_weights(mode: ControlMode, eps: float, h: float, x, W) -> tuple[np.ndarray, np.ndarray]:
    """``P^1`` and ``P^2`` at one state ``x`` for every row of ``W``."""
    inv = _scaled_sigma_inverse(mode, eps, x)
    W = np.asarray(W, dtype=float)
    d = W.shape[1]
    P1 = W @ inv / h
    outer = W[:, :, None] * W[:, None, :] - h * np.eye(d)
    P2 = np.einsum("ki,nkl,lj->nij", inv, outer, inv) / (h * h)
    return P1, P2


def moment_match(W, h: float) -> tuple[np.ndarray, bool]:
    """Antithetic copy plus exact second-moment rescaling of increments.

    Returns ``(W', rescaled)``: ``W'`` stacks ``W`` and ``-W`` (zero mean)
    and, when the empirical second moment is nonsingular, is linearly mapped
    so that ``mean(w w') == h I``.  Then ``sum P^1 = 0`` and ``sum P^2 = 0``
    exactly (up to rounding).
    """
    W = np.asarray(W, dtype=float)
    Wa = np.concatenate([W, -W])
    C = Wa.T @ Wa / Wa.shape[0]
    ev = np.linalg.eigvalsh(C)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        return Wa, False
    L = np.linalg.cholesky(C)
    return np.sqrt(h) * np.linalg.solve(L, Wa.T).T, True


def euler_images(mode: ControlMode, eps: float, h: float, x, W) -> np.ndarray:
    """``S(x, w)`` for every row of ``W``; ``x`` may be ``(d,)`` or ``(B, d)``."""
    x = np.asarray(x, dtype=float)
    W = np.asarray(W, dtype=float)
    A, b0 = mode.euler_affine(eps, h, W)  # (n, d, d), (n, d)
    return np.einsum("nij,...j->...ni", A, x) + b0


@dataclass(frozen=True, eq=False)
class SelectionMap:
    """Increments ``w_j`` paired with indices ``z_j`` into the next value set."""

    increments: np.ndarray
    indices: np.ndarray
    owner: tuple = ()

    def __len__(self) -> int:
        return self.indices.shape[0]


_ARGMAX_ROWS = 128


def argmax_features(feats: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    """Row-wise ``argmax(feats @ coefs)`` computed in cache-sized row blocks.

    ``feats`` is ``(n, p)`` and ``coefs`` ``(p, F)``.  The product has a tiny
    inner dimension, so materializing it whole is memory bound; blocks of
    rows keep it in cache.  Row results do not depend on the blocking.
    """
    n = feats.shape[0]
    out = np.empty(n, dtype=np.intp)
    buf = np.empty((min(n, _ARGMAX_ROWS), coefs.shape[1]))
    for i in range(0, n, _ARGMAX_ROWS):
        j = min(i + _ARGMAX_ROWS, n)
        blk = buf[: j - i]
        np.matmul(feats[i:j], coefs, out=blk)
        out[i:j] = blk.argmax(axis=1)
    return out


def select_argmax(Z_next: MaxPlusFunction, points) -> np.ndarray:
    """Lowest maximizing form index at each point; ``points`` is ``(..., d)``."""
    pts = np.asarray(points, dtype=float)
    feats = quadratic_features(pts.reshape(-1, pts.shape[-1]))
    return argmax_features(feats, Z_next.feature_coefficients()).reshape(pts.shape[:-1])


def build_selection(Z_next: MaxPlusFunction, mode: ControlMode, eps: float, h: float, x_outer, increments, owner=()) -> SelectionMap:
    """Argmax selection of ``Z_next`` at the Euler images of ``x_outer``."""
    W = np.atleast_2d(np.asarray(increments, dtype=float))
    pts = euler_images(mode, eps, h, x_outer, W)
    idx = select_argmax(Z_next, pts)
    vals = Z_next.values(pts)
    chosen = vals[np.arange(len(idx)), idx]
    if np.any(chosen < vals.max(axis=1) - 1e-9 * (1 + np.abs(chosen))):
        raise AssertionError("selection is not a maximizer")
    return SelectionMap(W, idx, tuple(owner))


def selected_values(Z_next: MaxPlusFunction, selection: SelectionMap, mode, eps, h, x) -> np.ndarray:
    """``q(S(x, w_j), z_j)`` for every entry of the selection."""
    pts = euler_images(mode, eps, h, x, selection.increments)
    Q = Z_next.Q[selection.indices]
    quad = 0.5 * np.einsum("ni,nij,nj->n", pts, Q, pts)
    return quad + np.einsum("ni,ni->n", Z_next.b[selection.indices], pts) + Z_next.c[selection.indices]


def estimate_D(k: int, mode: ControlMode, eps: float, h: float, x, selection: SelectionMap, Z_next: MaxPlusFunction):
    """Sample estimate of the ``k``-th derivative of the selected function."""
    if len(selection) == 0:
        raise ValueError("empty selection")
    v = selected_values(Z_next, selection, mode, eps, h, x)
    if k == 0:
        return float(v.mean())
    P1, P2 = group_weights(mode, eps, h, x, selection.increments)
    if k == 1:
        return v @ P1 / v.size
    if k == 2:
        D2 = np.einsum("n,nij->ij", v, P2) / v.size
        return 0.5 * (D2 + D2.T)
    raise ValueError("k must be 0, 1 or 2")


def combine(mode: ControlMode, eps: float, h: float, x_groups, V, P1, P2, starts, counts) -> np.ndarray:
    """Operator values from selected values grouped by state.

    ``V`` has shape ``(B, R)`` (``B`` outer samples, ``R`` rows); rows
    ``starts[g] : starts[g] + counts[g]`` belong to the group whose state is
    ``x_groups[g]``, with per-row weights ``P1`` ``(R, d)`` and ``P2``
    ``(R, d, d)``.  Returns ``(B, G)``.
    """
    counts = np.asarray(counts, dtype=float)
    D0 = np.add.reduceat(V, starts, axis=1) / counts
    D1 = np.add.reduceat(V[:, :, None] * P1, starts, axis=1) / counts[:, None]
    D2 = np.add.reduceat(V[:, :, None, None] * P2, starts, axis=1) / counts[:, None, None]
    D2 = 0.5 * (D2 + np.swapaxes(D2, -1, -2))
    x = np.broadcast_to(np.asarray(x_groups, dtype=float), D1.shape)
    return D0 + h * nonlinear_generator(mode, eps, x, D0, D1, D2)


def apply_operator(mode: ControlMode, eps: float, h: float, x, selection: SelectionMap, Z_next: MaxPlusFunction) -> float:
    """``D^0 + h G(x, D^0, D^1, D^2)`` for one state and one selection."""
    if len(selection) == 0:
        raise ValueError("empty selection")
    x = np.asarray(x, dtype=float)
    v = selected_values(Z_next, selection, mode, eps, h, x)
    P1, P2 = group_weights(mode, eps, h, x, selection.increments)
    y = combine(mode, eps, h, x[None, :], v[None, :], P1, P2, np.array([0]), np.array([v.size]))
    return float(y[0, 0])
