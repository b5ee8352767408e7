"""Concave quadratic forms and their finite suprema.

A quadratic form is stored as the triple ``(Q, b, c)`` and evaluated as
``q(x) = 0.5 * x'Qx + b.x + c``.  A :class:`MaxPlusFunction` is a finite
family of such forms, read as the pointwise supremum of its members.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ETA_MIN = 1e-10


class PayoffApproximationError(ValueError):
    """Raised when a payoff approximation misses its error target."""

    def __init__(self, achieved: float, target: float):
        self.achieved = achieved
        self.target = target
        super().__init__(
            f"achieved sup-norm error {achieved:.6g} exceeds target {target:.6g}; "
            "increase n_forms or adjust c_kink"
        )


def _symmetrize(Q: np.ndarray) -> np.ndarray:
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    """The triple ``(Q, b, c)`` of ``x -> 0.5 x'Qx + b.x + c``.

    ``Q`` is symmetrized on construction so that ``Q[i, j] == Q[j, i]``
    holds bit for bit.  With ``strict=True`` every eigenvalue of ``Q`` must
    be at most ``-eta_min``.
    """

    Q: np.ndarray
    b: np.ndarray
    c: float
    strict: bool = False
    eta_min: float = DEFAULT_ETA_MIN

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        if Q.ndim == 0:
            Q = Q.reshape(1, 1)
        d = b.shape[0]
        if Q.shape != (d, d):
            raise ValueError(f"Q has shape {Q.shape}, expected {(d, d)}")
        Q = _symmetrize(Q)
        Q.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))
        if self.strict:
            top = np.linalg.eigvalsh(Q).max()
            if top > -self.eta_min:
                raise ValueError(
                    f"largest eigenvalue {top:.3g} violates the strict concavity floor "
                    f"-{self.eta_min:g}"
                )

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @classmethod
    def constant(cls, value: float, dim: int) -> "QuadraticForm":
        return cls(np.zeros((dim, dim)), np.zeros(dim), value)

    def __call__(self, x) -> float:
        return evaluate(self, x)

    def as_tuple(self):
        return self.Q, self.b, self.c

    def __repr__(self) -> str:
        return f"QuadraticForm(Q={self.Q.tolist()}, b={self.b.tolist()}, c={self.c!r})"


def evaluate(q: QuadraticForm, x) -> float:
    """Value of ``q`` at a single point ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (q.dim,):
        raise ValueError(f"point of shape {x.shape} does not match form dimension {q.dim}")
    return float(0.5 * x @ q.Q @ x + q.b @ x + q.c)


def compose_affine(q: QuadraticForm, A, b0) -> QuadraticForm:
    """Return the form of ``x -> q(A x + b0)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b0 = np.asarray(b0, dtype=float).reshape(-1)
    d = q.dim
    if A.shape[0] != d or b0.shape != (d,):
        raise ValueError(f"affine map shapes {A.shape}, {b0.shape} do not match dimension {d}")
    Q, b, c = compose_affine_arrays(q.Q, q.b, np.asarray(q.c), A, b0)
    return QuadraticForm(Q, b, float(c))


def compose_affine_arrays(Q, b, c, A, b0):
    """Batched form of :func:`compose_affine` over leading axes."""
    Qb0 = np.einsum("...ij,...j->...i", Q, b0)
    Qn = np.einsum("...ki,...kl,...lj->...ij", A, Q, A)
    bn = np.einsum("...ki,...k->...i", A, Qb0 + b)
    cn = 0.5 * np.einsum("...i,...i->...", b0, Qb0) + np.einsum("...i,...i->...", b, b0) + c
    return _symmetrize(Qn), bn, cn


def n_features(dim: int) -> int:
    return (dim + 1) * (dim + 2) // 2


def quadratic_features(X) -> np.ndarray:
    """Monomials ``[x_k x_l (k<=l), x_k, 1]`` of the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    d = X.shape[-1]
    iu, ju = np.triu_indices(d)
    return np.concatenate(
        [X[..., iu] * X[..., ju], X, np.ones(X.shape[:-1] + (1,))], axis=-1
    )


@dataclass(frozen=True, eq=False)
class MaxPlusFunction:
    """Finite supremum of quadratic forms, stored as stacked arrays.

    ``Q`` has shape ``(n, d, d)``, ``b`` shape ``(n, d)`` and ``c`` shape
    ``(n,)``.  ``labels`` optionally tags each form (e.g. with the control
    mode that produced it).
    """

    Q: np.ndarray
    b: np.ndarray
    c: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        Q = _symmetrize(np.array(self.Q, dtype=float))
        b = np.array(self.b, dtype=float)
        c = np.array(self.c, dtype=float).reshape(-1)
        if Q.ndim != 3 or b.ndim != 2:
            raise ValueError("expected Q of shape (n, d, d) and b of shape (n, d)")
        n, d = b.shape
        if n == 0:
            raise ValueError("a MaxPlusFunction needs at least one form")
        if Q.shape != (n, d, d) or c.shape != (n,):
            raise ValueError(f"inconsistent shapes {Q.shape}, {b.shape}, {c.shape}")
        labels = tuple(self.labels) if self.labels else ("",) * n
        if len(labels) != n:
            raise ValueError("one label per form is required")
        for arr in (Q, b, c):
            arr.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_forms(cls, forms: Sequence[QuadraticForm], labels: Sequence[str] = ()):
        forms = list(forms)
        if not forms:
            raise ValueError("a MaxPlusFunction needs at least one form")
        dims = {q.dim for q in forms}
        if len(dims) != 1:
            raise ValueError(f"forms of mixed dimensions {sorted(dims)}")
        return cls(
            np.stack([q.Q for q in forms]),
            np.stack([q.b for q in forms]),
            np.array([q.c for q in forms]),
            tuple(labels),
        )

    @property
    def dim(self) -> int:
        return self.b.shape[1]

    def __len__(self) -> int:
        return self.c.shape[0]

    def form(self, i: int) -> QuadraticForm:
        return QuadraticForm(self.Q[i], self.b[i], self.c[i])

    @property
    def forms(self) -> list[QuadraticForm]:
        return [self.form(i) for i in range(len(self))]

    def values(self, X) -> np.ndarray:
        """Every form evaluated at every row of ``X``: shape ``(n_points, n_forms)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        quad = 0.5 * np.einsum("pi,nij,pj->pn", X, self.Q, X)
        return quad + X @ self.b.T + self.c

    def __call__(self, X) -> np.ndarray:
        """Max-plus value at every point of an array of shape ``(..., d)``."""
        X = np.asarray(X, dtype=float)
        if X.ndim <= 2:
            return self.values(X).max(axis=1)
        return self.values(X.reshape(-1, X.shape[-1])).max(axis=1).reshape(X.shape[:-1])

    def feature_coefficients(self) -> np.ndarray:
        """Coefficients matching :func:`quadratic_features`, shape ``(p, n)``."""
        d = self.dim
        iu, ju = np.triu_indices(d)
        quad = self.Q[:, iu, ju] * np.where(iu == ju, 0.5, 1.0)
        return np.concatenate([quad, self.b, self.c[:, None]], axis=1).T.copy()

    def subset(self, index) -> "MaxPlusFunction":
        index = np.asarray(index)
        return MaxPlusFunction(
            self.Q[index], self.b[index], self.c[index], tuple(self.labels[i] for i in index)
        )

    def params(self) -> np.ndarray:
        """Flat coefficient rows ``[Q.ravel(), b, c]``."""
        n = len(self)
        return np.concatenate([self.Q.reshape(n, -1), self.b, self.c[:, None]], axis=1)


def sup_evaluate(F: MaxPlusFunction, x) -> tuple[float, int]:
    """Maximum over the forms of ``F`` at ``x`` and the lowest maximizing index."""
    x = np.asarray(x, dtype=float)
    if x.shape != (F.dim,):
        raise ValueError(f"point of shape {x.shape} does not match dimension {F.dim}")
    vals = F.values(x[None, :])[0]
    i = int(np.argmax(vals))
    return float(vals[i]), i


def prune_duplicates(F: MaxPlusFunction, tol: float = 0.0) -> MaxPlusFunction:
    """Drop forms whose coefficients lie within ``tol`` of an earlier kept form.

    Comparison is component-wise on ``(Q, b, c)``; the first occurrence is
    kept, so the output order is a subsequence of the input order.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    P = F.params()
    if tol == 0:
        _, first = np.unique(P, axis=0, return_index=True)
        keep = np.sort(first)
    else:
        keep = []
        for i in range(P.shape[0]):
            if keep and np.any(np.max(np.abs(P[keep] - P[i]), axis=1) <= tol):
                continue
            keep.append(i)
        keep = np.array(keep)
    if keep.shape[0] == len(F):
        return F
    return F.subset(keep)


# -- ridge payoffs -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RidgePayoff:
    """Payoff ``psi(x) = g(u0 . x)`` with ``g`` continuous piecewise linear.

    ``g`` interpolates ``values`` at the increasing ``knots`` and extends
    linearly with ``left_slope`` / ``right_slope`` outside them.
    """

    direction: np.ndarray
    knots: np.ndarray
    values: np.ndarray
    left_slope: float = 0.0
    right_slope: float = 0.0

    def __post_init__(self):
        u0 = np.array(self.direction, dtype=float).reshape(-1)
        knots = np.array(self.knots, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if knots.shape != values.shape or knots.size == 0:
            raise ValueError("knots and values must be nonempty and of equal length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "direction", u0)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    @classmethod
    def butterfly(cls, K1: float, K2: float, direction=(1.0, -1.0)) -> "RidgePayoff":
        """``(s - K1)^+ - (s - K2)^+`` on the spread ``s = u0 . x``."""
        if not K1 < K2:
            raise ValueError("butterfly needs K1 < K2")
        return cls(direction, [K1, K2], [0.0, K2 - K1], 0.0, 0.0)

    @property
    def dim(self) -> int:
        return self.direction.shape[0]

    def slopes(self) -> np.ndarray:
        """Slopes of the ``len(knots) + 1`` linear pieces, left to right."""
        inner = np.diff(self.values) / np.diff(self.knots)
        return np.concatenate([[self.left_slope], inner, [self.right_slope]])

    def profile(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k, v = self.knots, self.values
        out = np.interp(s, k, v)
        out = np.where(s < k[0], v[0] + self.left_slope * (s - k[0]), out)
        return np.where(s > k[-1], v[-1] + self.right_slope * (s - k[-1]), out)

    def slope_at(self, s: float) -> float:
        """Derivative of ``g``; the mean of the one-sided slopes at a knot."""
        sl = self.slopes()
        hit = np.isclose(self.knots, s, rtol=0, atol=1e-12)
        if hit.any():
            i = int(np.argmax(hit))
            return 0.5 * (sl[i] + sl[i + 1])
        return float(sl[np.searchsorted(self.knots, s)])

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.profile(X @ self.direction)


def _lowest_intercept(payoff: RidgePayoff, anchor: float, slope: float, curvature: float) -> float:
    """min over s of g(s) - slope (s - anchor) + curvature/2 (s - anchor)^2.

    The objective is a convex parabola on every linear piece of g, so the
    minimum is found exactly piece by piece.
    """
    edges = np.concatenate([[-np.inf], payoff.knots, [np.inf]])
    sl = payoff.slopes()
    best = np.inf
    for lo, hi, piece_slope in zip(edges[:-1], edges[1:], sl):
        if curvature > 0:
            s_star = anchor - (piece_slope - slope) / curvature
        else:
            # linear objective: only bounded when the piece slope matches
            if piece_slope != slope:
                return -np.inf
            s_star = anchor
        s_star = min(max(s_star, lo), hi)
        if not np.isfinite(s_star):
            continue
        val = payoff.profile(s_star) - slope * (s_star - anchor) + 0.5 * curvature * (s_star - anchor) ** 2
        best = min(best, float(val))
    return best


def approximate_payoff(
    payoff: RidgePayoff,
    band: tuple[float, float] = (-100.0, 100.0),
    n_forms: int = 601,
    c_kink: float = 3.0,
    transverse: float = 1e-8,
    target_eps: float = 0.05,
    transverse_radius: float = 150.0,
    n_scan: int = 100_001,
    adaptive: bool = True,
    c_min: float = 1e-3,
) -> tuple[MaxPlusFunction, float]:
    """Under-approximate a ridge payoff by ``n_forms`` concave quadratics.

    Anchors are a uniform grid over ``band`` plus the kinks of the profile:
    a convex kink carries both one-sided tangents, a concave kink a single
    tangent with the mean slope.  Each form matches the profile's slope at
    its anchor, has curvature ``c_j`` along ``u0`` and ``transverse``
    orthogonally to it, and its intercept is lowered just enough to stay
    below the payoff everywhere (this only bites next to concave kinks).

    With ``adaptive=False`` every ``c_j`` equals ``c_kink``.  Otherwise a
    tangent at distance ``a`` from a concave kink with slope drop ``J`` only
    needs ``c >= J / (2 a)`` to stay below the payoff, so ``c_j`` is that
    bound summed over concave kinks and clipped to ``[c_min, c_kink]``.
    Flat curvature away from the kinks matters downstream: the solver only
    touches the value at sample states, and the envelope of strongly curved
    forms sags between them.

    The achieved error is the dense-scan profile error on ``band`` plus the
    transverse penalty at distance ``transverse_radius`` from the ridge axis.
    Returns ``(F, achieved_error)``; raises :class:`PayoffApproximationError`
    when the error exceeds ``target_eps``.
    """
    s_lo, s_hi = map(float, band)
    if n_forms < 2 or not s_lo < s_hi:
        raise ValueError("need n_forms >= 2 and a nonempty band")
    if c_kink <= 0 or transverse < 0 or target_eps <= 0:
        raise ValueError("c_kink and target_eps must be positive, transverse nonnegative")
    if adaptive and not 0 < c_min <= c_kink:
        raise ValueError("c_min must lie in (0, c_kink]")

    inside = (payoff.knots > s_lo) & (payoff.knots < s_hi)
    slopes = payoff.slopes()
    left, right = slopes[:-1][inside], slopes[1:][inside]
    kinks = payoff.knots[inside]
    convex = right > left
    concave = right < left
    # convex kinks get both one-sided tangents, concave kinks one averaged tangent
    n_extra = 2 * int(convex.sum()) + int(concave.sum())
    n_grid = n_forms - n_extra
    if n_grid < 2:
        raise ValueError("n_forms too small to hold the band ends and every kink")
    grid = np.linspace(s_lo, s_hi, n_grid)
    pts = [(v, payoff.slope_at(v)) for v in grid]
    pts += [(k, l) for k, l in zip(kinks[convex], left[convex])]
    pts += [(k, r) for k, r in zip(kinks[convex], right[convex])]
    pts += [(k, 0.5 * (l + r)) for k, l, r in zip(kinks[concave], left[concave], right[concave])]
    pts.sort()
    anchors = np.array([a for a, _ in pts])

    u0 = payoff.direction
    nrm2 = float(u0 @ u0)
    P_perp = np.eye(u0.size) - np.outer(u0, u0) / nrm2
    uu = np.outer(u0, u0)
    all_slopes = payoff.slopes()
    drops = np.maximum(all_slopes[:-1] - all_slopes[1:], 0.0)

    Qs, bs, cs, heights, tangents, curv = [], [], [], [], [], []
    for s_j, slope in pts:
        c_j = c_kink
        if adaptive:
            dist = np.abs(payoff.knots - s_j)
            active = drops > 0
            if not np.any(active & (dist == 0)):
                need = np.sum(drops[active] / (2.0 * dist[active])) if np.any(active) else 0.0
                c_j = float(min(c_kink, max(c_min, need)))
        a_j = min(float(payoff.profile(s_j)), _lowest_intercept(payoff, s_j, slope, c_j))
        Qs.append(-c_j * uu - transverse * P_perp)
        bs.append((slope + c_j * s_j) * u0)
        cs.append(a_j - slope * s_j - 0.5 * c_j * s_j**2)
        heights.append(a_j)
        tangents.append(slope)
        curv.append(c_j)
    F = MaxPlusFunction(np.stack(Qs), np.stack(bs), np.array(cs), ("terminal",) * anchors.size)

    s = np.linspace(s_lo, s_hi, n_scan)
    heights, tangents, curv = np.array(heights), np.array(tangents), np.array(curv)
    err = 0.0
    for chunk in np.array_split(np.arange(n_scan), max(1, n_scan * anchors.size // 5_000_000)):
        ds = s[chunk, None] - anchors[None, :]
        sup = np.max(heights + tangents * ds - 0.5 * curv * ds**2, axis=1)
        err = max(err, float(np.max(payoff.profile(s[chunk]) - sup)))
    achieved = err + 0.5 * transverse * transverse_radius**2
    if achieved > target_eps:
        raise PayoffApproximationError(achieved, target_eps)
    return F, achieved


# -- CSV ----------------------------------------------------------------------


def csv_header(dim: int) -> list[str]:
    iu, ju = np.triu_indices(dim)
    return (
        ["t", "mode_label"]
        + [f"Q{i + 1}{j + 1}" for i, j in zip(iu, ju)]
        + [f"b{i + 1}" for i in range(dim)]
        + ["c"]
    )


def write_csv(fp, items: Iterable[tuple[float, MaxPlusFunction]]) -> None:
    """Write ``(t, F)`` pairs as one row per form.

    Columns: ``t, mode_label``, the upper triangle of ``Q`` row-major
    (``Q11, Q12, ..., Qdd``), ``b1..bd`` and ``c``.  Floats use ``repr`` so
    the file round-trips exactly.
    """
    writer = csv.writer(fp, lineterminator="\n")
    header_written = False
    for t, F in items:
        if not header_written:
            writer.writerow(csv_header(F.dim))
            header_written = True
        iu, ju = np.triu_indices(F.dim)
        for i in range(len(F)):
            row = [repr(float(t)), F.labels[i]]
            row += [repr(float(v)) for v in F.Q[i][iu, ju]]
            row += [repr(float(v)) for v in F.b[i]]
            row.append(repr(float(F.c[i])))
            writer.writerow(row)


def read_csv(fp) -> dict[float, MaxPlusFunction]:
    """Inverse of :func:`write_csv`; returns forms grouped by ``t``."""
    if isinstance(fp, str):
        fp = io.StringIO(fp)
    reader = csv.reader(fp)
    header = next(reader)
    n_q = sum(1 for h in header if h.startswith("Q"))
    d = int(round((np.sqrt(8 * n_q + 1) - 1) / 2))
    iu, ju = np.triu_indices(d)
    grouped: dict[float, list] = {}
    for row in reader:
        t = float(row[0])
        nums = np.array([float(v) for v in row[2:]])
        Q = np.zeros((d, d))
        Q[iu, ju] = nums[:n_q]
        Q[ju, iu] = nums[:n_q]
        grouped.setdefault(t, []).append((row[1], Q, nums[n_q : n_q + d], nums[-1]))
    out = {}
    for t, rows in grouped.items():
        labels, Qs, bs, cs = zip(*rows)
        out[t] = MaxPlusFunction(np.stack(Qs), np.stack(bs), np.array(cs), labels)
    return out
