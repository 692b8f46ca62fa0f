"""Discrete probability measures on R^d and exact Wasserstein-q distances.

Every ambiguity set in this package is built on top of two primitives:
finitely supported measures (weighted point masses) and the exact optimal
transport distance between them.  Transport problems are solved as linear
programs (HiGHS); supports at desk scale (up to a few hundred atoms) make
exactness cheap.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "LocalSpace",
    "DiscreteMeasure",
    "w_q_1d",
    "w_q_discrete",
    "optimal_coupling",
    "kr_dual_check",
    "moment",
]

WEIGHT_TOL = 1e-9


class LocalSpace:
    """State space for one time step: R^d, or the centered box [-C, C]^d."""

    def __init__(self, dimension, bound=None):
        if dimension < 1 or int(dimension) != dimension:
            raise ValueError("dimension must be a positive integer")
        if bound is not None and bound <= 0:
            raise ValueError("bound C must be positive")
        self.dimension = int(dimension)
        self.bound = None if bound is None else float(bound)

    @property
    def bounded(self):
        return self.bound is not None

    def contains(self, point, tol=1e-9):
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dimension,):
            return False
        if self.bound is None:
            return True
        return bool(np.all(np.abs(point) <= self.bound + tol))

    def clip(self, points):
        """Project points onto the box (identity when unbounded)."""
        points = np.asarray(points, dtype=float)
        if self.bound is None:
            return points
        return np.clip(points, -self.bound, self.bound)

    def grid(self, resolution):
        """Uniform product grid with `resolution` points per coordinate."""
        if self.bound is None:
            raise ValueError("cannot grid an unbounded space")
        axis = np.linspace(-self.bound, self.bound, resolution)
        mesh = np.meshgrid(*([axis] * self.dimension), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def __repr__(self):
        return f"LocalSpace(d={self.dimension}, bound={self.bound})"


class DiscreteMeasure:
    """Probability measure sum_i w_i * delta_{x_i} with x_i in R^d.

    Weights must be nonnegative and sum to one within 1e-9 (then they are
    normalized exactly); larger deviations are rejected rather than silently
    repaired so upstream bugs surface early.
    """

    def __init__(self, support, weights, space=None):
        support = np.atleast_2d(np.asarray(support, dtype=float))
        weights = np.asarray(weights, dtype=float).ravel()
        if support.ndim != 2 or support.shape[0] == 0:
            raise ValueError("support must be a nonempty (n, d) array")
        if support.shape[0] != weights.shape[0]:
            raise ValueError("support and weights must have matching length")
        if np.any(weights < -WEIGHT_TOL):
            raise ValueError("negative weight")
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {total}, expected 1")
        weights = np.clip(weights, 0.0, None)
        if space is not None:
            if space.dimension != support.shape[1]:
                raise ValueError("support dimension does not match space")
            for x in support:
                if not space.contains(x):
                    raise ValueError(f"support point {x} outside local space")
        self.support = support
        self.weights = weights / weights.sum()
        self.space = space

    @property
    def dimension(self):
        return self.support.shape[1]

    @property
    def n_atoms(self):
        return self.support.shape[0]

    @classmethod
    def dirac(cls, point, space=None):
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(point[None, :], np.array([1.0]), space=space)

    @classmethod
    def empirical(cls, points, space=None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n), space=space)

    def mean(self):
        return self.weights @ self.support

    def expect(self, fn):
        """E[fn(X)] for a function applied row-wise to the support."""
        values = np.asarray([fn(x) for x in self.support], dtype=float)
        return float(self.weights @ values)

    def to_text(self):
        """Line format `weight x_1 ... x_d`, atoms sorted lexicographically."""
        order = np.lexsort(self.support.T[::-1])
        lines = []
        for i in order:
            coords = " ".join(f"{c:.17g}" for c in self.support[i])
            lines.append(f"{self.weights[i]:.17g} {coords}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, space=None):
        support, weights = [], []
        for line in text.strip().splitlines():
            parts = line.split()
            weights.append(float(parts[0]))
            support.append([float(p) for p in parts[1:]])
        return cls(np.array(support), np.array(weights), space=space)

    def __repr__(self):
        return f"DiscreteMeasure({self.n_atoms} atoms, d={self.dimension})"


def _check_pair(mu, nu):
    if mu.dimension != nu.dimension:
        raise ValueError(
            f"dimension mismatch: {mu.dimension} vs {nu.dimension}"
        )


def w_q_1d(mu, nu, q):
    """Wasserstein-q distance between one-dimensional discrete measures.

    Uses the quantile coupling: sort both supports (stable, so ties break
    deterministically) and match cumulative mass from the left.  Exact up
    to floating point.
    """
    _check_pair(mu, nu)
    if mu.dimension != 1:
        raise ValueError("w_q_1d requires one-dimensional measures")
    if q < 1 or int(q) != q:
        raise ValueError("order q must be a positive integer")
    xs = mu.support[:, 0]
    ys = nu.support[:, 0]
    ix = np.argsort(xs, kind="stable")
    iy = np.argsort(ys, kind="stable")
    xs, wx = xs[ix], mu.weights[ix]
    ys, wy = ys[iy], nu.weights[iy]

    cost = 0.0
    i = j = 0
    rem_x, rem_y = wx[0], wy[0]
    while i < len(xs) and j < len(ys):
        m = min(rem_x, rem_y)
        cost += m * abs(xs[i] - ys[j]) ** q
        rem_x -= m
        rem_y -= m
        if rem_x <= 1e-15:
            i += 1
            rem_x = wx[i] if i < len(xs) else 0.0
        if rem_y <= 1e-15:
            j += 1
            rem_y = wy[j] if j < len(ys) else 0.0
    return cost ** (1.0 / q)


def _cost_matrix(mu, nu, q):
    diff = mu.support[:, None, :] - nu.support[None, :, :]
    return np.linalg.norm(diff, axis=-1) ** q


def optimal_coupling(mu, nu, q):
    """Exact optimal transport plan and distance.

    Returns (plan, distance) where plan is an (m, n) matrix with row sums
    mu.weights and column sums nu.weights minimizing sum plan*cost, and
    distance = (optimal cost)^(1/q).
    """
    _check_pair(mu, nu)
    if q < 1 or int(q) != q:
        raise ValueError("order q must be a positive integer")
    m, n = mu.n_atoms, nu.n_atoms
    cost = _cost_matrix(mu, nu, q)
    if m == 1:
        plan = nu.weights[None, :].copy()
        return plan, float((plan * cost).sum()) ** (1.0 / q)
    if n == 1:
        plan = mu.weights[:, None].copy()
        return plan, float((plan * cost).sum()) ** (1.0 / q)

    # marginal constraints; one row constraint is redundant and dropped to
    # keep the LP full rank
    a_eq = []
    b_eq = []
    for i in range(m - 1):
        row = np.zeros((m, n))
        row[i, :] = 1.0
        a_eq.append(row.ravel())
        b_eq.append(mu.weights[i])
    for j in range(n):
        col = np.zeros((m, n))
        col[:, j] = 1.0
        a_eq.append(col.ravel())
        b_eq.append(nu.weights[j])
    res = linprog(
        cost.ravel(),
        A_eq=np.array(a_eq),
        b_eq=np.array(b_eq),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.clip(res.x.reshape(m, n), 0.0, None)
    return plan, float((plan * cost).sum()) ** (1.0 / q)


def w_q_discrete(mu, nu, q):
    """Exact Wasserstein-q distance via the transport linear program."""
    _, dist = optimal_coupling(mu, nu, q)
    return dist


def kr_dual_check(mu, nu):
    """W_1 lower bound via the dual: maximize sum f_i (mu_i - nu_i) over
    potentials f restricted to the joint support, subject to the pairwise
    Lipschitz constraints |f_i - f_j| <= ||x_i - x_j||.

    On finite supports strong duality holds, so this equals w_q_discrete
    with q = 1 up to solver tolerance.
    """
    _check_pair(mu, nu)
    points = np.vstack([mu.support, nu.support])
    signed = np.concatenate([mu.weights, -nu.weights])
    k = points.shape[0]
    dists = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)

    rows, rhs = [], []
    for i in range(k):
        for j in range(i + 1, k):
            row = np.zeros(k)
            row[i], row[j] = 1.0, -1.0
            rows.append(row)
            rhs.append(dists[i, j])
            rows.append(-row)
            rhs.append(dists[i, j])
    # fix the gauge f_0 = 0 (objective is invariant to constants)
    a_eq = np.zeros((1, k))
    a_eq[0, 0] = 1.0
    res = linprog(
        -signed,
        A_ub=np.array(rows),
        b_ub=np.array(rhs),
        A_eq=a_eq,
        b_eq=[0.0],
        bounds=(None, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"KR dual LP failed: {res.message}")
    return float(-res.fun)


def moment(mu, p):
    """p-th absolute moment sum_i w_i ||x_i||^p (p = 0 gives 1)."""
    if p < 0 or int(p) != p:
        raise ValueError("p must be a nonnegative integer")
    if p == 0:
        return 1.0
    norms = np.linalg.norm(mu.support, axis=1)
    return float(mu.weights @ norms**p)
