import numpy as np
from scipy.optimize import linprog

from robustdp import ambiguity as amb
from robustdp import dp
from robustdp.controls import ConstantSet
from robustdp.measures import DiscreteMeasure, LocalSpace


def primal_ball_lp(psi_vals, reference, z_grid, eps):
    """Oracle: min E_nu[psi] over measures nu supported on z_grid with
    W_1(reference, nu) <= eps, as an explicit transport LP.

    Variables are the coupling entries pi(x_i, z_j); returns the optimal
    value and the dual multiplier of the cost constraint (the lambda at
    which the Lagrangian dual is tight).
    """
    z = np.atleast_2d(z_grid)
    n_ref, n_z = reference.n_atoms, z.shape[0]
    cost = np.linalg.norm(
        reference.support[:, None, :] - z[None, :, :], axis=-1
    )
    c = np.tile(np.asarray(psi_vals, dtype=float), n_ref)
    a_eq = np.zeros((n_ref, n_ref * n_z))
    for i in range(n_ref):
        a_eq[i, i * n_z : (i + 1) * n_z] = 1.0
    res = linprog(
        c,
        A_ub=cost.ravel()[None, :],
        b_ub=[eps],
        A_eq=a_eq,
        b_eq=reference.weights,
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"ball LP failed: {res.message}")
    lam = float(-res.ineqlin.marginals[0]) if res.ineqlin.marginals.size else 0.0
    return float(res.fun), lam


def random_tabular_instance(rng, max_horizon=3, enum_guard=200_000):
    """Random tiny max-min instance whose brute force stays enumerable.

    Grids, action sets, and candidate counts are drawn at the spec's
    acceptance maxima (T <= 3, |grid| <= 4, |actions| <= 3, <= 3 measures)
    subject to the enumeration guard, so T = 3 draws get binary grids.
    """
    while True:
        horizon = int(rng.integers(1, max_horizon + 1))
        n_grid = int(rng.integers(2, 5)) if horizon <= 2 else 2
        n_actions = int(rng.integers(2, 4)) if horizon <= 2 else 2
        n_measures = int(rng.integers(1, 4))
        n_policies = 1
        n_selections = 1
        nodes = sum(n_grid**t for t in range(horizon))
        n_policies = n_actions**nodes
        n_selections = n_measures**nodes
        if n_policies * n_selections <= enum_guard:
            break

    space = LocalSpace(1, 1.0)
    g = np.sort(rng.uniform(-1.0, 1.0, size=n_grid))[:, None]
    acts = np.sort(rng.uniform(-1.0, 1.0, size=n_actions))[:, None]
    coefs = rng.normal(size=(horizon, 4))

    def terminal(omega, actions, c=coefs):
        total = 0.0
        for t in range(len(actions)):
            a = float(np.atleast_1d(actions[t])[0])
            w = float(omega[t, 0])
            total += (
                c[t, 0] * a * w
                + c[t, 1] * abs(a - w)
                + c[t, 2] * w
                + c[t, 3] * a * a
            )
        return total

    kernels = []
    for _ in range(horizon):
        refs = []
        for _ in range(n_measures):
            k = int(rng.integers(1, n_grid + 1))
            pts = g[rng.choice(n_grid, size=k, replace=False)]
            refs.append(
                amb.ConstantKernel(DiscreteMeasure(pts, rng.dirichlet(np.ones(k))))
            )
        kernels.append(amb.FiniteSet(refs))

    problem = dp.ControlProblem(
        horizon, space, terminal, [ConstantSet(points=acts)] * horizon, kernels
    )
    candidates = dp.build_candidates(problem, g, dp.sampler_from_kernel(1))
    return problem, g, candidates
