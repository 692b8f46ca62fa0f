import numpy as np
import pytest

from conftest import primal_ball_lp
from robustdp import ambiguity as amb
from robustdp import autodiff as ad
from robustdp import dp
from robustdp import neural as nn
from robustdp.controls import ConstantSet
from robustdp.measures import DiscreteMeasure, LocalSpace

SPACE = LocalSpace(1, 1.0)


# -- forward -------------------------------------------------------------------


def test_zero_weights_output_is_final_bias():
    net = nn.Mlp(3, 2, hidden_layers=2, hidden_units=4)
    net.set_parameters([np.zeros_like(p) for p in net.parameters()])
    net.biases[-1] = np.array([1.5, -0.5])
    out = net.forward(np.ones(3))
    assert np.allclose(out, [1.5, -0.5])


def test_identity_single_linear_layer():
    net = nn.Mlp(2, 2, hidden_layers=0, hidden_units=1)
    net.set_parameters([np.eye(2), np.zeros(2)])
    x = np.array([0.3, -0.7])
    assert np.allclose(net.forward(x), x)


def test_forward_deterministic():
    net = nn.Mlp(4, 3, rng=np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 4))
    assert np.array_equal(net.forward(x), net.forward(x))


def test_forward_shape_mismatch():
    net = nn.Mlp(4, 3)
    with pytest.raises(ValueError):
        net.forward(np.ones(5))


def test_squash_keeps_output_in_box():
    net = nn.Mlp(2, 2, rng=np.random.default_rng(0), out_box=([-1.0, 0.0], [1.0, 2.0]))
    out = net.forward(np.random.default_rng(1).normal(size=(100, 2)) * 50)
    assert np.all(out[:, 0] >= -1) and np.all(out[:, 0] <= 1)
    assert np.all(out[:, 1] >= 0) and np.all(out[:, 1] <= 2)


# -- gradients -------------------------------------------------------------------


def jitter_biases(net, rng):
    # zero-initialized biases put freshly dead units exactly on relu kinks,
    # where subgradients and central differences legitimately disagree;
    # gradient checks are specified away from ties
    for i in range(len(net.biases)):
        net.biases[i] = net.biases[i] + rng.normal(0.0, 0.05, net.biases[i].shape)
    return net


def fd_check(net, loss_tape, loss_np, n_coords=4, h=1e-5):
    grads = nn.grad(net, loss_tape)
    params0 = [p.copy() for p in net.parameters()]
    rng = np.random.default_rng(0)
    worst = 0.0
    for pi, p in enumerate(params0):
        flat = p.ravel()
        for _ in range(min(n_coords, flat.size)):
            j = int(rng.integers(flat.size))
            pp = [q.copy() for q in params0]
            pp[pi].ravel()[j] += h
            pm = [q.copy() for q in params0]
            pm[pi].ravel()[j] -= h
            net.set_parameters(pp)
            up = loss_np(net)
            net.set_parameters(pm)
            dn = loss_np(net)
            fd = (up - dn) / (2 * h)
            an = grads[pi].ravel()[j]
            worst = max(worst, abs(fd - an) / max(abs(fd), 1e-6))
    net.set_parameters(params0)
    return worst


def test_linear_net_quadratic_loss_analytic():
    net = nn.Mlp(3, 1, hidden_layers=0, hidden_units=1, rng=np.random.default_rng(3))
    X = np.random.default_rng(4).normal(size=(8, 3))
    y = np.random.default_rng(5).normal(size=8)

    def tape(apply_fn):
        return ad.vmean((ad.reshape(apply_fn(X), (-1,)) - ad.const(y)) ** 2)

    grads = nn.grad(net, tape)
    w, b = net.parameters()
    resid = X @ w[:, 0] + b[0] - y
    gw = 2 * X.T @ resid / len(y)
    gb = 2 * resid.mean()
    assert np.allclose(grads[0][:, 0], gw, rtol=1e-10)
    assert grads[1][0] == pytest.approx(gb, rel=1e-10)


def test_random_net_finite_difference():
    rng = np.random.default_rng(6)
    net = jitter_biases(nn.Mlp(4, 2, hidden_layers=3, hidden_units=6, rng=rng), rng)
    X = np.random.default_rng(7).normal(size=(10, 4))

    def tape(apply_fn):
        out = apply_fn(X)
        return ad.vmean(ad.absolute(out)) + ad.vmean(out**2)

    def loss_np(net):
        out = net.forward(X)
        return np.abs(out).mean() + (out**2).mean()

    assert fd_check(net, tape, loss_np) < 1e-4


def test_constant_loss_zero_gradient():
    net = nn.Mlp(2, 1)

    def tape(apply_fn):
        return ad.const(np.array(3.0)) + 0.0 * ad.vmean(apply_fn(np.ones((2, 2))))

    grads = nn.grad(net, tape)
    assert all(np.allclose(g, 0.0) for g in grads)


def test_gradient_through_min_over_measures():
    rng = np.random.default_rng(8)
    net = jitter_biases(nn.Mlp(2, 1, hidden_layers=2, hidden_units=5, rng=rng), rng)
    blocks = [rng.normal(size=(6, 2)) for _ in range(3)]

    def tape(apply_fn):
        per_k = [ad.reshape(ad.vmean(ad.reshape(apply_fn(b), (-1,))), (1,)) for b in blocks]
        return ad.vmin(ad.concat(per_k, axis=0), axis=0)

    def loss_np(net):
        return min(net.forward(b)[:, 0].mean() for b in blocks)

    assert fd_check(net, tape, loss_np) < 1e-4


def test_gradient_through_dual_objective():
    rng = np.random.default_rng(9)
    net = jitter_biases(nn.Mlp(1, 1, hidden_layers=2, hidden_units=5, rng=rng), rng)
    z = rng.uniform(-1, 1, size=(7, 1))
    x = rng.uniform(-1, 1, size=(5, 1))
    lam = 0.7

    def tape(apply_fn):
        psi_z = ad.reshape(apply_fn(z), (1, -1))
        dist = np.linalg.norm(x[:, None, :] - z[None, :, :], axis=-1)
        return ad.vmean(ad.vmin(psi_z + lam * ad.const(dist), axis=1)) - lam * 0.04

    def loss_np(net):
        psi_z = net.forward(z)[:, 0]
        dist = np.linalg.norm(x[:, None, :] - z[None, :, :], axis=-1)
        return np.min(psi_z[None, :] + lam * dist, axis=1).mean() - lam * 0.04

    assert fd_check(net, tape, loss_np) < 1e-4


def test_nan_loss_raises():
    net = nn.Mlp(2, 1)

    def tape(apply_fn):
        return ad.vmean(apply_fn(np.ones((1, 2)))) * ad.const(np.nan)

    with pytest.raises(FloatingPointError):
        nn.grad(net, tape)


# -- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_no_move():
    net = nn.Mlp(2, 1)
    params = net.parameters()
    before = [p.copy() for p in params]
    state = nn.AdamState.init(params)
    nn.adam_step(state, params, [np.zeros_like(p) for p in params])
    assert all(np.array_equal(a, b) for a, b in zip(params, before))


def test_adam_first_step_is_lr_signed():
    params = [np.array([1.0, -2.0])]
    state = nn.AdamState.init(params, lr=0.05)
    g = np.array([3.0, -0.2])
    nn.adam_step(state, params, [g])
    # bias correction makes m_hat/sqrt(v_hat) = sign(g) on step one
    assert np.allclose(params[0], [1.0 - 0.05, -2.0 + 0.05], atol=1e-6)


def test_adam_decreases_convex_quadratic():
    params = [np.array([2.0])]
    state = nn.AdamState.init(params, lr=0.1)
    vals = []
    for _ in range(2):
        vals.append(params[0][0] ** 2)
        nn.adam_step(state, params, [2 * params[0]])
    assert params[0][0] ** 2 < vals[0]


# -- dual inner value --------------------------------------------------------------


def test_dual_exact_representation_at_zero_radius():
    ref = DiscreteMeasure([[-0.4], [0.1], [0.6]], [0.2, 0.5, 0.3])
    psi = lambda z: np.sin(3 * np.atleast_2d(z)[:, 0])
    z_grid = np.vstack([ref.support, np.linspace(-1, 1, 9)[:, None]])
    val = nn.dual_inner_value(psi, ref, 0.0, 1, 1e6, z_grid)
    expect = float(ref.weights @ np.sin(3 * ref.support[:, 0]))
    assert val == pytest.approx(expect, abs=1e-6)


def test_dual_constant_psi():
    ref = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    val = nn.dual_inner_value(lambda z: np.full(len(np.atleast_2d(z)), 2.0),
                              ref, 0.3, 1, 1.5, np.array([[0.0], [1.0]]))
    assert val == pytest.approx(2.0 - 1.5 * 0.3)


def test_dual_requires_positive_lambda_and_grid():
    ref = DiscreteMeasure.dirac([0.0])
    with pytest.raises(ValueError):
        nn.dual_inner_value(lambda z: np.zeros(1), ref, 0.1, 1, 0.0, [[0.0]])
    with pytest.raises(ValueError):
        nn.dual_inner_value(lambda z: np.zeros(0), ref, 0.1, 1, 1.0, np.zeros((0, 1)))


def test_weak_duality_against_primal_lp():
    rng = np.random.default_rng(12)
    for _ in range(5):
        n = int(rng.integers(2, 6))
        ref = DiscreteMeasure(rng.uniform(-1, 1, (n, 1)), rng.dirichlet(np.ones(n)))
        z = np.vstack([ref.support, rng.uniform(-1, 1, (10, 1))])
        psi_vals = rng.normal(size=len(z))
        psi = lambda pts, z=z, v=psi_vals: np.array(
            [v[int(np.argmin(np.linalg.norm(z - p, axis=1)))] for p in np.atleast_2d(pts)]
        )
        eps = float(rng.uniform(0.01, 0.4))
        primal, lam_star = primal_ball_lp(psi_vals, ref, z, eps)
        for lam in [0.1, 0.5, 1.0, 5.0, max(lam_star, 1e-6)]:
            assert nn.dual_inner_value(psi, ref, eps, 1, lam, z) <= primal + 1e-9


# -- training --------------------------------------------------------------------


def quadratic_problem(target=0.3):
    ref = DiscreteMeasure([[-0.5], [0.5]], [0.5, 0.5])
    kern = amb.Singleton(amb.ConstantKernel(ref))

    def terminal(omega, actions):
        return float(-(np.atleast_1d(actions[0])[0] - target) ** 2 + 0.1 * omega[0, 0])

    def terminal_tape(omega, actions):
        a = ad.as_var(actions[0])
        return ad.reshape(-(a - target) ** 2, (-1,)) + ad.const(0.1 * omega[:, 0, 0])

    prob = dp.ControlProblem(
        1, SPACE, terminal, [ConstantSet(low=[-1.0], high=[1.0], resolution=41)], [kern]
    )
    prob.terminal_tape = terminal_tape
    return prob


FAST = nn.TrainConfig(iter_a=600, iter_psi=1, n_mc=32, batch_size=16, seed=11,
                      hidden_layers=3, hidden_units=16, eval_mc=2000, lr=3e-3)


def test_algorithm1_matches_analytic_argmax():
    prob = quadratic_problem()
    res = nn.train_algorithm1(prob, config=FAST)
    a0 = res.policy.action(0, np.zeros((0, 1)))
    assert abs(a0[0] - 0.3) < 0.05
    assert abs(res.value_estimate) < 0.02


def test_algorithm1_seed_determinism():
    prob = quadratic_problem()
    r1 = nn.train_algorithm1(prob, config=FAST)
    r2 = nn.train_algorithm1(prob, config=FAST)
    for p, q in zip(r1.action_nets[0].parameters(), r2.action_nets[0].parameters()):
        assert np.array_equal(p, q)
    assert r1.value_estimate == r2.value_estimate


def test_single_measure_training_is_nonrobust():
    # a FiniteSet holding only the reference trains identically to the
    # singleton route given the same seed stream structure
    prob = quadratic_problem()
    res_single = nn.train_algorithm1(prob, config=FAST)
    ref = DiscreteMeasure([[-0.5], [0.5]], [0.5, 0.5])
    prob2 = quadratic_problem()
    prob2.kernels = [amb.FiniteSet([amb.ConstantKernel(ref)])]
    res_set = nn.train_algorithm1(prob2, config=FAST)
    a1 = res_single.policy.action(0, np.zeros((0, 1)))
    a2 = res_set.policy.action(0, np.zeros((0, 1)))
    assert abs(a1[0] - a2[0]) < 0.05


def test_policy_outputs_admissible():
    prob = quadratic_problem()
    res = nn.train_algorithm1(prob, config=FAST)
    spec = prob.action_specs[0]
    a = res.policy.action(0, np.zeros((0, 1)))
    assert spec.contains(np.zeros((0, 1)), a)


def test_algorithm2_requires_ball_kernels():
    prob = quadratic_problem()
    with pytest.raises(ValueError):
        nn.train_algorithm2(prob, config=FAST)


def test_algorithm2_zero_radius_matches_algorithm1():
    prob = quadratic_problem()
    ref = DiscreteMeasure([[-0.5], [0.5]], [0.5, 0.5])
    ball = amb.WassersteinBall(amb.ConstantKernel(ref), amb.ConstantRadius(0.0))
    prob2 = quadratic_problem()
    prob2.kernels = [ball]
    res1 = nn.train_algorithm1(prob, config=FAST)
    res2 = nn.train_algorithm2(prob2, config=FAST)
    a1 = res1.policy.action(0, np.zeros((0, 1)))
    a2 = res2.policy.action(0, np.zeros((0, 1)))
    assert abs(a1[0] - a2[0]) < 0.06
    assert abs(res1.value_estimate - res2.value_estimate) < 0.05


def test_algorithm2_value_below_nonrobust():
    # inf over a ball containing the center cannot beat the center value
    prob_ball = quadratic_problem()
    ref = DiscreteMeasure([[-0.5], [0.5]], [0.5, 0.5])
    prob_ball.kernels = [
        amb.WassersteinBall(amb.ConstantKernel(ref), amb.ConstantRadius(0.3))
    ]
    res_ball = nn.train_algorithm2(prob_ball, config=FAST)
    res_plain = nn.train_algorithm1(quadratic_problem(), config=FAST)
    assert res_ball.value_estimate <= res_plain.value_estimate + 0.03


# -- serialization ------------------------------------------------------------------


def test_net_text_round_trip():
    net = nn.Mlp(3, 2, hidden_layers=2, hidden_units=4,
                 rng=np.random.default_rng(3), out_box=([-1, -1], [1, 1]))
    text = nn.net_to_text(net)
    back = nn.net_from_text(text)
    x = np.random.default_rng(4).normal(size=(5, 3))
    assert np.allclose(net.forward(x), back.forward(x), atol=1e-15)
    assert nn.net_to_text(back) == text


def test_log_csv_header():
    csv_text = nn.log_to_csv([(0, "action", 1, 0.5, 1.2)])
    assert csv_text.splitlines()[0] == "stage,phase,iteration,objective,lambda"
