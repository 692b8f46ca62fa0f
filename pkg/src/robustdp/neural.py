"""Neural max-min training: value and action networks per stage.

Two training loops, sharing one backward structure.  The sampled-measure
loop ascends min over a fixed per-stage candidate set of Monte Carlo
means of the next value network; the Wasserstein-dual loop replaces the
minimum over measures by the dual objective

    (1/N_MC) sum_i min_j { psi(z_j) + lambda ||x_i - z_j|| } - lambda eps^q

with lambda > 0 trained through an exponential reparameterization (one
lambda per stage, updated jointly with the action network).  Everything
runs on the numpy tape in autodiff.py, so gradients are exact including
through the min selections, and runs are bit-reproducible from the seed.

Candidate measures are drawn once per stage and then held fixed across
iterations: the trained value then matches the exact solver run on the
same sets, which is what the oracle comparisons require.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .ambiguity import (
    AdaptiveEmpirical,
    ConstantKernel,
    FiniteSet,
    KernelWeighted,
    Singleton,
    WassersteinBall,
    sample_measures,
)
from .controls import ConstantSet, clamp_to

__all__ = [
    "Mlp",
    "AdamState",
    "TrainConfig",
    "forward",
    "grad",
    "adam_step",
    "dual_inner_value",
    "train_algorithm1",
    "train_algorithm2",
    "NeuralPolicy",
    "TrainResult",
    "mc_policy_values",
    "net_to_text",
    "net_from_text",
    "log_to_csv",
]


class Mlp:
    """Fully connected rectifier network, identity output.

    With out_box=(low, high) the output is squashed onto the box through a
    scaled tanh, so action networks always emit admissible actions.  An
    input dimension of zero makes the network a trainable constant.
    """

    def __init__(self, in_dim, out_dim, hidden_layers=5, hidden_units=32,
                 rng=None, out_box=None, in_scale=None):
        rng = rng or np.random.default_rng(0)
        sizes = [in_dim] + [hidden_units] * hidden_layers + [out_dim]
        self.sizes = sizes
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(2.0 / max(fan_in, 1))
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        if out_box is not None:
            low, high = out_box
            self.out_low = np.atleast_1d(np.asarray(low, dtype=float))
            self.out_high = np.atleast_1d(np.asarray(high, dtype=float))
        else:
            self.out_low = self.out_high = None
        # fixed per-input standardization (e.g. returns divided by their
        # bound); untrained, so serialization stores it verbatim
        self.in_scale = (
            None if in_scale is None
            else np.broadcast_to(np.asarray(in_scale, dtype=float), (in_dim,)).copy()
        )

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_parameters(self, arrays):
        arrays = list(arrays)
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(arrays[2 * i], dtype=float)
            self.biases[i] = np.asarray(arrays[2 * i + 1], dtype=float)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {h.shape[1]}")
        if self.in_scale is not None:
            h = h * self.in_scale
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        if self.out_low is not None:
            h = self.out_low + (self.out_high - self.out_low) * 0.5 * (np.tanh(h) + 1.0)
        return h[0] if single else h

    def forward_var(self, x, params=None):
        """Tape-mode forward; x may be a Var or an ndarray."""
        h = ad.as_var(x)
        if self.in_scale is not None:
            h = h * ad.const(self.in_scale)
        if params is None:
            params = [ad.const(p) for p in self.parameters()]
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            h = h @ params[2 * i] + params[2 * i + 1]
            if i < last:
                h = ad.relu(h)
        if self.out_low is not None:
            span = self.out_high - self.out_low
            h = ad.const(self.out_low) + ad.const(span) * (ad.tanh(h) + 1.0) * 0.5
        return h


def forward(net, x):
    """Plain deterministic forward pass."""
    return net.forward(x)


def grad(net, loss_closure):
    """Exact reverse-mode gradient of a scalar loss in the net parameters.

    loss_closure receives an apply function mapping inputs (ndarray or
    Var) to the network output as a Var, and must return a scalar Var.
    Subgradient 0 is used at rectifier kinks and min/max ties.
    """
    pvars = [ad.Var(p) for p in net.parameters()]

    def apply_fn(x):
        return net.forward_var(x, pvars)

    loss = loss_closure(apply_fn)
    if np.isnan(loss.value).any():
        raise FloatingPointError("loss is NaN")
    ad.backward(loss)
    return [
        pv.grad if pv.grad is not None else np.zeros_like(pv.value)
        for pv in pvars
    ]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state, params, grads):
    """Standard bias-corrected Adam update (in place on params)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the hedging experiments' footnote
    (5 x 32 rectifier layers, lr 1e-3, batch 128, N_MC = 2^7, Iter_a = 500,
    Iter_psi = 2000, 64 dual grid points)."""

    iter_psi: int = 2000
    iter_a: int = 500
    n_measures: int = 5
    n_mc: int = 128
    batch_size: int = 128
    dual_grid: int = 64
    seed: int = 0
    hidden_layers: int = 5
    hidden_units: int = 32
    lr: float = 1e-3
    eval_mc: int = 4000
    path_sampling: str = "uniform"  # or "reference": draw paths from the
    # reference kernels instead of uniformly over the local space
    lr_decay: float = 1.0  # multiplicative lr floor reached at the last
    # iteration (1.0 = constant learning rate)
    warm_start: bool = False  # initialize each stage net from its successor

    def __post_init__(self):
        for name in ("iter_psi", "iter_a", "n_measures", "n_mc",
                     "batch_size", "dual_grid"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")



def _lr_at(config, it, total):
    if config.lr_decay >= 1.0 or total <= 1:
        return config.lr
    return config.lr * config.lr_decay ** (it / (total - 1))


def dual_inner_value(psi_next, reference, eps, q, lambda_, z_grid):
    """Inner dual objective of the Wasserstein-ball minimization:

        E_reference[ min_j { psi(z_j) + lambda ||X - z_j|| } ] - lambda eps^q.

    psi_next maps a single point (d,) or a stack (N, d) to values; z_grid
    is a nonempty subset of the local space.
    """
    if lambda_ <= 0:
        raise ValueError("lambda must be positive")
    z = np.atleast_2d(np.asarray(z_grid, dtype=float))
    if z.shape[0] == 0:
        raise ValueError("empty z grid")
    try:
        psi_vals = np.asarray(psi_next(z), dtype=float).reshape(z.shape[0])
    except Exception:
        psi_vals = np.array([float(psi_next(zj)) for zj in z])
    dists = np.linalg.norm(
        reference.support[:, None, :] - z[None, :, :], axis=-1
    )
    inner = np.min(psi_vals[None, :] + lambda_ * dists, axis=1)
    return float(reference.weights @ inner - lambda_ * eps**q)


# ---------------------------------------------------------------------------
# shared training plumbing
# ---------------------------------------------------------------------------


def _action_box(spec):
    if isinstance(spec, ConstantSet) and spec.points is None:
        return spec.low, spec.high
    raise ValueError(
        "neural training needs box-shaped ConstantSet actions "
        f"(got {type(spec).__name__})"
    )


def _sample_paths(space, t, batch, rng):
    if space.bound is None:
        raise ValueError("uniform path sampling needs a bounded local space")
    return rng.uniform(-space.bound, space.bound, size=(batch, t, space.dimension))


def _sample_paths_reference(kernels, t, batch, rng, d):
    """Paths drawn from the product of the stage reference kernels.

    Concentrates training where in-model evaluation happens; requires the
    earlier-stage references to be evaluable along sampled prefixes (cheap
    for constant references, sequential otherwise).
    """
    omega = np.zeros((batch, t, d))
    for s in range(t):
        kern = kernels[s]
        ref = kern.reference if hasattr(kern, "reference") else kern
        if isinstance(ref, ConstantKernel):
            m = ref.measure
            idx = rng.choice(m.n_atoms, size=batch, p=m.weights)
            omega[:, s] = m.support[idx]
        else:
            for i in range(batch):
                m = ref(omega[i, :s])
                omega[i, s] = m.support[rng.choice(m.n_atoms, p=m.weights)]
    return omega


def _draw_training_paths(problem, kernels, t, config, rng):
    if config.path_sampling == "reference":
        return _sample_paths_reference(
            kernels, t, config.batch_size, rng, problem.local_space.dimension
        )
    return _sample_paths(problem.local_space, t, config.batch_size, rng)


def _sample_prefix_actions(specs, batch, rng):
    out = []
    for spec in specs:
        low, high = _action_box(spec)
        out.append(rng.uniform(low, high, size=(batch, len(low))))
    return out


def _draw_states(measure, batch, n_mc, rng):
    """(batch, n_mc, d) i.i.d. draws from one discrete measure."""
    idx = rng.choice(measure.n_atoms, size=(batch, n_mc), p=measure.weights)
    return measure.support[idx]


def _reference_states(kernel, omega_b, n_mc, rng):
    """Per-path draws from the reference kernel, vectorized where possible."""
    ref = kernel.reference if hasattr(kernel, "reference") else kernel
    b, t, d = omega_b.shape
    if isinstance(ref, ConstantKernel):
        return _draw_states(ref.measure, b, n_mc, rng)
    if isinstance(ref, KernelWeighted):
        hist = ref.history
        n = hist.shape[0]
        if t >= n:
            raise ValueError("path longer than history")
        windows = np.stack([hist[s - t : s].ravel() for s in range(t, n)])
        flat = omega_b.reshape(b, t * d)
        logits = -ref.beta * ((windows[None, :, :] - flat[:, None, :]) ** 2).sum(-1)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out = np.empty((b, n_mc, d))
        atoms = hist[t:n]
        for i in range(b):
            out[i] = atoms[rng.choice(n - t, size=n_mc, p=w[i])]
        return out
    if isinstance(ref, AdaptiveEmpirical):
        hist = ref.history
        n = hist.shape[0]
        out = np.empty((b, n_mc, d))
        for i in range(b):
            atoms = hist if t == 0 else np.vstack([hist, omega_b[i]])
            out[i] = atoms[rng.integers(0, n + t, size=n_mc)]
        return out
    out = np.empty((b, n_mc, d))
    for i in range(b):
        m = ref(omega_b[i])
        out[i] = _draw_states(m, 1, n_mc, rng)[0]
    return out


def _stage_candidates(kernel, t, d, config, rng):
    """Fixed candidate measures for one stage (element 0 = reference)."""
    probe = np.zeros((t, d))
    if isinstance(kernel, Singleton):
        return None  # per-path reference draws instead
    if isinstance(kernel, FiniteSet):
        return kernel.evaluate_all(probe)
    return sample_measures(kernel, probe, config.n_measures, rng)



def _input_scale(problem, t):
    """Per-input standardization: returns scaled by 1/C, actions by their
    half-width, so first-layer activations are O(1) regardless of units.
    Feature-map outputs are expected pre-normalized and get scale 1."""
    d = problem.local_space.dimension
    parts = []
    if t > 0:
        parts.append(np.full(t * d, 1.0 / problem.local_space.bound))
    for spec in problem.action_specs[:t]:
        low, high = _action_box(spec)
        parts.append(2.0 / np.maximum(high - low, 1e-12))
    parts.append(np.ones(_n_features(problem, t)))
    if _features_only(problem) and getattr(problem, "feature_tape", None) is not None:
        return np.ones(_n_features(problem, t))
    return np.concatenate(parts) if parts else np.zeros(0)


def _n_features(problem, t):
    fm = getattr(problem, "feature_tape", None)
    if fm is None:
        return 0
    d = problem.local_space.dimension
    omega = np.zeros((1, t, d))
    actions = [np.zeros((1, spec.dim)) for spec in problem.action_specs[:t]]
    return fm(t, omega, actions).value.shape[1]


def _features_only(problem):
    return getattr(problem, "net_inputs", "both") == "features"


def _stage_input_tape(problem, t, omega_flat, actions):
    """Net input at stage t: path, past actions, and derived features; a
    problem with net_inputs="features" feeds the feature map alone (its
    outputs are functions of the same arguments, so the networks stay maps
    of (path, past actions) with a restricted parameterization)."""
    d = problem.local_space.dimension
    fm = getattr(problem, "feature_tape", None)
    parts = []
    if not (fm is not None and _features_only(problem)):
        parts = [ad.as_var(omega_flat)] + [ad.as_var(a) for a in actions]
    if fm is not None:
        flat = np.asarray(
            omega_flat.value if isinstance(omega_flat, ad.Var) else omega_flat
        )
        parts.append(fm(t, flat.reshape(flat.shape[0], t, d), actions))
    return ad.concat(parts, axis=1)


def _stage_input_np(problem, t, omega_flat, prefix_np):
    actions = _split_actions(problem, prefix_np)
    return _stage_input_tape(problem, t, omega_flat, actions).value



def _stage_in_dim(problem, t):
    if _features_only(problem) and getattr(problem, "feature_tape", None) is not None:
        return _n_features(problem, t)
    d = problem.local_space.dimension
    return t * d + _prefix_width(problem, t) + _n_features(problem, t)


def _maybe_warm_start(net, prev, config):
    """Initialize a stage net from its successor when shapes line up;
    with feature-only inputs the per-stage functions vary slowly in t, so
    each stage becomes a fine-tune rather than a fresh fit."""
    if not getattr(config, "warm_start", False) or prev is None:
        return
    if [p.shape for p in prev.parameters()] != [p.shape for p in net.parameters()]:
        return
    net.set_parameters([p.copy() for p in prev.parameters()])


class _PsiNext:
    """Uniform view of the stage-(t+1) value: a net or the terminal map."""

    def __init__(self, problem, t_next, net):
        self.problem = problem
        self.t_next = t_next
        self.net = net
        self.is_terminal = t_next == problem.horizon

    def tape(self, omega_flat, prefix_np, a_var):
        """Var of shape (N,) given constants and the stage action Var."""
        actions = _split_actions(self.problem, prefix_np) + [a_var]
        if self.is_terminal:
            T = self.problem.horizon
            d = self.problem.local_space.dimension
            return self.problem.terminal_tape(omega_flat.reshape(-1, T, d), actions)
        x = _stage_input_tape(self.problem, self.t_next, omega_flat, actions)
        return ad.reshape(self.net.forward_var(x), (-1,))

    def numpy(self, omega_flat, prefix_np, a_np):
        actions = _split_actions(self.problem, prefix_np) + [a_np]
        if self.is_terminal:
            T = self.problem.horizon
            d = self.problem.local_space.dimension
            return self.problem.terminal_tape(omega_flat.reshape(-1, T, d), actions).value
        x = _stage_input_tape(self.problem, self.t_next, omega_flat, actions).value
        return self.net.forward(x)[:, 0]


def _split_actions(problem, prefix_np):
    dims = [spec.dim for spec in problem.action_specs]
    out = []
    lo = 0
    for m in dims[: _n_prefix(prefix_np, dims)]:
        out.append(prefix_np[:, lo : lo + m])
        lo += m
    return out


def _n_prefix(prefix_np, dims):
    width = prefix_np.shape[1]
    total, k = 0, 0
    while total < width:
        total += dims[k]
        k += 1
    if total != width:
        raise ValueError("prefix width does not align with action dims")
    return k


def _prefix_width(problem, t):
    return sum(spec.dim for spec in problem.action_specs[:t])


class NeuralPolicy:
    """Stage networks composed into a policy; outputs are squashed into the
    action box and clamped, so they are always admissible."""

    def __init__(self, action_nets, action_specs, dimension, feature_tape=None,
                 feature_only=False):
        self.action_nets = action_nets
        self.action_specs = action_specs
        self.dimension = dimension
        self.feature_tape = feature_tape
        self.feature_only = feature_only and feature_tape is not None

    def action(self, t, path, past_actions=None):
        path = np.asarray(path, dtype=float).reshape(t, self.dimension)
        if past_actions is None:
            past = []
            for s in range(t):
                past.append(self.action(s, path[:s], past))
        else:
            past = past_actions
        parts = [] if self.feature_only else (
            [path.ravel()] + [np.ravel(a) for a in past]
        )
        if self.feature_tape is not None:
            feats = self.feature_tape(
                t, path[None], [np.atleast_1d(a)[None] for a in past]
            ).value
            parts.append(feats[0])
        x = np.concatenate(parts) if parts else np.zeros(0)
        a = self.action_nets[t].forward(x)
        return clamp_to(self.action_specs[t], path, a)

    def __call__(self, t, path, past_actions=None):
        return self.action(t, path, past_actions)

    def actions_along(self, omega):
        """All stage actions for a full path (T, d)."""
        omega = np.asarray(omega, dtype=float)
        actions = []
        for t in range(len(self.action_nets)):
            actions.append(self.action(t, omega[:t], actions))
        return actions

    def actions_batch(self, omega_b):
        """Vectorized actions along a batch of full paths (N, T, d)."""
        n, T, d = omega_b.shape
        actions = []
        for t in range(len(self.action_nets)):
            parts = [] if self.feature_only else (
                [omega_b[:, :t].reshape(n, t * d)] + actions
            )
            if self.feature_tape is not None:
                parts.append(self.feature_tape(t, omega_b[:, :t], actions).value)
            a = self.action_nets[t].forward(np.concatenate(parts, axis=1))
            actions.append(a)
        return actions


@dataclass
class TrainResult:
    action_nets: list
    value_nets: list
    policy: NeuralPolicy
    value_estimate: float
    candidate_sets: dict = None
    log: list = field(default_factory=list)
    lambdas: list = None


def _require_tape(problem):
    if getattr(problem, "terminal_tape", None) is None:
        raise ValueError(
            "neural training needs problem.terminal_tape "
            "(a batched, tape-differentiable terminal objective)"
        )


def train_algorithm1(problem, kernels=None, config=None, rng=None):
    """Backward minimax training over a fixed sampled measure set.

    Stage t = T-1..0: ascend min_k of the Monte Carlo mean of the next
    value network in the action network's parameters, then regress the
    stage value network on the achieved minimum.  Singleton kernels fall
    back to per-path reference sampling (the non-robust special case).
    """
    _require_tape(problem)
    config = config or TrainConfig()
    kernels = kernels if kernels is not None else problem.kernels
    rng = rng or np.random.default_rng(config.seed)
    T, d = problem.horizon, problem.local_space.dimension

    candidate_sets = {
        t: _stage_candidates(kernels[t], t, d, config, rng) for t in range(T)
    }

    def next_state_block(t, omega_b, n_mc):
        """List over candidates of (B, n_mc, d) draws; singletons give one."""
        cands = candidate_sets[t]
        if cands is None:
            return [_reference_states(kernels[t], omega_b, n_mc, rng)]
        return [_draw_states(m, omega_b.shape[0], n_mc, rng) for m in cands]

    action_nets = [None] * T
    value_nets = [None] * (T + 1)
    log = []

    for t in range(T - 1, -1, -1):
        in_dim = _stage_in_dim(problem, t)
        box = _action_box(problem.action_specs[t])
        scale = _input_scale(problem, t)
        net_a = Mlp(in_dim, len(box[0]), config.hidden_layers,
                    config.hidden_units, rng, out_box=box, in_scale=scale)
        _maybe_warm_start(net_a, action_nets[t + 1] if t + 1 < T else None, config)
        psi_next = _PsiNext(problem, t + 1, value_nets[t + 1])

        def j_tape(apply_fn, omega_b, prefix, blocks):
            b = omega_b.shape[0]
            n_mc = blocks[0].shape[1]
            x_t = _stage_input_np(problem, t, omega_b.reshape(b, t * d), prefix)
            a = apply_fn(x_t)
            a_rep = ad.repeat_rows(a, n_mc)
            per_k = []
            for blk in blocks:
                omega_next = np.concatenate(
                    [
                        np.repeat(omega_b.reshape(b, t * d), n_mc, axis=0),
                        blk.reshape(b * n_mc, d),
                    ],
                    axis=1,
                )
                prefix_rep = np.repeat(prefix, n_mc, axis=0)
                vals = psi_next.tape(omega_next, prefix_rep, a_rep)
                per_k.append(ad.reshape(ad.vmean(ad.reshape(vals, (b, n_mc)), axis=1), (1, b)))
            stacked = per_k[0] if len(per_k) == 1 else ad.concat(per_k, axis=0)
            return ad.vmin(stacked, axis=0)  # (b,)

        adam = AdamState.init(net_a.parameters(), lr=config.lr)
        for it in range(config.iter_a):
            adam.lr = _lr_at(config, it, config.iter_a)
            omega_b = _draw_training_paths(problem, kernels, t, config, rng)
            prefix = np.concatenate(
                _sample_prefix_actions(problem.action_specs[:t], config.batch_size, rng)
                + [np.zeros((config.batch_size, 0))],
                axis=1,
            )
            blocks = next_state_block(t, omega_b, config.n_mc)
            obj_holder = {}

            def loss_fn(apply_fn):
                obj = ad.vmean(j_tape(apply_fn, omega_b, prefix, blocks))
                obj_holder["value"] = float(obj.value)
                return -obj

            grads = grad(net_a, loss_fn)
            adam_step(adam, net_a.parameters(), grads)
            log.append((t, "action", it, obj_holder["value"], ""))

        def j_numpy(omega_b, prefix, blocks):
            b = omega_b.shape[0]
            n_mc = blocks[0].shape[1]
            x_t = _stage_input_np(problem, t, omega_b.reshape(b, t * d), prefix)
            a = net_a.forward(x_t)
            a_rep = np.repeat(a, n_mc, axis=0)
            per_k = []
            for blk in blocks:
                omega_next = np.concatenate(
                    [
                        np.repeat(omega_b.reshape(b, t * d), n_mc, axis=0),
                        blk.reshape(b * n_mc, d),
                    ],
                    axis=1,
                )
                prefix_rep = np.repeat(prefix, n_mc, axis=0)
                per_k.append(
                    psi_next.numpy(omega_next, prefix_rep, a_rep).reshape(b, n_mc).mean(axis=1)
                )
            return np.min(np.stack(per_k, axis=0), axis=0)

        net_psi = Mlp(in_dim, 1, config.hidden_layers, config.hidden_units, rng,
                      in_scale=scale)
        _maybe_warm_start(net_psi, value_nets[t + 1] if t + 1 < T else None, config)
        adam_psi = AdamState.init(net_psi.parameters(), lr=config.lr)
        if t > 0:
            for it in range(config.iter_psi):
                adam_psi.lr = _lr_at(config, it, config.iter_psi)
                omega_b = _draw_training_paths(problem, kernels, t, config, rng)
                prefix = np.concatenate(
                    _sample_prefix_actions(problem.action_specs[:t], config.batch_size, rng)
                    + [np.zeros((config.batch_size, 0))],
                    axis=1,
                )
                blocks = next_state_block(t, omega_b, config.n_mc)
                target = j_numpy(omega_b, prefix, blocks)
                x_t = _stage_input_np(problem, t, omega_b.reshape(-1, t * d), prefix)

                def mse(apply_fn):
                    pred = ad.reshape(apply_fn(x_t), (-1,))
                    return ad.vmean((pred - ad.const(target)) ** 2)

                grads = grad(net_psi, mse)
                adam_step(adam_psi, net_psi.parameters(), grads)
                if it % 50 == 0:
                    log.append((t, "value", it, float("nan"), ""))

        action_nets[t] = net_a
        value_nets[t] = net_psi

    # stage-0 value estimate straight from the trained stage-0 objective
    omega0 = np.zeros((1, 0, d))
    prefix0 = np.zeros((1, 0))
    blocks0 = next_state_block(0, omega0, config.eval_mc)
    x0 = _stage_input_np(problem, 0, np.zeros((1, 0)), prefix0)
    a0 = action_nets[0].forward(x0)
    psi1 = _PsiNext(problem, 1, value_nets[1])
    per_k = []
    for blk in blocks0:
        omega_next = blk.reshape(config.eval_mc, d)
        per_k.append(
            float(
                psi1.numpy(
                    omega_next,
                    np.zeros((config.eval_mc, 0)),
                    np.repeat(a0, config.eval_mc, axis=0),
                ).mean()
            )
        )
    value_estimate = min(per_k)

    policy = NeuralPolicy(action_nets, problem.action_specs, d,
                          getattr(problem, "feature_tape", None),
                          feature_only=_features_only(problem))
    return TrainResult(
        action_nets=action_nets,
        value_nets=value_nets,
        policy=policy,
        value_estimate=value_estimate,
        candidate_sets=candidate_sets,
        log=log,
    )


def train_algorithm2(problem, kernels=None, config=None, rng=None):
    """Wasserstein-dual minimax training.

    Same backward loop as the sampled-measure variant, but the inner
    minimum over the ball is the dual objective evaluated on reference
    draws and a z grid resampled every iteration from the local space,
    with one positive lambda per stage trained through exp().
    """
    _require_tape(problem)
    config = config or TrainConfig()
    kernels = kernels if kernels is not None else problem.kernels
    for k in kernels:
        if not isinstance(k, WassersteinBall):
            raise ValueError("dual training needs Wasserstein-ball kernels")
    rng = rng or np.random.default_rng(config.seed)
    T, d = problem.horizon, problem.local_space.dimension
    space = problem.local_space

    action_nets = [None] * T
    value_nets = [None] * (T + 1)
    lambdas = [None] * T
    log = []

    for t in range(T - 1, -1, -1):
        in_dim = _stage_in_dim(problem, t)
        box = _action_box(problem.action_specs[t])
        scale = _input_scale(problem, t)
        net_a = Mlp(in_dim, len(box[0]), config.hidden_layers,
                    config.hidden_units, rng, out_box=box, in_scale=scale)
        _maybe_warm_start(net_a, action_nets[t + 1] if t + 1 < T else None, config)
        psi_next = _PsiNext(problem, t + 1, value_nets[t + 1])
        raw_lambda = np.array([0.0])
        kernel = kernels[t]

        def eps_of(omega_b):
            return np.array([kernel.eps(w) for w in omega_b])

        def dual_tape(apply_fn, lam_var, omega_b, prefix, states, z):
            b = omega_b.shape[0]
            n_mc = states.shape[1]
            n_z = z.shape[0]
            x_t = _stage_input_np(problem, t, omega_b.reshape(b, t * d), prefix)
            a = apply_fn(x_t)
            a_rep = ad.repeat_rows(a, n_z)
            omega_next = np.concatenate(
                [
                    np.repeat(omega_b.reshape(b, t * d), n_z, axis=0),
                    np.tile(z, (b, 1)),
                ],
                axis=1,
            )
            prefix_rep = np.repeat(prefix, n_z, axis=0)
            psi_z = ad.reshape(
                psi_next.tape(omega_next, prefix_rep, a_rep), (b, 1, n_z)
            )
            dist = np.linalg.norm(
                states[:, :, None, :] - z[None, None, :, :], axis=-1
            )  # (b, n_mc, n_z)
            lam = ad.exp(lam_var)
            inner = ad.vmin(psi_z + lam * ad.const(dist), axis=2)  # (b, n_mc)
            per_b = ad.vmean(inner, axis=1) - lam * ad.const(
                eps_of(omega_b) ** kernel.order
            )
            return ad.vmean(per_b)

        params_lam = [raw_lambda]
        adam = AdamState.init(net_a.parameters() + params_lam, lr=config.lr)
        for it in range(config.iter_a):
            adam.lr = _lr_at(config, it, config.iter_a)
            omega_b = _draw_training_paths(problem, kernels, t, config, rng)
            prefix = np.concatenate(
                _sample_prefix_actions(problem.action_specs[:t], config.batch_size, rng)
                + [np.zeros((config.batch_size, 0))],
                axis=1,
            )
            states = _reference_states(kernel, omega_b, config.n_mc, rng)
            z = rng.uniform(-space.bound, space.bound, size=(config.dual_grid, d))
            obj_holder = {}

            pvars = [ad.Var(p) for p in net_a.parameters()]
            lam_var = ad.Var(raw_lambda)

            def apply_fn(x):
                return net_a.forward_var(x, pvars)

            obj = dual_tape(apply_fn, lam_var, omega_b, prefix, states, z)
            obj_holder["value"] = float(obj.value)
            loss = -obj
            ad.backward(loss)
            grads = [
                pv.grad if pv.grad is not None else np.zeros_like(pv.value)
                for pv in pvars
            ] + [lam_var.grad if lam_var.grad is not None else np.zeros(1)]
            adam_step(adam, net_a.parameters() + params_lam, grads)
            log.append((t, "action", it, obj_holder["value"],
                        float(np.exp(raw_lambda[0]))))

        lam_trained = float(np.exp(raw_lambda[0]))

        def dual_numpy(omega_b, prefix, states, z):
            b = omega_b.shape[0]
            n_z = z.shape[0]
            x_t = _stage_input_np(problem, t, omega_b.reshape(b, t * d), prefix)
            a = net_a.forward(x_t)
            a_rep = np.repeat(a, n_z, axis=0)
            omega_next = np.concatenate(
                [
                    np.repeat(omega_b.reshape(b, t * d), n_z, axis=0),
                    np.tile(z, (b, 1)),
                ],
                axis=1,
            )
            prefix_rep = np.repeat(prefix, n_z, axis=0)
            psi_z = psi_next.numpy(omega_next, prefix_rep, a_rep).reshape(b, 1, n_z)
            dist = np.linalg.norm(
                states[:, :, None, :] - z[None, None, :, :], axis=-1
            )
            inner = np.min(psi_z + lam_trained * dist, axis=2)
            return inner.mean(axis=1) - lam_trained * eps_of(omega_b) ** kernel.order

        net_psi = Mlp(in_dim, 1, config.hidden_layers, config.hidden_units, rng,
                      in_scale=scale)
        _maybe_warm_start(net_psi, value_nets[t + 1] if t + 1 < T else None, config)
        adam_psi = AdamState.init(net_psi.parameters(), lr=config.lr)
        if t > 0:
            for it in range(config.iter_psi):
                adam_psi.lr = _lr_at(config, it, config.iter_psi)
                omega_b = _draw_training_paths(problem, kernels, t, config, rng)
                prefix = np.concatenate(
                    _sample_prefix_actions(problem.action_specs[:t], config.batch_size, rng)
                    + [np.zeros((config.batch_size, 0))],
                    axis=1,
                )
                states = _reference_states(kernel, omega_b, config.n_mc, rng)
                z = rng.uniform(-space.bound, space.bound, size=(config.dual_grid, d))
                target = dual_numpy(omega_b, prefix, states, z)
                x_t = _stage_input_np(problem, t, omega_b.reshape(-1, t * d), prefix)

                def mse(apply_fn):
                    pred = ad.reshape(apply_fn(x_t), (-1,))
                    return ad.vmean((pred - ad.const(target)) ** 2)

                grads = grad(net_psi, mse)
                adam_step(adam_psi, net_psi.parameters(), grads)

        action_nets[t] = net_a
        value_nets[t] = net_psi
        lambdas[t] = lam_trained

    omega0 = np.zeros((1, 0, d))
    prefix0 = np.zeros((1, 0))
    states0 = _reference_states(kernels[0], omega0, config.eval_mc, rng)
    z0 = space.grid(min(256, config.dual_grid * 4)) if d == 1 else rng.uniform(
        -space.bound, space.bound, size=(config.dual_grid * 4, d)
    )
    psi1 = _PsiNext(problem, 1, value_nets[1])
    a0 = action_nets[0].forward(_stage_input_np(problem, 0, np.zeros((1, 0)), np.zeros((1, 0))))
    psi_z = psi1.numpy(
        z0, np.zeros((z0.shape[0], 0)), np.repeat(a0, z0.shape[0], axis=0)
    )
    dist = np.linalg.norm(states0[0][:, None, :] - z0[None, :, :], axis=-1)
    lam0 = lambdas[0]
    inner = np.min(psi_z[None, :] + lam0 * dist, axis=1)
    value_estimate = float(inner.mean() - lam0 * kernels[0].eps(np.zeros((0, d))) ** kernels[0].order)

    policy = NeuralPolicy(action_nets, problem.action_specs, d,
                          getattr(problem, "feature_tape", None),
                          feature_only=_features_only(problem))
    return TrainResult(
        action_nets=action_nets,
        value_nets=value_nets,
        policy=policy,
        value_estimate=value_estimate,
        log=log,
        lambdas=lambdas,
    )


def mc_policy_values(problem, policy, candidate_sets, n_paths, rng):
    """Monte Carlo values of a policy under each stagewise-constant
    candidate assignment, with common random numbers.

    candidate_sets[t] is the fixed measure list of stage t (element 0 the
    reference).  Returns the per-candidate values; their minimum is the
    in-model robust value on the shared sets, and entry 0 the reference
    value.  Using one uniform draw per (path, stage) for every candidate
    makes the set-inclusion inequality exact at sample level.
    """
    T, d = problem.horizon, problem.local_space.dimension
    n_cands = min(len(candidate_sets[t]) for t in range(T))
    u = rng.uniform(size=(n_paths, T))
    values = []
    for k in range(n_cands):
        omega = np.empty((n_paths, T, d))
        for t in range(T):
            m = candidate_sets[t][k]
            cum = np.cumsum(m.weights)
            idx = np.searchsorted(cum, u[:, t], side="right").clip(0, m.n_atoms - 1)
            omega[:, t] = m.support[idx]
        if hasattr(policy, "actions_batch"):
            actions = policy.actions_batch(omega)
        else:
            per_path = [policy_actions_along(policy, omega[i]) for i in range(n_paths)]
            actions = [
                np.stack([np.atleast_1d(p[t]) for p in per_path])
                for t in range(T)
            ]
        vals = problem.terminal_tape(omega, actions).value
        values.append(float(vals.mean()))
    return values


def policy_actions_along(policy, omega):
    """Stage actions of any policy object along one full path."""
    if hasattr(policy, "actions_along"):
        return policy.actions_along(omega)
    actions = []
    for t in range(omega.shape[0]):
        actions.append(np.atleast_1d(policy.action(t, omega[:t], actions)))
    return actions


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def net_to_text(net):
    """Plain-text dump: sizes header, optional box, row-major parameters."""
    buf = io.StringIO()
    buf.write("robustdp-mlp v1\n")
    buf.write("sizes " + " ".join(map(str, net.sizes)) + "\n")
    if net.out_low is not None:
        buf.write("box_low " + " ".join(f"{v:.17g}" for v in net.out_low) + "\n")
        buf.write("box_high " + " ".join(f"{v:.17g}" for v in net.out_high) + "\n")
    else:
        buf.write("box none\n")
    if net.in_scale is not None:
        buf.write("in_scale " + " ".join(f"{v:.17g}" for v in net.in_scale) + "\n")
    else:
        buf.write("in_scale none\n")
    for arr in net.parameters():
        buf.write(" ".join(f"{v:.17g}" for v in np.ravel(arr)) + "\n")
    return buf.getvalue()


def net_from_text(text):
    lines = text.strip().splitlines()
    if lines[0] != "robustdp-mlp v1":
        raise ValueError("unrecognized network dump header")
    sizes = [int(v) for v in lines[1].split()[1:]]
    i = 2
    out_box = None
    if lines[i].startswith("box_low"):
        low = np.array([float(v) for v in lines[i].split()[1:]])
        high = np.array([float(v) for v in lines[i + 1].split()[1:]])
        out_box = (low, high)
        i += 2
    else:
        i += 1
    in_scale = None
    if lines[i].startswith("in_scale"):
        parts = lines[i].split()
        if parts[1] != "none":
            in_scale = np.array([float(v) for v in parts[1:]])
        i += 1
    net = Mlp(sizes[0], sizes[-1], hidden_layers=len(sizes) - 2,
              hidden_units=sizes[1] if len(sizes) > 2 else 1, out_box=out_box,
              in_scale=in_scale)
    net.sizes = sizes
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.array([float(v) for v in lines[i].split()]).reshape(fan_in, fan_out)
        b = np.array([float(v) for v in lines[i + 1].split()])
        params.extend([w, b])
        i += 2
    net.weights = params[0::2]
    net.biases = params[1::2]
    return net


def log_to_csv(log):
    """Training log rows as CSV text (stage, phase, iteration, objective, lambda)."""
    lines = ["stage,phase,iteration,objective,lambda"]
    for stage, phase, it, obj, lam in log:
        lines.append(f"{stage},{phase},{it},{obj:.17g},{lam}")
    return "\n".join(lines) + "\n"
