"""On-policy policy-gradient training with trust region and gradient regulation.

The loop collects Gaussian-exploration rollouts on a benchmark, estimates
advantages as discounted reward-to-go minus a linear baseline, ascends the
weighted objective

    L = sum_t ratio_t * adv_t  -  w1 * L_explore  -  w2 * L_smooth,

    L_explore = sum_t ||u_{t-1} - pi(x_t)||^2          (action consistency)
    L_smooth  = sum_t ||d pi / d x (x_t)||_F^2         (input-gradient reading)

along a natural-gradient direction (conjugate gradient on the damped Gaussian
Fisher), scales the step to the quadratic KL budget, backtracks on the
surrogate, and then applies the chosen gradient regulation: hard thresholding
projects the net back to the certified Lipschitz level after every iteration;
the soft penalty doubles w2 while the bound is violated and relaxes it after
a clean streak.

All derivatives are exact reverse-mode passes over the tanh policies,
including the second-order pass needed for the input-gradient penalty.  The
printed parameter-gradient form of the smoothness penalty is available behind
a flag (value exact, gradient by finite differences; desk-scale only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .benchmarks import Benchmark
from .errors import ValidationError
from .policy import GradientMonitor, MultiAgentPolicy, PolicyNet, hard_threshold, lipschitz_upper

Array = np.ndarray


# ---------------------------------------------------------------------------
# exact derivatives for tanh policies
# ---------------------------------------------------------------------------

def _single_nets(net):
    return list(net.agents) if isinstance(net, MultiAgentPolicy) else [net]


def _forward_cache(net: PolicyNet, X: Array):
    """Returns (out, taps) where taps[k] is the input to layer k."""
    taps = [X]
    h = X
    for k in range(net.n_layers - 1):
        h = np.tanh(h @ net.weights[k].T + net.biases[k])
        taps.append(h)
    return h @ net.weights[-1].T + net.biases[-1], taps


def batch_forward(net, X: Array) -> Array:
    X = np.asarray(X, dtype=float)
    return net.forward(X)


def _backprop_single(net: PolicyNet, taps, Gout: Array) -> list[Array]:
    """Parameter gradients of sum(Gout * out); respects mask and centering."""
    L = net.n_layers
    gW = [None] * L
    gb = [None] * L
    G = Gout
    for k in range(L - 1, -1, -1):
        gW[k] = G.T @ taps[k]
        gb[k] = G.sum(axis=0)
        if k > 0:
            G = (G @ net.weights[k]) * (1.0 - taps[k] ** 2)
    gW[0][:, ~net.input_mask] = 0.0
    if net.centered:
        gb = [np.zeros_like(b) for b in gb]
    return [*gW, *gb]


def _flatten(parts: Sequence[Array]) -> Array:
    return np.concatenate([p.ravel() for p in parts])


def grad_from_output_grads(net, X: Array, Gout: Array) -> Array:
    """Flat d/d theta of sum(Gout * pi(X)) across the (possibly multi-agent) net."""
    X = np.asarray(X, dtype=float)
    out = []
    col = 0
    for sub in _single_nets(net):
        _, taps = _forward_cache(sub, X)
        out.append(_flatten(_backprop_single(sub, taps, Gout[:, col:col + sub.n_out])))
        col += sub.n_out
    return np.concatenate(out)


def _smooth_grad_single(net: PolicyNet, x: Array) -> tuple[float, list[Array]]:
    """(||J(x)||_F^2, parameter gradients) via an exact second-order pass."""
    L = net.n_layers
    W = net.weights
    taps = [x]
    h = x
    for k in range(L - 1):
        h = np.tanh(W[k] @ h + net.biases[k])
        taps.append(h)
    d = [1.0 - taps[k + 1] ** 2 for k in range(L - 1)]      # d[k] pairs with tanh(a_k)
    # right chains: J = (left of W_k) @ W_k @ right[k]
    right = [None] * L
    chain = np.eye(net.n_in)
    for k in range(L):
        right[k] = chain
        if k < L - 1:
            chain = d[k][:, None] * (W[k] @ chain)
    J = W[L - 1] @ chain if L > 1 else W[0]
    # left chains: left[k] = factors strictly left of W_k
    left = [None] * L
    acc = np.eye(net.n_out)
    for k in range(L - 1, -1, -1):
        left[k] = acc
        if k > 0:
            acc = (acc @ W[k]) * d[k - 1][None, :]
    gW = [2.0 * left[k].T @ J @ right[k].T for k in range(L)]
    gb = [np.zeros_like(b) for b in net.biases]
    # activation dependence: d g / d t_k flows back through layers <= k
    for k in range(L - 1):
        # J = T diag(d_k) B with T = left[k+1] W_{k+1}, B = W_k right[k]
        Tmat = left[k + 1] @ W[k + 1]
        Bmat = W[k] @ right[k]
        u = 2.0 * np.sum((Tmat.T @ J) * Bmat, axis=1)   # diag(T^T J B^T)
        kappa = -2.0 * taps[k + 1] * u        # d g / d t_k
        G = kappa
        for j in range(k, -1, -1):
            Ga = G * d[j]
            gW[j] += np.outer(Ga, taps[j])
            gb[j] += Ga
            if j > 0:
                G = W[j].T @ Ga
    gW[0][:, ~net.input_mask] = 0.0
    if net.centered:
        gb = [np.zeros_like(b) for b in gb]
    return float(np.sum(J * J)), [*gW, *gb]


def smooth_penalty_and_grad(net, X: Array) -> tuple[float, Array]:
    """Sum over rows of ||d pi / d x||_F^2 and its exact parameter gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = 0.0
    grads = []
    for sub in _single_nets(net):
        g_sub = None
        for x in X:
            val, parts = _smooth_grad_single(sub, x)
            total += val
            flat = _flatten(parts)
            g_sub = flat if g_sub is None else g_sub + flat
        grads.append(g_sub)
    return total, np.concatenate(grads)


def param_grad_penalty(net, X: Array) -> float:
    """Printed parameter-gradient penalty sum_t ||d pi / d theta (x_t)||^2."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = 0.0
    for sub in _single_nets(net):
        for x in X:
            for i in range(sub.n_out):
                Gout = np.zeros((1, sub.n_out))
                Gout[0, i] = 1.0
                _, taps = _forward_cache(sub, x[None, :])
                g = _flatten(_backprop_single(sub, taps, Gout))
                total += float(g @ g)
    return total


def logprob_grad_rows(net, X: Array, U: Array, std: float) -> Array:
    """Per-sample d log pi(u|x) / d theta rows, shape (N, n_params)."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    mu = batch_forward(net, X)
    coef = (U - mu) / std**2
    N = X.shape[0]
    rows = np.empty((N, net.n_params))
    for t in range(N):
        rows[t] = grad_from_output_grads(net, X[t:t + 1], coef[t:t + 1])
    return rows


# ---------------------------------------------------------------------------
# rollouts, returns, advantages
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Flattened on-policy batch at control-step resolution."""

    states: Array
    actions: Array
    rewards: Array
    returns: Array
    advantages: Array
    logprob_mean: Array          # behavior-policy means at states
    traj_slices: list
    std: float
    diverged: bool = False

    def __len__(self) -> int:
        return self.states.shape[0]


def discounted_returns(rewards: Array, discount: float) -> Array:
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def fit_linear_baseline(states: Array, returns: Array) -> Array:
    """Least-squares weights for V(x) = w . [x, 1]."""
    F = np.hstack([states, np.ones((states.shape[0], 1))])
    w, *_ = np.linalg.lstsq(F, returns, rcond=None)
    return w


def baseline_values(weights: Array, states: Array) -> Array:
    F = np.hstack([states, np.ones((states.shape[0], 1))])
    return F @ weights


def compute_advantages(states: Array, rewards: Array, traj_slices, discount: float):
    """Reward-to-go returns minus a batch-fit linear baseline."""
    returns = np.empty_like(rewards)
    for sl in traj_slices:
        returns[sl] = discounted_returns(rewards[sl], discount)
    w = fit_linear_baseline(states, returns)
    adv = returns - baseline_values(w, states)
    return returns, adv


@dataclass
class TrainConfig:
    """Hyperparameters of the desk-scale training loop."""

    iters: int = 200
    n_rollouts: int = 4
    horizon_steps: int = 2000        # control steps per rollout
    substeps: int = 10               # integrator substeps per control step
    h: float = 1e-3                  # integrator step (s)
    discount: float = 0.99
    w1: float = 1e-3
    w2: float = 1e-3
    l_cert: float = 1.0
    delta_kl: float = 1e-2
    std_init: float = 0.3
    std_decay: float = 0.995
    std_floor: float = 0.02
    mode: str = "hard_threshold"     # none | soft_penalty | hard_threshold
    seed: int = 0
    x0_std: float = 0.3
    reward_scale: float = 1.0
    smooth_on: str = "input"         # "input" | "param"
    cg_iters: int = 50
    cg_tol: float = 1e-10
    damping: float = 1e-3
    backtrack_max: int = 10
    checkpoint_every: int = 50
    w2_growth: float = 2.0
    w2_clean_iters: int = 10

    def __post_init__(self):
        if self.mode not in ("none", "soft_penalty", "hard_threshold"):
            raise ValidationError(f"unknown regulation mode {self.mode!r}")
        if self.smooth_on not in ("input", "param"):
            raise ValidationError("smooth_on must be 'input' or 'param'")
        if not 0 < self.discount <= 1.0:
            raise ValidationError("discount must lie in (0, 1]")
        if self.w1 < 0 or self.w2 < 0:
            raise ValidationError("penalty weights must be nonnegative")


class _BatchedEnv:
    """Vectorized RK4 rollouts of a benchmark under zero-order-hold control."""

    def __init__(self, bench: Benchmark, K_n: Array | None = None,
                 divergence_limit: float = 1e6):
        plant = bench.certified_plant(K_n)
        self.A = plant.A
        self.B = plant.B
        self.Q, self.R = bench.Q, bench.R
        self.n_s, self.n_a = plant.n_s, plant.n_a
        blocks = list(bench.blocks)
        if blocks:
            self.S = np.array([b.in_vec for b in blocks])
            self.E = np.array([b.out_vec for b in blocks]).T
            self.scales = np.array([b.scale for b in blocks])
            self.sin_minus = np.array([b.kind == "sin_minus_id" for b in blocks])
        else:
            self.S = None
        self.limit = divergence_limit

    def drift(self, X: Array, U: Array) -> Array:
        out = X @ self.A.T + U @ self.B.T
        if self.S is not None:
            Z = X @ self.S.T
            phi = np.where(self.sin_minus, np.sin(Z) - Z, Z - np.sin(Z)) * self.scales
            out = out + phi @ self.E.T
        return out

    def control_step(self, X: Array, U: Array, h: float, substeps: int):
        """Advance one control interval; returns (X', integrated cost)."""
        cost = np.zeros(X.shape[0])
        for _ in range(substeps):
            inst = np.einsum("bi,ij,bj->b", X, self.Q, X) + np.einsum("bi,ij,bj->b", U, self.R, U)
            k1 = self.drift(X, U)
            k2 = self.drift(X + 0.5 * h * k1, U)
            k3 = self.drift(X + 0.5 * h * k2, U)
            k4 = self.drift(X + h * k3, U)
            X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            cost += inst * h
        return X, cost


def collect_rollouts(env: _BatchedEnv, net, cfg: TrainConfig, std: float,
                     rng: np.random.Generator) -> RolloutBatch:
    B = cfg.n_rollouts
    X = cfg.x0_std * rng.normal(size=(B, env.n_s))
    alive = np.ones(B, dtype=bool)
    states = [[] for _ in range(B)]
    actions = [[] for _ in range(B)]
    rewards = [[] for _ in range(B)]
    diverged = False
    for _ in range(cfg.horizon_steps):
        mu = batch_forward(net, X)
        U = mu + std * rng.normal(size=mu.shape)
        Xn, cost = env.control_step(X, U, cfg.h, cfg.substeps)
        bad = ~np.all(np.isfinite(Xn), axis=1) | (np.max(np.abs(Xn), axis=1) > env.limit)
        for b in range(B):
            if not alive[b]:
                continue
            if bad[b]:
                alive[b] = False
                diverged = True
                continue
            states[b].append(X[b])
            actions[b].append(U[b])
            rewards[b].append(-cfg.reward_scale * cost[b])
        X = np.where(bad[:, None], X, Xn)
        if not alive.any():
            break
    slices = []
    flat_s, flat_a, flat_r = [], [], []
    pos = 0
    for b in range(B):
        if not states[b]:
            continue
        n = len(states[b])
        slices.append(slice(pos, pos + n))
        flat_s.extend(states[b])
        flat_a.extend(actions[b])
        flat_r.extend(rewards[b])
        pos += n
    if pos == 0:
        raise ValidationError("every rollout diverged before its first step")
    S = np.array(flat_s)
    Aq = np.array(flat_a)
    Rw = np.array(flat_r)
    returns, adv = compute_advantages(S, Rw, slices, cfg.discount)
    return RolloutBatch(states=S, actions=Aq, rewards=Rw, returns=returns,
                        advantages=adv, logprob_mean=batch_forward(net, S),
                        traj_slices=slices, std=std, diverged=diverged)


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------

def surrogate_loss(batch: RolloutBatch, net, net_old=None) -> float:
    """Importance-weighted advantage sum (maximized); ratios are 1 at net_old."""
    mu_new = batch_forward(net, batch.states)
    mu_old = batch.logprob_mean if net_old is None else batch_forward(net_old, batch.states)
    d_new = np.sum((batch.actions - mu_new) ** 2, axis=1)
    d_old = np.sum((batch.actions - mu_old) ** 2, axis=1)
    ratios = np.exp((d_old - d_new) / (2.0 * batch.std**2))
    return float(ratios @ batch.advantages)


def smoothness_penalties(batch: RolloutBatch, net, smooth_on: str = "input"):
    """(L_explore, L_smooth) evaluated on the batch trajectories."""
    mu = batch_forward(net, batch.states)
    l_explore = 0.0
    for sl in batch.traj_slices:
        prev_u = batch.actions[sl][:-1]
        l_explore += float(np.sum((prev_u - mu[sl][1:]) ** 2))
    if smooth_on == "input":
        l_smooth, _ = smooth_penalty_and_grad(net, batch.states)
    else:
        l_smooth = param_grad_penalty(net, batch.states)
    return l_explore, l_smooth


def _objective_and_grad(batch: RolloutBatch, net, cfg: TrainConfig):
    """Weighted objective at the behavior policy (ratios = 1) and its gradient."""
    mu = batch_forward(net, batch.states)
    sur = float(batch.advantages.sum())          # ratios are 1 at net = net_old
    g_sur = grad_from_output_grads(
        net, batch.states,
        (batch.actions - mu) * (batch.advantages / batch.std**2)[:, None])
    l_exp = 0.0
    G_exp = np.zeros_like(mu)          # gradient of -L_explore w.r.t. mu
    for sl in batch.traj_slices:
        prev_u = batch.actions[sl][:-1]
        diff = prev_u - mu[sl][1:]
        l_exp += float(np.sum(diff**2))
        G_exp[sl.start + 1: sl.stop] += 2.0 * diff
    g_exp = grad_from_output_grads(net, batch.states, G_exp)
    if cfg.smooth_on == "input":
        l_smo, g_smo = smooth_penalty_and_grad(net, batch.states)
    else:
        l_smo = param_grad_penalty(net, batch.states)
        g_smo = _fd_grad(lambda n: param_grad_penalty(n, batch.states), net)
    value = sur - cfg.w1 * l_exp - cfg.w2 * l_smo
    grad = g_sur + cfg.w1 * g_exp - cfg.w2 * g_smo
    return value, grad, {"surrogate": sur, "l_explore": l_exp, "l_smooth": l_smo}


def _fd_grad(fn, net, step: float = 1e-6) -> Array:
    theta = net.param_vector()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += step
        dn = theta.copy()
        dn[i] -= step
        g[i] = (fn(net.with_params(up)) - fn(net.with_params(dn))) / (2 * step)
    return g


def mean_kl(net_new, net_old, states: Array, std: float) -> float:
    """Average KL between fixed-std Gaussian policies over visited states."""
    d = batch_forward(net_new, states) - batch_forward(net_old, states)
    return float(np.mean(np.sum(d**2, axis=1)) / (2.0 * std**2))


def conjugate_gradient(hvp, b: Array, iters: int, tol: float):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    if rs == 0.0:
        return x, True
    for _ in range(iters):
        Hp = hvp(p)
        alpha = rs / float(p @ Hp)
        x += alpha * p
        r -= alpha * Hp
        rs_new = float(r @ r)
        if np.sqrt(rs_new) < tol * max(1.0, np.sqrt(float(b @ b))):
            return x, True
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, False


@dataclass
class StepInfo:
    accepted: bool
    kl: float
    surrogate_gain: float
    cg_converged: bool
    backtracks: int


def natural_step(net, batch: RolloutBatch, cfg: TrainConfig):
    """One trust-region natural-gradient update; returns (net', StepInfo)."""
    _, grad, parts = _objective_and_grad(batch, net, cfg)
    rows = logprob_grad_rows(net, batch.states, batch.actions, batch.std)
    N = rows.shape[0]

    def fisher_vp(v):
        return rows.T @ (rows @ v) / N

    def damped_vp(v):
        return fisher_vp(v) + cfg.damping * v

    d, converged = conjugate_gradient(damped_vp, grad, cfg.cg_iters, cfg.cg_tol)
    if not converged:
        d = grad.copy()
    dhd = float(d @ fisher_vp(d))
    if dhd <= 0:
        dhd = float(d @ d) * cfg.damping + 1e-30
    beta = math.sqrt(2.0 * cfg.delta_kl / dhd)
    theta0 = net.param_vector()
    sur0 = float(batch.advantages.sum())       # surrogate at ratios = 1

    # acceptance: surrogate improvement under the actual averaged-KL budget
    for bt in range(cfg.backtrack_max + 1):
        candidate = net.with_params(theta0 + beta * d)
        kl = mean_kl(candidate, net, batch.states, batch.std)
        if kl <= cfg.delta_kl * (1.0 + 1e-9):
            gain = surrogate_loss(batch, candidate) - sur0
            if gain > 0:
                return candidate, StepInfo(True, kl, gain, converged, bt), parts
        beta *= 0.5
    return net, StepInfo(False, 0.0, 0.0, converged, cfg.backtrack_max), parts


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list
    net: object
    checkpoints: dict
    monitor: GradientMonitor

    def column(self, key: str) -> Array:
        return np.array([row[key] for row in self.history])


def suggest_penalty_weights(batch: RolloutBatch, net, target: float = 0.03,
                            smooth_on: str = "input") -> tuple[float, float]:
    """Weights putting each penalty term at ~target of the surrogate magnitude.

    Mirrors the guidance of keeping the penalty scales at a few percent of
    the surrogate loss at the first iteration.
    """
    sur = abs(surrogate_loss(batch, net)) or 1.0
    l_exp, l_smo = smoothness_penalties(batch, net, smooth_on)
    w1 = target * sur / l_exp if l_exp > 0 else 0.0
    w2 = target * sur / l_smo if l_smo > 0 else 0.0
    return w1, w2


def default_policy(bench: Benchmark, hidden: int = 8,
                   rng: np.random.Generator | None = None,
                   scale: float = 0.3) -> MultiAgentPolicy:
    """One masked tanh net per agent over the shared observation vector."""
    rng = np.random.default_rng(0) if rng is None else rng
    agents = []
    for mask in bench.agent_masks():
        agents.append(PolicyNet.random([bench.plant.n_s, hidden, 1], rng,
                                       input_mask=mask, scale=scale))
    return MultiAgentPolicy(tuple(agents))


def train(bench: Benchmark, net, cfg: TrainConfig, K_n: Array | None = None) -> TrainResult:
    """Run the regulated on-policy loop on a benchmark environment.

    Emits one history row per iteration (reward, Lipschitz bound, KL, penalty
    weights/values, divergence and acceptance flags) and policy checkpoints
    every cfg.checkpoint_every iterations.  Diverged rollout batches are
    logged and skip the update, never silently repaired.
    """
    rng = np.random.default_rng(cfg.seed)
    env = _BatchedEnv(bench, K_n)
    monitor = GradientMonitor(net.n_out, bench.plant.n_s, mask=bench.obs_mask)
    w2 = cfg.w2
    w2_init = cfg.w2
    clean = 0
    history = []
    checkpoints = {0: net.to_config()}
    std = cfg.std_init
    for it in range(cfg.iters):
        std = max(cfg.std_floor, cfg.std_init * cfg.std_decay**it)
        try:
            batch = collect_rollouts(env, net, cfg, std, rng)
        except ValidationError:
            history.append({"iter": it, "mean_reward": float("nan"),
                            "lipschitz": lipschitz_upper(net), "kl": 0.0,
                            "w2": w2, "surrogate": 0.0, "l_explore": 0.0,
                            "l_smooth": 0.0, "diverged": True, "accepted": False,
                            "std": std})
            continue
        cfg_it = replace(cfg, w2=w2)
        if batch.diverged:
            new_net = net
            info = StepInfo(False, 0.0, 0.0, True, 0)
            parts = {"surrogate": float("nan"), "l_explore": float("nan"),
                     "l_smooth": float("nan")}
        else:
            new_net, info, parts = natural_step(net, batch, cfg_it)
        net = new_net
        if cfg.mode == "hard_threshold":
            net = hard_threshold(net, cfg.l_cert)
        lip = lipschitz_upper(net)
        if cfg.mode == "soft_penalty":
            if lip > cfg.l_cert:
                w2 *= cfg.w2_growth
                clean = 0
            else:
                clean += 1
                if clean >= cfg.w2_clean_iters:
                    w2 = max(w2 / cfg.w2_growth, w2_init)
                    clean = 0
        sub = batch.states[:: max(1, len(batch) // 32)]
        monitor.update(np.stack([net.jacobian(x) for x in sub]))
        mean_reward = float(np.mean([batch.rewards[sl].sum() for sl in batch.traj_slices]))
        history.append({"iter": it, "mean_reward": mean_reward, "lipschitz": lip,
                        "kl": info.kl, "w2": w2, "surrogate": parts["surrogate"],
                        "l_explore": parts["l_explore"], "l_smooth": parts["l_smooth"],
                        "diverged": batch.diverged, "accepted": info.accepted,
                        "std": std})
        if (it + 1) % cfg.checkpoint_every == 0:
            checkpoints[it + 1] = net.to_config()
    return TrainResult(history=history, net=net, checkpoints=checkpoints,
                       monitor=monitor)
