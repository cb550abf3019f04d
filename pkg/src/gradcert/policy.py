"""Feedforward tanh controllers: gradients, Lipschitz bounds, hard thresholding.

A :class:`PolicyNet` is one agent's controller.  It always takes the full
observation vector as input; structural sparsity (an agent ignoring some
observations) is enforced by zeroing the corresponding first-layer columns,
never numerically, so masked partial derivatives are exactly zero.

The global Lipschitz upper bound is the product of layer spectral norms
(tanh is 1-Lipschitz), and hard thresholding rescales every weight matrix by
(l_cert / l(pi))^(1/n_L) whenever the bound exceeds the certified level, which
restores l(pi') = l_cert up to roundoff.  Biases are never rescaled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

Array = np.ndarray

SPECTRAL_ITERS = 50
SPECTRAL_TOL = 1e-10


def spectral_norm(W: Array, n_iter: int = SPECTRAL_ITERS, tol: float = SPECTRAL_TOL) -> float:
    """Largest singular value by power iteration with a deterministic start."""
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        return 0.0
    rng = np.random.default_rng(0)
    v = rng.normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    G = W.T @ W
    for _ in range(n_iter):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        w /= nrm
        if np.linalg.norm(w - v) <= tol:
            v = w
            break
        v = w
    return float(np.sqrt(v @ G @ v))


def _apply_mask(W0: Array, mask: Array) -> Array:
    W0 = np.array(W0, dtype=float)
    W0[:, ~mask] = 0.0
    return W0


@dataclass(frozen=True)
class PolicyNet:
    """tanh MLP controller with structurally masked inputs.

    weights[k] has shape (n_k, n_{k-1}); the final layer is affine (no
    activation).  With centered=True all biases are zero, so pi(0) = 0.
    """

    weights: tuple
    biases: tuple
    input_mask: Array
    centered: bool = True

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValidationError("need one bias vector per weight matrix")
        mask = np.array(self.input_mask, dtype=bool)
        if mask.shape != (ws[0].shape[1],):
            raise ValidationError("input mask length must match first layer width")
        ws = (_apply_mask(ws[0], mask),) + ws[1:]
        for k in range(1, len(ws)):
            if ws[k].shape[1] != ws[k - 1].shape[0]:
                raise ValidationError(f"layer {k} input width mismatch")
        for w, b in zip(ws, bs):
            if b.shape != (w.shape[0],):
                raise ValidationError("bias shape mismatch")
        if self.centered:
            bs = tuple(np.zeros_like(b) for b in bs)
        for arr in (*ws, *bs):
            arr.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "input_mask", mask)

    # ---- shape info ----
    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    # ---- evaluation ----
    def forward(self, y: Array) -> Array:
        h = np.asarray(y, dtype=float)
        for k in range(self.n_layers - 1):
            h = np.tanh(h @ self.weights[k].T + self.biases[k])
        return h @ self.weights[-1].T + self.biases[-1]

    __call__ = forward

    def jacobian(self, y: Array) -> Array:
        """Exact d pi / d y at a single input, shape (n_out, n_in)."""
        h = np.asarray(y, dtype=float)
        J = self.weights[0].copy()
        for k in range(self.n_layers - 1):
            a = self.weights[k] @ h + self.biases[k]
            h = np.tanh(a)
            J = self.weights[k + 1] @ ((1.0 - h**2)[:, None] * J)
        return J

    # ---- parameter vector plumbing (used by the learner) ----
    def param_vector(self) -> Array:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def with_params(self, theta: Array) -> "PolicyNet":
        theta = np.asarray(theta, dtype=float)
        ws, bs, k = [], [], 0
        for w in self.weights:
            ws.append(theta[k:k + w.size].reshape(w.shape))
            k += w.size
        for b in self.biases:
            bs.append(theta[k:k + b.size].reshape(b.shape))
            k += b.size
        if k != theta.size:
            raise ValidationError("parameter vector length mismatch")
        return PolicyNet(tuple(ws), tuple(bs), self.input_mask, self.centered)

    # ---- construction / serialization ----
    @staticmethod
    def random(sizes: Sequence[int], rng: np.random.Generator,
               input_mask: Array | None = None, centered: bool = True,
               scale: float = 1.0) -> "PolicyNet":
        """Glorot-style random net for the given layer sizes."""
        ws, bs = [], []
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(size=(nout, nin)) * scale / np.sqrt(nin))
            bs.append(np.zeros(nout))
        mask = np.ones(sizes[0], dtype=bool) if input_mask is None else input_mask
        return PolicyNet(tuple(ws), tuple(bs), mask, centered)

    def to_config(self) -> dict:
        return {
            "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
            "mask": self.input_mask.astype(int).tolist(),
            "centered": self.centered,
        }

    @staticmethod
    def from_config(cfg: dict) -> "PolicyNet":
        unknown = set(cfg) - {"layers", "mask", "centered"}
        if unknown:
            raise ValidationError(f"unknown policy config keys: {sorted(unknown)}")
        ws = tuple(np.array(l["weight"], dtype=float) for l in cfg["layers"])
        bs = tuple(np.array(l["bias"], dtype=float) for l in cfg["layers"])
        mask = np.array(cfg["mask"], dtype=bool)
        return PolicyNet(ws, bs, mask, bool(cfg.get("centered", True)))


@dataclass(frozen=True)
class MultiAgentPolicy:
    """Stack of per-agent nets over a shared observation vector.

    Output i of the stacked map comes from agents in order; the combined
    jacobian carries exact zeros at every agent's masked observations.  The
    Lipschitz bound is per agent (the certified level applies to each agent's
    map), so lipschitz_upper reports the max over agents.
    """

    agents: tuple

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise ValidationError("need at least one agent")
        n_in = agents[0].n_in
        if any(a.n_in != n_in for a in agents):
            raise ValidationError("agents must share the observation dimension")
        object.__setattr__(self, "agents", agents)

    @property
    def n_in(self) -> int:
        return self.agents[0].n_in

    @property
    def n_out(self) -> int:
        return sum(a.n_out for a in self.agents)

    @property
    def n_params(self) -> int:
        return sum(a.n_params for a in self.agents)

    def forward(self, y: Array) -> Array:
        y = np.asarray(y, dtype=float)
        outs = [a.forward(y) for a in self.agents]
        return np.concatenate(outs, axis=-1)

    __call__ = forward

    def jacobian(self, y: Array) -> Array:
        return np.vstack([a.jacobian(y) for a in self.agents])

    def param_vector(self) -> Array:
        return np.concatenate([a.param_vector() for a in self.agents])

    def with_params(self, theta: Array) -> "MultiAgentPolicy":
        theta = np.asarray(theta, dtype=float)
        agents, k = [], 0
        for a in self.agents:
            agents.append(a.with_params(theta[k:k + a.n_params]))
            k += a.n_params
        if k != theta.size:
            raise ValidationError("parameter vector length mismatch")
        return MultiAgentPolicy(tuple(agents))

    def to_config(self) -> dict:
        return {"agents": [a.to_config() for a in self.agents]}

    @staticmethod
    def from_config(cfg: dict) -> "MultiAgentPolicy":
        return MultiAgentPolicy(tuple(PolicyNet.from_config(c) for c in cfg["agents"]))


def load_policy(path) -> "PolicyNet | MultiAgentPolicy":
    with open(path) as fh:
        cfg = json.load(fh)
    if "agents" in cfg:
        return MultiAgentPolicy.from_config(cfg)
    return PolicyNet.from_config(cfg)


def save_policy(net, path) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_config(), fh, indent=1)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------

def partial_gradients(net, y: Array) -> Array:
    """Exact reverse-mode partial derivatives, shape (n_a, n_s)."""
    return net.jacobian(y)


def lipschitz_upper(net) -> float:
    """Product of layer spectral norms (per agent; max over agents)."""
    if isinstance(net, MultiAgentPolicy):
        return max(lipschitz_upper(a) for a in net.agents)
    out = 1.0
    for w in net.weights:
        out *= spectral_norm(w)
    return out


def hard_threshold(net, l_cert: float):
    """Rescale all weight matrices by (l_cert / l(pi))^(1/n_L) if l(pi) > l_cert.

    Returns the input unchanged when the bound already holds (up to roundoff);
    biases are never rescaled, and a centered net stays centered.
    """
    if l_cert <= 0:
        raise ValidationError("certified level must be positive")
    if isinstance(net, MultiAgentPolicy):
        return MultiAgentPolicy(tuple(hard_threshold(a, l_cert) for a in net.agents))
    lip = lipschitz_upper(net)
    if lip <= l_cert * (1.0 + 1e-12):
        return net
    factor = (l_cert / lip) ** (1.0 / net.n_layers)
    ws = tuple(factor * w for w in net.weights)
    return PolicyNet(ws, net.biases, net.input_mask, net.centered)


# ---------------------------------------------------------------------------
# gradient monitor
# ---------------------------------------------------------------------------

class GradientMonitor:
    """Running per-entry min/max of observed policy jacobians.

    update() ingests one iteration's batch of jacobians; export uses the last
    `window` iterations (the history since the last export, capped).
    """

    def __init__(self, n_a: int, n_s: int, mask: Array | None = None, window: int = 20):
        self.n_a, self.n_s = n_a, n_s
        self.mask = np.ones((n_a, n_s), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != (n_a, n_s):
            raise ValidationError("monitor mask shape mismatch")
        self.window = int(window)
        self._history: list[tuple[Array, Array]] = []

    def __len__(self) -> int:
        return len(self._history)

    def update(self, grads: Array) -> "GradientMonitor":
        g = np.asarray(grads, dtype=float)
        if g.ndim == 2:
            g = g[None, :, :]
        if g.shape[1:] != (self.n_a, self.n_s):
            raise ValidationError("gradient batch shape mismatch")
        self._history.append((g.min(axis=0), g.max(axis=0)))
        return self

    def reset(self) -> None:
        self._history.clear()

    def observed_range(self) -> tuple[Array, Array]:
        if not self._history:
            raise ValidationError("empty monitor")
        recent = self._history[-self.window:]
        gmin = np.min([lo for lo, _ in recent], axis=0)
        gmax = np.max([hi for _, hi in recent], axis=0)
        return gmin, gmax

    def sign_pattern(self) -> Array:
        """Entries: "+", "-", "±" (mixed), "0" (masked)."""
        gmin, gmax = self.observed_range()
        pat = np.full((self.n_a, self.n_s), "±", dtype=object)
        pat[gmin > 0] = "+"
        pat[gmax < 0] = "-"
        pat[~self.mask] = "0"
        return pat


def monitor_update(mon: GradientMonitor, grads: Array) -> GradientMonitor:
    return mon.update(grads)


def pattern_export(mon: GradientMonitor, eps: float = 0.1, l: float = 1.0):
    """Bounds from the monitored sign pattern: one-sided where signs are
    consistent, symmetric where mixed, [0, 0] where masked."""
    from .gradient_bounds import GradientBoundSet

    if not 0 < eps < 1:
        raise ValidationError("eps must lie in (0, 1)")
    pat = mon.sign_pattern()
    signs = np.zeros((mon.n_a, mon.n_s))
    signs[pat == "+"] = 1.0
    signs[pat == "-"] = -1.0
    return GradientBoundSet.one_sided(l, mon.mask, signs, eps=eps)


def save_pattern(mon: GradientMonitor, path, eps: float = 0.1, l: float = 1.0) -> None:
    payload = {"pattern": mon.sign_pattern().tolist(), "eps": eps, "l": l}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, ensure_ascii=False)


def load_pattern(path) -> tuple[Array, float, float]:
    """Returns (sign matrix in {-1, 0, +1, nan-for-masked}, eps, l).

    Mixed-sign entries come back as 0 (symmetric bounds); masked entries as
    NaN so callers can zero them out.
    """
    with open(path) as fh:
        payload = json.load(fh)
    unknown = set(payload) - {"pattern", "eps", "l"}
    if unknown:
        raise ValidationError(f"unknown pattern file keys: {sorted(unknown)}")
    pat = payload["pattern"]
    out = np.zeros((len(pat), len(pat[0])))
    for i, row in enumerate(pat):
        for j, s in enumerate(row):
            if s == "+":
                out[i, j] = 1.0
            elif s in ("-", "−"):
                out[i, j] = -1.0
            elif s in ("±", "+-", "+/-"):
                out[i, j] = 0.0
            elif s == "0":
                out[i, j] = np.nan
            else:
                raise ValidationError(f"bad pattern symbol {s!r}")
    return out, float(payload.get("eps", 0.1)), float(payload.get("l", 1.0))
