"""Closed-loop integration, exploration signals, and empirical gain estimates.

Dynamics are integrated with classical fourth-order Runge-Kutta under
zero-order-hold control: at each grid point the action u_k = pi(y_k) + e_k is
computed once and held across the step, while the plant nonlinearities evolve
continuously inside the substeps.  Energies use trapezoidal quadrature, so an
empirical gain ||y|| / ||e|| from rest is a lower bound on the true L2 gain
and must stay below any certified gamma.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError
from .system_model import LtiSystem, NonlinearBlock

Array = np.ndarray

DIVERGENCE_LIMIT = 1e6
DEFAULT_H = 1e-3


@dataclass(frozen=True)
class Trajectory:
    """Sampled closed-loop run on a uniform grid (all arrays share length)."""

    times: Array
    x: Array
    u: Array
    e: Array
    y: Array
    r: Array | None
    h: float
    diverged: bool = False

    def __len__(self) -> int:
        return self.times.shape[0]

    def energy(self, signal: str) -> float:
        """Trapezoidal integral of |s(t)|^2 for s in {'y', 'e', 'u'}."""
        s = getattr(self, signal)
        vals = np.sum(np.atleast_2d(s.T).T ** 2, axis=1)
        return float(np.trapezoid(vals, dx=self.h))

    def total_cost(self, discount: float = 1.0) -> float:
        if self.r is None:
            raise ValidationError("trajectory carries no cost samples")
        if discount >= 1.0:
            return float(np.trapezoid(self.r, dx=self.h))
        w = discount ** (np.arange(len(self)) * self.h)
        return float(np.trapezoid(self.r * w, dx=self.h))


def _drift(plant: LtiSystem, blocks: Sequence[NonlinearBlock]):
    A, B = plant.A, plant.B
    if not blocks:
        return lambda x, u: A @ x + B @ u
    S = np.array([b.in_vec for b in blocks])
    E = np.array([b.out_vec for b in blocks]).T
    kinds = [b.kind for b in blocks]
    scales = np.array([b.scale for b in blocks])
    sin_minus = np.array([k == "sin_minus_id" for k in kinds])

    def f(x, u):
        z = S @ x
        phi = np.where(sin_minus, np.sin(z) - z, z - np.sin(z)) * scales
        return A @ x + B @ u + E @ phi

    return f


def integrate(plant: LtiSystem, blocks: Sequence[NonlinearBlock],
              controller: Callable[[Array], Array] | None,
              e: Array | None = None, x0: Array | None = None,
              horizon: float = 10.0, h: float = DEFAULT_H,
              cost: tuple[Array, Array] | None = None,
              divergence_limit: float = DIVERGENCE_LIMIT) -> Trajectory:
    """RK4 rollout with zero-order-hold control u_k = pi(y_k) + e_k.

    e is sampled on the step grid ((N, n_a) or None for no exploration);
    cost an optional (Q, R) pair recorded as r_k = x^T Q x + u^T R u.  State
    blowup beyond the divergence limit truncates the run and sets the flag.
    """
    if h <= 0:
        raise ValidationError("step size must be positive")
    n_steps = int(round(horizon / h))
    if n_steps < 1:
        raise ValidationError("horizon shorter than one step")
    x = np.zeros(plant.n_s) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (plant.n_s,):
        raise ValidationError("x0 dimension mismatch")
    if e is None:
        e = np.zeros((n_steps, plant.n_a))
    else:
        e = np.asarray(e, dtype=float)
        if e.ndim == 1:
            e = e[:, None]
        if e.shape[0] < n_steps or e.shape[1] != plant.n_a:
            raise ValidationError("exploration signal does not cover the horizon")
    pi = controller if controller is not None else (lambda y: np.zeros(plant.n_a))
    f = _drift(plant, blocks)
    Cmat = plant.C
    Q, R = (None, None) if cost is None else cost
    xs = np.empty((n_steps + 1, plant.n_s))
    us = np.empty((n_steps + 1, plant.n_a))
    ys = np.empty((n_steps + 1, plant.n_o))
    rs = np.empty(n_steps + 1) if Q is not None else None
    es = np.vstack([e[:n_steps], e[n_steps - 1:n_steps]])
    diverged = False
    k = 0
    for k in range(n_steps + 1):
        y = Cmat @ x
        u = np.atleast_1d(np.asarray(pi(y), dtype=float)) + es[k]
        xs[k], us[k], ys[k] = x, u, y
        if rs is not None:
            rs[k] = x @ Q @ x + u @ R @ u
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > divergence_limit:
            diverged = True
            break
        if k == n_steps:
            break
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    end = k + 1
    times = np.arange(end) * h
    return Trajectory(times=times, x=xs[:end], u=us[:end], e=es[:end], y=ys[:end],
                      r=None if rs is None else rs[:end], h=h, diverged=diverged)


def exploration_signal(n_steps: int, n_dim: int, rng: np.random.Generator,
                       std: float = 0.1, cutoff_hz: float = 1.0,
                       h: float = DEFAULT_H) -> Array:
    """Low-pass-shaped Gaussian exploration with finite energy.

    White Gaussian samples pass through a one-pole filter with the given
    cutoff; the output is rescaled to the requested pointwise std.
    """
    if n_steps < 1:
        raise ValidationError("need at least one step")
    w = rng.normal(size=(n_steps, n_dim))
    a = np.exp(-2.0 * np.pi * cutoff_hz * h)
    out = np.empty_like(w)
    acc = np.zeros(n_dim)
    for k in range(n_steps):
        acc = a * acc + (1.0 - a) * w[k]
        out[k] = acc
    scale = np.std(out)
    if scale > 0:
        out *= std / scale
    return out


def empirical_l2_gain(plant: LtiSystem, blocks: Sequence[NonlinearBlock],
                      controller: Callable[[Array], Array] | None,
                      excitations: Sequence[Array], horizon: float = 10.0,
                      h: float = DEFAULT_H) -> float:
    """Largest energy ratio ||y|| / ||e|| over the given excitations, from rest.

    Zero-energy excitations are skipped with a warning; all-zero input is an
    error.  The estimate lower-bounds the true gain, so it can never exceed a
    valid certificate.
    """
    best = None
    for e in excitations:
        traj = integrate(plant, blocks, controller, e=e, horizon=horizon, h=h)
        e_energy = traj.energy("e")
        if e_energy <= 0.0:
            warnings.warn("skipping zero-energy excitation", stacklevel=2)
            continue
        ratio = np.sqrt(traj.energy("y") / e_energy)
        best = ratio if best is None else max(best, ratio)
    if best is None:
        raise ValidationError("no excitation with positive energy")
    return float(best)
