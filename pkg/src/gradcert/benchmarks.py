"""The two bundled decentralized-control benchmarks.

flight4 — chain formation of aircraft holding relative distances.  Each
aircraft carries an internally stabilizing feedback v = alpha zdot + beta
theta + gamma thetadot + u (alpha = 90.62, beta = -42.15, gamma = -13.22,
delta = 0.1); the interconnected model stacks, per leading agent, the state
[z_i - z_{i+1} - d, zdot, theta, thetadot] and, for the last agent,
[zdot, theta, thetadot].  The raw A has its largest eigenvalue at zero (the
relative-position integrators), so certification closes the loop with a
bundled LQR nominal (Q = 1000 I, R = I).  Sine residuals sin(theta) - theta
enter the thetadot rows with slope in [-1, 0] on |theta| <= pi/2.  Agents
observe only neighboring relative distances.

power_swing — per-unit swing dynamics m_i thetaddot + d_i thetadot =
p_m - p_e over a ring of susceptances (cosine coupling dropped), states
[theta; omega], inputs the mechanical injections.  Per-line residuals
b_ij/m (dtheta - sin dtheta) have slope in [0, 1 - cos(theta_bar)] on
|dtheta| <= theta_bar = pi/3.  Communication is a star: the hub generator
sees every state, the others see their own angle/frequency plus the hub's.
Network data (inertias, dampings, susceptances) is a bundled deterministic
pattern, configurable, not field data.

The nonhomogeneous sweep mode needs per-entry gradient signs; when no
monitored pattern is supplied the benchmarks fall back to the signs of the
bundled nominal gain on observed entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .certifier import CertificationSetup
from .errors import ValidationError
from .iqc_blocks import slope_restricted_stack
from .system_model import LtiSystem, NonlinearBlock, nominal_controller

Array = np.ndarray

FLIGHT_ALPHA = 90.62
FLIGHT_BETA = -42.15
FLIGHT_GAMMA = -13.22
FLIGHT_DELTA = 0.1
POWER_THETA_BAR = np.pi / 3


@dataclass(frozen=True)
class Benchmark:
    """Raw plant, residual channels, quadratic cost, and observation masks."""

    name: str
    plant: LtiSystem
    blocks: tuple
    Q: Array
    R: Array
    obs_mask: Array          # (n_a, n_s) observed entries per agent
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.plant.n_a

    def agent_masks(self) -> list[Array]:
        """Per-agent boolean observation vectors (rows of obs_mask)."""
        return [self.obs_mask[i] for i in range(self.obs_mask.shape[0])]

    def nominal_gain(self, Q: Array | None = None, R: Array | None = None) -> Array:
        """Bundled stabilizing gain: LQR at the package defaults (Q = 1000 I,
        R = I) unless overridden.  Deliberately independent of the RL cost."""
        return nominal_controller(self.plant, Q=Q, R=R)

    def certified_plant(self, K_n: Array | None = None) -> LtiSystem:
        """Loop closed with the nominal gain (LQR default)."""
        K = self.nominal_gain() if K_n is None else np.asarray(K_n, dtype=float)
        return self.plant.closed_with(K)

    def certification_setup(self, K_n: Array | None = None,
                            sign_pattern: Array | None = None,
                            zf_pole: float = 1.0, use_zf: bool = True,
                            eps_margin: float = 0.1) -> CertificationSetup:
        """Certification-ready bundle: closed plant + IQC stack + masks.

        sign_pattern defaults to the nominal gain's signs on observed
        entries, standing in for a monitored-gradient pattern.
        """
        K = self.nominal_gain() if K_n is None else np.asarray(K_n, dtype=float)
        plant = self.plant.closed_with(K)
        if sign_pattern is None:
            sign_pattern = np.sign(np.where(np.abs(K) > 1e-12, K, 0.0))
        block = slope_restricted_stack(list(self.blocks), self.plant.n_s,
                                       zf_pole=zf_pole, include_zf=use_zf) \
            if self.blocks else None
        return CertificationSetup(plant=plant, block=block, obs_mask=self.obs_mask,
                                  sign_pattern=sign_pattern, eps_margin=eps_margin)


def build_flight(n_agents: int = 4) -> Benchmark:
    """Flight-formation chain; n_agents = 4 gives the 15-state, 4-input model."""
    if n_agents < 2:
        raise ValidationError("formation needs at least two aircraft")
    a, b, g, d = FLIGHT_ALPHA, FLIGHT_BETA, FLIGHT_GAMMA, FLIGHT_DELTA
    A_tilde = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, a, b, g],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, a / d, (b + 1.0) / d, g / d],
    ])
    B_tilde = np.array([[0.0], [1.0], [0.0], [1.0 / d]])
    A_last = np.array([
        [a, b, g],
        [0.0, 0.0, 1.0],
        [a / d, (b + 1.0) / d, g / d],
    ])
    B_last = np.array([[1.0], [0.0], [1.0 / d]])
    H4 = np.zeros((4, 4))
    H4[0, 1] = -1.0             # relative distance couples to the next zdot
    H3 = np.zeros((4, 3))
    H3[0, 0] = -1.0
    n_lead = n_agents - 1
    n_s = 4 * n_lead + 3
    A = np.zeros((n_s, n_s))
    B = np.zeros((n_s, n_agents))
    for k in range(n_lead):
        r = 4 * k
        A[r:r + 4, r:r + 4] = A_tilde
        B[r:r + 4, k] = B_tilde[:, 0]
        if k + 1 < n_lead:
            A[r:r + 4, r + 4:r + 8] = H4
        else:
            A[r:r + 4, 4 * n_lead:] = H3
    r = 4 * n_lead
    A[r:, r:] = A_last
    B[r:, n_agents - 1] = B_last[:, 0]
    # sine residual per aircraft, entering its thetadot row
    blocks = []
    theta_idx = [4 * k + 2 for k in range(n_lead)] + [4 * n_lead + 1]
    resid_idx = [4 * k + 3 for k in range(n_lead)] + [4 * n_lead + 2]
    for th, rr in zip(theta_idx, resid_idx):
        iv = np.zeros(n_s)
        iv[th] = 1.0
        ov = np.zeros(n_s)
        ov[rr] = 1.0
        blocks.append(NonlinearBlock("sin_minus_id", iv, ov, domain=np.pi / 2))
    # agent i < n-1 observes distance i; agents in the middle also the one before
    obs = np.zeros((n_agents, n_s), dtype=bool)
    dist_idx = [4 * k for k in range(n_lead)]
    for i in range(n_agents):
        if i < n_lead:
            obs[i, dist_idx[i]] = True
        if i >= 1 and i - 1 < n_lead:
            obs[i, dist_idx[i - 1]] = True
    return Benchmark(
        name=f"flight{n_agents}",
        plant=LtiSystem(A, B),
        blocks=tuple(blocks),
        Q=1000.0 * np.eye(n_s),
        R=np.eye(n_agents),
        obs_mask=obs,
        meta={"alpha": a, "beta": b, "gamma": g, "delta": d,
              "theta_idx": theta_idx},
    )


def _ring_lines(n: int) -> list[tuple[int, int]]:
    return [(i, (i + 1) % n) for i in range(n)]


def _chain_lines(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def build_power(n_gen: int = 10, topology: str | Sequence[tuple[int, int]] = "ring",
                theta_bar: float = POWER_THETA_BAR) -> Benchmark:
    """Multi-machine swing benchmark with star communication.

    topology names a bundled line set ("ring" or "chain") or lists
    (i, j) generator pairs directly; the graph must be connected.
    """
    if n_gen < 2:
        raise ValidationError("need at least two generators")
    if topology == "ring":
        lines = _ring_lines(n_gen)
    elif topology == "chain":
        lines = _chain_lines(n_gen)
    else:
        lines = [(int(i), int(j)) for i, j in topology]
    # deterministic bundled parameters
    m = 0.8 + 0.2 * (np.arange(n_gen) % 3)
    dmp = 0.5 + 0.1 * (np.arange(n_gen) % 4)
    bvals = [1.0 + 0.5 * (k % 2) for k in range(len(lines))]
    L = np.zeros((n_gen, n_gen))
    for (i, j), bij in zip(lines, bvals):
        if not (0 <= i < n_gen and 0 <= j < n_gen and i != j):
            raise ValidationError(f"bad line ({i}, {j})")
        L[i, i] += bij
        L[j, j] += bij
        L[i, j] -= bij
        L[j, i] -= bij
    # connectivity: second-smallest Laplacian eigenvalue positive
    if np.sort(np.linalg.eigvalsh(L))[1] <= 1e-9:
        raise ValidationError("line topology is disconnected")
    n_s = 2 * n_gen
    Minv = np.diag(1.0 / m)
    A = np.block([[np.zeros((n_gen, n_gen)), np.eye(n_gen)],
                  [-Minv @ L, -np.diag(dmp / m)]])
    B = np.vstack([np.zeros((n_gen, n_gen)), Minv])
    blocks = []
    for (i, j), bij in zip(lines, bvals):
        iv = np.zeros(n_s)
        iv[i] = 1.0
        iv[j] = -1.0
        ov = np.zeros(n_s)
        ov[n_gen + i] = bij / m[i]
        ov[n_gen + j] = -bij / m[j]
        blocks.append(NonlinearBlock("id_minus_sin", iv, ov, domain=theta_bar))
    obs = np.zeros((n_gen, n_s), dtype=bool)
    obs[0, :] = True                      # hub sees everything
    for i in range(1, n_gen):
        obs[i, [i, n_gen + i, 0, n_gen]] = True
    return Benchmark(
        name=f"power_swing{n_gen}",
        plant=LtiSystem(A, B),
        blocks=tuple(blocks),
        Q=np.eye(n_s),
        R=0.1 * np.eye(n_gen),
        obs_mask=obs,
        meta={"inertia": m.tolist(), "damping": dmp.tolist(),
              "lines": lines, "susceptance": bvals, "theta_bar": theta_bar},
    )


_PRESETS = {
    "flight4": lambda: build_flight(4),
    "power_swing": lambda: build_power(10, "ring"),
}


def preset(name: str) -> Benchmark:
    """Named benchmark presets: flight4, power_swing."""
    try:
        factory = _PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; have {sorted(_PRESETS)}") from None
    return factory()
