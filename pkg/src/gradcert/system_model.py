"""LTI plants, scalar nonlinear residual channels, and the augmented loop.

A plant is

    x' = A x + B u + sum_ch  out_ch * phi_ch(in_ch . x),
    y  = C x,

with A Hurwitz required at certification entry points.  Residual channels are
stored symbolically by tag so their slope sectors come out exact:

    sin_minus_id : phi(z) = scale * (sin z - z),  slope in [cos(d) - 1, 0]
    id_minus_sin : phi(z) = scale * (z - sin z),  slope in [0, 1 - cos(d)]

on the validity box |z| <= d (d <= pi).  augment() wires a plant together with
a stable IQC filter on the residual channels into the block matrices used by
the nonlinear feasibility problem: with x_bar = [x; psi],

    x_bar' = [[A, 0], [B_psi_y S, A_psi]] x_bar + [B; 0] e + [B W; 0] q
             + [E; B_psi_v] v,
    z      = [D_psi_y S, C_psi] x_bar + D_psi_v v,

where S selects channel arguments from the state, E embeds channel outputs
into the state equation, and v stacks the channel outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import CertificationError, ValidationError
from .gradient_bounds import selection_matrix

Array = np.ndarray

HURWITZ_EPS = 1e-9


def _matrix(a, name: str) -> Array:
    out = np.array(a, dtype=float)
    if out.ndim != 2:
        raise ValidationError(f"{name} must be a matrix")
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{name} has non-finite entries")
    out.setflags(write=False)
    return out


def is_hurwitz(A: Array, eps: float = HURWITZ_EPS) -> bool:
    """True iff every eigenvalue real part is below -eps."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError("is_hurwitz needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValidationError("non-finite entries")
    return bool(np.max(np.linalg.eigvals(A).real) < -eps)


@dataclass(frozen=True)
class LtiSystem:
    """State-space plant (A, B, C); C defaults to identity (y = x)."""

    A: Array
    B: Array
    C: Array | None = None

    def __post_init__(self):
        A = _matrix(self.A, "A")
        if A.shape[0] != A.shape[1]:
            raise ValidationError("A must be square")
        B = _matrix(self.B, "B")
        if B.shape[0] != A.shape[0]:
            raise ValidationError("B row count must match A")
        C = np.eye(A.shape[0]) if self.C is None else _matrix(self.C, "C")
        if C.shape[1] != A.shape[0]:
            raise ValidationError("C column count must match A")
        C.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n_s(self) -> int:
        return self.A.shape[0]

    @property
    def n_a(self) -> int:
        return self.B.shape[1]

    @property
    def n_o(self) -> int:
        return self.C.shape[0]

    def closed_with(self, K: Array) -> "LtiSystem":
        """Plant with state feedback folded in: A <- A + B K."""
        K = np.asarray(K, dtype=float)
        return LtiSystem(self.A + self.B @ K, self.B, self.C)


_PHI_TAGS = ("sin_minus_id", "id_minus_sin")


@dataclass(frozen=True)
class NonlinearBlock:
    """One scalar residual channel phi(in_vec . x) * out_vec, tagged by kind."""

    kind: str
    in_vec: Array
    out_vec: Array
    domain: float
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in _PHI_TAGS:
            raise ValidationError(f"unknown nonlinearity kind {self.kind!r}")
        iv = np.array(self.in_vec, dtype=float).ravel()
        ov = np.array(self.out_vec, dtype=float).ravel()
        if iv.shape != ov.shape:
            raise ValidationError("in_vec and out_vec must share the state dimension")
        if not 0 < self.domain <= np.pi:
            raise ValidationError("domain half-width must lie in (0, pi]")
        iv.setflags(write=False)
        ov.setflags(write=False)
        object.__setattr__(self, "in_vec", iv)
        object.__setattr__(self, "out_vec", ov)

    @property
    def slope_sector(self) -> tuple[float, float]:
        """Exact slope interval of scale * phi on the validity box."""
        lo_hi = (np.cos(self.domain) - 1.0, 0.0) if self.kind == "sin_minus_id" \
            else (0.0, 1.0 - np.cos(self.domain))
        lo, hi = (self.scale * lo_hi[0], self.scale * lo_hi[1])
        return (min(lo, hi), max(lo, hi))

    def phi(self, z):
        base = np.sin(z) - z if self.kind == "sin_minus_id" else z - np.sin(z)
        return self.scale * base

    def argument(self, x: Array) -> float:
        return float(self.in_vec @ x)

    def evaluate(self, x: Array) -> Array:
        """Residual contribution to x' at state x."""
        return self.out_vec * self.phi(self.argument(x))


def channel_maps(blocks: Sequence[NonlinearBlock], n_s: int) -> tuple[Array, Array]:
    """Selector S (n_ch, n_s) and embedding E (n_s, n_ch) for a channel list."""
    n_ch = len(blocks)
    S = np.zeros((n_ch, n_s))
    E = np.zeros((n_s, n_ch))
    for c, blk in enumerate(blocks):
        if blk.in_vec.shape[0] != n_s:
            raise ValidationError("nonlinear block dimension does not match plant")
        S[c] = blk.in_vec
        E[:, c] = blk.out_vec
    return S, E


@dataclass(frozen=True)
class AugmentedSystem:
    """Block matrices of the plant + IQC-filter interconnection."""

    A_bar: Array
    B_bar_e: Array
    B_bar_q: Array
    B_bar_v: Array
    C_bar: Array
    D_psi_v: Array
    n_s: int
    n_psi: int
    n_a: int
    n_v: int
    m_pieces: tuple = field(default_factory=tuple)

    @property
    def n_x(self) -> int:
        return self.n_s + self.n_psi


def augment(plant: LtiSystem, filt, W: Array | None = None) -> AugmentedSystem:
    """Combine a plant with a stable IQC filter into the augmented blocks.

    filt is an IqcBlock; its selector S / embedding E default to identity,
    in which case the filter inputs must match the plant state dimension.
    W defaults to the Kronecker selection matrix of the gradient-bound
    machinery.
    """
    n_s, n_a = plant.n_s, plant.n_a
    if filt.selector is not None:
        S = filt.selector
    elif filt.n_in_y in (n_s, 0):
        S = np.eye(n_s)[:filt.n_in_y]
    else:
        raise ValidationError("filter input dimension needs an explicit selector")
    if filt.embedding is not None:
        E = filt.embedding
    elif filt.n_in_v in (n_s, 0):
        E = np.eye(n_s)[:, :filt.n_in_v] if filt.n_in_v else np.zeros((n_s, 0))
    else:
        raise ValidationError("filter output dimension needs an explicit embedding")
    if S.shape != (filt.n_in_y, n_s):
        raise ValidationError("filter selector does not match plant state dimension")
    if E.shape != (n_s, filt.n_in_v):
        raise ValidationError("filter embedding does not match plant state dimension")
    if W is None:
        W = selection_matrix(n_a, n_s)
    if W.shape != (n_a, n_a * n_s):
        raise ValidationError("selection matrix W has wrong shape")
    n_psi = filt.n_psi
    A_bar = np.zeros((n_s + n_psi, n_s + n_psi))
    A_bar[:n_s, :n_s] = plant.A
    A_bar[n_s:, :n_s] = filt.b_psi_y @ S
    A_bar[n_s:, n_s:] = filt.a_psi
    B_bar_e = np.vstack([plant.B, np.zeros((n_psi, n_a))])
    B_bar_q = np.vstack([plant.B @ W, np.zeros((n_psi, W.shape[1]))])
    B_bar_v = np.vstack([E, filt.b_psi_v])
    C_bar = np.hstack([filt.d_psi_y @ S, filt.c_psi])
    return AugmentedSystem(
        A_bar=A_bar, B_bar_e=B_bar_e, B_bar_q=B_bar_q, B_bar_v=B_bar_v,
        C_bar=C_bar, D_psi_v=filt.d_psi_v,
        n_s=n_s, n_psi=n_psi, n_a=n_a, n_v=filt.n_in_v,
        m_pieces=tuple(filt.m_pieces),
    )


def nominal_controller(plant: LtiSystem, method: str = "lqr",
                       Q: Array | None = None, R: Array | None = None,
                       K: Array | None = None) -> Array:
    """Stabilizing gain K_n with A + B K_n Hurwitz.

    method="lqr" solves the continuous algebraic Riccati equation with
    defaults Q = 1000 I, R = I; method="given" validates a supplied gain.
    """
    if method == "given":
        if K is None:
            raise ValidationError('method="given" needs a gain matrix')
        K = np.asarray(K, dtype=float)
        if not is_hurwitz(plant.A + plant.B @ K):
            raise CertificationError("supplied nominal gain does not stabilize the plant")
        return K
    if method != "lqr":
        raise ValidationError(f"unknown nominal controller method {method!r}")
    Q = 1000.0 * np.eye(plant.n_s) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(plant.n_a) if R is None else np.asarray(R, dtype=float)
    try:
        P = sla.solve_continuous_are(plant.A, plant.B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise CertificationError(f"Riccati solve failed (unstabilizable pair?): {exc}") from exc
    Kn = -np.linalg.solve(R, plant.B.T @ P)
    if not is_hurwitz(plant.A + plant.B @ Kn):
        raise CertificationError("LQR design did not produce a Hurwitz closed loop")
    return Kn


_PLANT_KEYS = {"A", "B", "C", "nonlinear_blocks"}
_BLOCK_KEYS = {"kind", "channels", "domain", "scale"}


def plant_from_config(cfg: dict) -> tuple[LtiSystem, list[NonlinearBlock]]:
    """Plant plus residual channels from a JSON-style dict (fail-closed)."""
    unknown = set(cfg) - _PLANT_KEYS
    if unknown:
        raise ValidationError(f"unknown plant config keys: {sorted(unknown)}")
    if "A" not in cfg or "B" not in cfg:
        raise ValidationError("plant config needs A and B")
    plant = LtiSystem(np.array(cfg["A"], dtype=float), np.array(cfg["B"], dtype=float),
                      None if "C" not in cfg else np.array(cfg["C"], dtype=float))
    blocks: list[NonlinearBlock] = []
    for entry in cfg.get("nonlinear_blocks", []):
        extra = set(entry) - _BLOCK_KEYS
        if extra:
            raise ValidationError(f"unknown nonlinear block keys: {sorted(extra)}")
        for ch in entry["channels"]:
            bad = set(ch) - {"input", "output"}
            if bad:
                raise ValidationError(f"unknown channel keys: {sorted(bad)}")
            blocks.append(NonlinearBlock(
                kind=entry["kind"],
                in_vec=np.array(ch["input"], dtype=float),
                out_vec=np.array(ch["output"], dtype=float),
                domain=float(entry["domain"]),
                scale=float(entry.get("scale", 1.0)),
            ))
    return plant, blocks


def load_plant(path) -> tuple[LtiSystem, list[NonlinearBlock]]:
    with open(path) as fh:
        return plant_from_config(json.load(fh))
