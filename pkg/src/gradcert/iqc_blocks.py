"""Library of IQC characterizations as stable-filter / middle-matrix pairs.

Every block is a stable filter Psi over the channel pair (zeta, w) — the
argument seen by the uncertain operator and its output — together with a
symmetric middle matrix M_g such that the filtered signal z = Psi (zeta, w)
satisfies the hard inequality

    int_0^T z(t)^T M_g z(t) dt  >=  0        for all truncation times T

whenever w(t) = Delta(zeta(t)) for an operator Delta in the characterized
class (filter state started at zero).

Shipped blocks:

* sector_iqc(alpha, beta): static, z = [zeta; w],
  M = [[-2 a b, a + b], [a + b, -2]].  Valid for a zeta <= w <= b zeta.
* l2_gain_iqc(gamma, n, m, lambda0): static, z = [zeta; w],
  M = [[lam g^2 I_n, 0], [0, -lam I_m]].  Valid for ||w|| <= gamma ||zeta||.
* zames_falb_iqc(m_lo, m_hi, pole): one filter state per channel realizing
  the first-order causal multiplier 1 - H(s), H(s) = pole / (s + pole), on
  the loop-shifted slope-restricted nonlinearity:

      z1 = (1 - H)(m_hi zeta - w),    z2 = w - m_lo zeta,
      M  = [[0, 1/2], [1/2, 0]].

  For slope-restricted w = phi(zeta), phi' in [m_lo, m_hi], the shifted pair
  (m_hi zeta - w, w - m_lo zeta) is a monotone nonlinearity with convex
  nonnegative potential, and since the filter kernel is nonnegative with unit
  mass, Jensen's inequality makes the running integral of z1 z2 nonnegative
  at every T, not just in the limit — the factorization is hard.
  pole = inf returns the static sector block unchanged.

M_g is kept as a tuple of additive pieces so the feasibility problems can
scale each piece by its own nonnegative decision variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ValidationError
from .system_model import is_hurwitz

Array = np.ndarray


@dataclass(frozen=True)
class IqcBlock:
    """Stable filter plus symmetric middle matrix, with optional channel maps.

    selector (n_in_y, n_s) and embedding (n_s, n_in_v) bind the abstract
    channel pair to a concrete plant; both default to identity at augment
    time when left as None.
    """

    a_psi: Array
    b_psi_y: Array
    b_psi_v: Array
    c_psi: Array
    d_psi_y: Array
    d_psi_v: Array
    m_pieces: tuple
    selector: Array | None = None
    embedding: Array | None = None

    def __post_init__(self):
        arrs = {}
        for name in ("a_psi", "b_psi_y", "b_psi_v", "c_psi", "d_psi_y", "d_psi_v"):
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 2:
                raise ValidationError(f"{name} must be a matrix")
            a.setflags(write=False)
            arrs[name] = a
        n_psi = arrs["a_psi"].shape[0]
        if arrs["a_psi"].shape != (n_psi, n_psi):
            raise ValidationError("a_psi must be square")
        if n_psi and not is_hurwitz(arrs["a_psi"]):
            raise ValidationError("filter must be stable (a_psi Hurwitz)")
        n_z = arrs["d_psi_y"].shape[0]
        if arrs["c_psi"].shape != (n_z, n_psi) or arrs["d_psi_v"].shape[0] != n_z:
            raise ValidationError("filter output dimensions disagree")
        if arrs["b_psi_y"].shape != (n_psi, arrs["d_psi_y"].shape[1]):
            raise ValidationError("b_psi_y shape mismatch")
        if arrs["b_psi_v"].shape != (n_psi, arrs["d_psi_v"].shape[1]):
            raise ValidationError("b_psi_v shape mismatch")
        pieces = []
        for p in self.m_pieces:
            p = np.array(p, dtype=float)
            if p.shape != (n_z, n_z) or not np.allclose(p, p.T, atol=1e-12):
                raise ValidationError("middle-matrix pieces must be symmetric (n_z, n_z)")
            p.setflags(write=False)
            pieces.append(p)
        for name, a in arrs.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "m_pieces", tuple(pieces))
        for name in ("selector", "embedding"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    @property
    def n_psi(self) -> int:
        return self.a_psi.shape[0]

    @property
    def n_z(self) -> int:
        return self.d_psi_y.shape[0]

    @property
    def n_in_y(self) -> int:
        return self.d_psi_y.shape[1]

    @property
    def n_in_v(self) -> int:
        return self.d_psi_v.shape[1]

    @property
    def M_g(self) -> Array:
        """Middle matrix at unit piece weights."""
        out = np.zeros((self.n_z, self.n_z))
        for p in self.m_pieces:
            out = out + p
        return out

    def with_channels(self, selector: Array, embedding: Array) -> "IqcBlock":
        return replace(self, selector=selector, embedding=embedding)

    def filter_response(self, zeta: Array, w: Array, h: float) -> Array:
        """Filter a sampled channel trajectory; trapezoidal state update.

        zeta, w: arrays (N, n_in_y) / (N, n_in_v).  Returns z (N, n_z) with
        psi(0) = 0.  Used by the hard-IQC sampling checks.
        """
        zeta = np.asarray(zeta, dtype=float)
        w = np.asarray(w, dtype=float)
        if zeta.ndim == 1:
            zeta = zeta[:, None]
        if w.ndim == 1:
            w = w[:, None]
        N = zeta.shape[0]
        psi = np.zeros(self.n_psi)
        z = np.empty((N, self.n_z))
        u_prev = None
        if self.n_psi:
            Ad = sla.expm(self.a_psi * h)
            # trapezoidal hold for the input term
            Aint = np.linalg.solve(self.a_psi, Ad - np.eye(self.n_psi))
        for k in range(N):
            u_k = self.b_psi_y @ zeta[k] + self.b_psi_v @ w[k]
            z[k] = self.c_psi @ psi + self.d_psi_y @ zeta[k] + self.d_psi_v @ w[k]
            if self.n_psi:
                if u_prev is None:
                    u_prev = u_k
                psi = Ad @ psi + Aint @ (0.5 * (u_k + u_prev))
                u_prev = u_k
        return z


def _static(d_psi_y: Array, d_psi_v: Array, pieces: Sequence[Array]) -> IqcBlock:
    n_y, n_v = d_psi_y.shape[1], d_psi_v.shape[1]
    return IqcBlock(
        a_psi=np.zeros((0, 0)),
        b_psi_y=np.zeros((0, n_y)),
        b_psi_v=np.zeros((0, n_v)),
        c_psi=np.zeros((d_psi_y.shape[0], 0)),
        d_psi_y=d_psi_y, d_psi_v=d_psi_v,
        m_pieces=tuple(pieces),
    )


def sector_iqc(alpha: float, beta: float) -> IqcBlock:
    """Static sector block for alpha zeta <= w <= beta zeta."""
    if alpha > beta:
        raise ValidationError("sector needs alpha <= beta")
    M = np.array([[-2.0 * alpha * beta, alpha + beta], [alpha + beta, -2.0]])
    return _static(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]), (M,))


def l2_gain_iqc(gamma: float, n: int, m: int, lambda0: float = 1.0) -> IqcBlock:
    """Static gain block for ||w|| <= gamma ||zeta||, w in R^m, zeta in R^n."""
    if gamma < 0:
        raise ValidationError("gain must be nonnegative")
    if lambda0 <= 0:
        raise ValidationError("multiplier must be positive")
    M = np.zeros((n + m, n + m))
    M[:n, :n] = lambda0 * gamma**2 * np.eye(n)
    M[n:, n:] = -lambda0 * np.eye(m)
    d_y = np.vstack([np.eye(n), np.zeros((m, n))])
    d_v = np.vstack([np.zeros((n, m)), np.eye(m)])
    return _static(d_y, d_v, (M,))


def zames_falb_iqc(m_lo: float, m_hi: float, pole: float = 1.0) -> IqcBlock:
    """First-order causal Zames-Falb block for slope-restricted nonlinearities.

    pole = inf (math.inf) degenerates to the static sector block.
    """
    if m_hi < m_lo:
        raise ValidationError("slope interval needs m_lo <= m_hi")
    if math.isinf(pole):
        return sector_iqc(m_lo, m_hi)
    if not pole > 0:
        raise ValidationError("filter pole must be positive")
    a_psi = np.array([[-pole]])
    b_psi_y = np.array([[pole * m_hi]])
    b_psi_v = np.array([[-pole]])
    c_psi = np.array([[-1.0], [0.0]])
    d_psi_y = np.array([[m_hi], [-m_lo]])
    d_psi_v = np.array([[-1.0], [1.0]])
    M = np.array([[0.0, 0.5], [0.5, 0.0]])
    return IqcBlock(a_psi, b_psi_y, b_psi_v, c_psi, d_psi_y, d_psi_v, (M,))


def combine(blocks: Sequence[IqcBlock], taus: Sequence[float] | None = None,
            share_inputs: bool = False) -> IqcBlock:
    """Conic combination of IQC blocks.

    Stacks filters block-diagonally with M = diag(tau_k M_k).  With
    share_inputs=True all blocks must act on the same channel pair and are
    wired to common inputs (used to pool a sector and a Zames-Falb
    description of one nonlinearity); otherwise channels are concatenated.
    Piece boundaries are preserved so the certifier can rescale each block's
    contribution independently.
    """
    blocks = list(blocks)
    if not blocks:
        raise ValidationError("need at least one block")
    taus = [1.0] * len(blocks) if taus is None else [float(t) for t in taus]
    if len(taus) != len(blocks):
        raise ValidationError("one weight per block required")
    if any(t < 0 for t in taus):
        raise ValidationError("weights must be nonnegative")
    if share_inputs:
        n_y = blocks[0].n_in_y
        n_v = blocks[0].n_in_v
        if any(b.n_in_y != n_y or b.n_in_v != n_v for b in blocks):
            raise ValidationError("share_inputs requires matching channel dimensions")
        if len({(b.selector is None, b.embedding is None) for b in blocks}) != 1:
            raise ValidationError("blocks disagree on channel maps")
    n_psi = sum(b.n_psi for b in blocks)
    n_z = sum(b.n_z for b in blocks)
    n_y = blocks[0].n_in_y if share_inputs else sum(b.n_in_y for b in blocks)
    n_v = blocks[0].n_in_v if share_inputs else sum(b.n_in_v for b in blocks)
    a_psi = np.zeros((n_psi, n_psi))
    b_y = np.zeros((n_psi, n_y))
    b_v = np.zeros((n_psi, n_v))
    c_psi = np.zeros((n_z, n_psi))
    d_y = np.zeros((n_z, n_y))
    d_v = np.zeros((n_z, n_v))
    pieces = []
    r = s = cy = cv = 0
    for tau, blk in zip(taus, blocks):
        a_psi[s:s + blk.n_psi, s:s + blk.n_psi] = blk.a_psi
        c_psi[r:r + blk.n_z, s:s + blk.n_psi] = blk.c_psi
        y0, v0 = (0, 0) if share_inputs else (cy, cv)
        b_y[s:s + blk.n_psi, y0:y0 + blk.n_in_y] = blk.b_psi_y
        b_v[s:s + blk.n_psi, v0:v0 + blk.n_in_v] = blk.b_psi_v
        d_y[r:r + blk.n_z, y0:y0 + blk.n_in_y] = blk.d_psi_y
        d_v[r:r + blk.n_z, v0:v0 + blk.n_in_v] = blk.d_psi_v
        for p in blk.m_pieces:
            big = np.zeros((n_z, n_z))
            big[r:r + blk.n_z, r:r + blk.n_z] = tau * p
            pieces.append(big)
        r += blk.n_z
        s += blk.n_psi
        cy += blk.n_in_y
        cv += blk.n_in_v
    sel = emb = None
    if share_inputs:
        sel, emb = blocks[0].selector, blocks[0].embedding
    elif all(b.selector is not None and b.embedding is not None for b in blocks):
        sel = np.vstack([b.selector for b in blocks])
        emb = np.hstack([b.embedding for b in blocks])
    return IqcBlock(a_psi, b_y, b_v, c_psi, d_y, d_v, tuple(pieces),
                    selector=sel, embedding=emb)


def slope_restricted_stack(blocks, n_s: int, zf_pole: float = 1.0,
                           include_sector: bool = True,
                           include_zf: bool = True) -> IqcBlock:
    """Sector + Zames-Falb description for a list of NonlinearBlock channels.

    Each channel contributes its exact slope sector; the combined block
    carries the plant selector/embedding maps and per-channel, per-kind
    middle-matrix pieces for the certifier to weight.
    """
    from .system_model import channel_maps

    if not blocks:
        raise ValidationError("no channels to describe")
    if not (include_sector or include_zf):
        raise ValidationError("at least one description kind required")
    per_channel = []
    for blk in blocks:
        m_lo, m_hi = blk.slope_sector
        parts = []
        if include_sector:
            parts.append(sector_iqc(m_lo, m_hi))
        if include_zf and not math.isinf(zf_pole):
            parts.append(zames_falb_iqc(m_lo, m_hi, pole=zf_pole))
        per_channel.append(combine(parts, share_inputs=True) if len(parts) > 1 else parts[0])
    stacked = combine(per_channel) if len(per_channel) > 1 else per_channel[0]
    S, E = channel_maps(blocks, n_s)
    return stacked.with_channels(S, E)


_BLOCK_CFG_KEYS = {"kind", "channels", "params"}


def block_from_config(cfg: dict) -> IqcBlock:
    """IQC block from config: {"kind": "sector"|"l2"|"zames_falb", ...}."""
    unknown = set(cfg) - _BLOCK_CFG_KEYS
    if unknown:
        raise ValidationError(f"unknown IQC config keys: {sorted(unknown)}")
    params = dict(cfg.get("params", {}))
    kind = cfg.get("kind")
    if kind == "sector":
        blk = sector_iqc(float(params.pop("alpha")), float(params.pop("beta")))
    elif kind == "l2":
        blk = l2_gain_iqc(float(params.pop("gamma")), int(params.pop("n")),
                          int(params.pop("m")), float(params.pop("lambda0", 1.0)))
    elif kind == "zames_falb":
        pole = params.pop("pole", 1.0)
        pole = math.inf if pole in ("inf", None) else float(pole)
        blk = zames_falb_iqc(float(params.pop("m_lo")), float(params.pop("m_hi")), pole)
    else:
        raise ValidationError(f"unknown IQC kind {kind!r}")
    if params:
        raise ValidationError(f"unknown IQC params: {sorted(params)}")
    if "channels" in cfg:
        ch = cfg["channels"]
        blk = blk.with_channels(np.array(ch["selector"], dtype=float),
                                np.array(ch["embedding"], dtype=float))
    return blk
