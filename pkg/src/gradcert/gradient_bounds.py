"""Quadratic constraints on controllers with entrywise-bounded partial derivatives.

The uncertainty description for a controller ``pi : R^n_s -> R^n_a`` is a box
of per-entry slope bounds

    lo[i, j] <= d pi_i / d y_j <= hi[i, j]        for all y,

held by :class:`GradientBoundSet`.  Any such function decomposes, between two
points, into per-entry sector components ``q_ij = delta_ij * (x_j - y_j)`` with
``delta_ij`` inside the bound box, and the output difference is recovered by
the fixed selection matrix ``W = I_{n_a} (x) 1_{1 x n_s}``:

    pi(x) - pi(y) = W q.

Multiplying each per-entry sector inequality

    (cb_ij^2 - c_ij^2) dx_j^2 + 2 c_ij q_ij dx_j - q_ij^2 >= 0,
    c  = (lo + hi) / 2,   cb = hi - c,

by a nonnegative multiplier ``lam_ij`` and summing yields one quadratic form
in the stacked vector ``[dx; q]``; :func:`build_M` assembles its symmetric
matrix.  The off-diagonal coupling carries ``+lam_ij c_ij`` so that the matrix
form expands identically to the scalar sum above (this is the sign forced by
the dissipation argument; see the project notes on the sign of the printed
block form).

``q`` is ordered row-major by output: entry (i, j) sits at position
``i * n_s + j`` of ``q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

Array = np.ndarray

POINTWISE_TOL = 1e-10


def _frozen_array(a, shape=None) -> Array:
    out = np.array(a, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValidationError(f"expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValidationError("non-finite entries")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GradientBoundSet:
    """Entrywise bounds on the partial derivatives of an (n_a, n_s) map.

    A zero row/column pair (both bounds exactly zero) encodes structural
    sparsity: output i never reads input j, and the corresponding sector
    component is dropped from the reduced quadratic form.
    """

    xi_lower: Array
    xi_upper: Array

    def __post_init__(self):
        lo = _frozen_array(self.xi_lower)
        if lo.ndim != 2:
            raise ValidationError("bounds must be 2-d (n_a, n_s)")
        hi = _frozen_array(self.xi_upper, shape=lo.shape)
        if np.any(lo > hi):
            raise ValidationError("xi_lower must be <= xi_upper elementwise")
        object.__setattr__(self, "xi_lower", lo)
        object.__setattr__(self, "xi_upper", hi)

    @property
    def n_a(self) -> int:
        return self.xi_lower.shape[0]

    @property
    def n_s(self) -> int:
        return self.xi_lower.shape[1]

    @property
    def c(self) -> Array:
        """Interval midpoints c_ij."""
        return 0.5 * (self.xi_lower + self.xi_upper)

    @property
    def c_bar(self) -> Array:
        """Interval radii cb_ij >= 0."""
        return self.xi_upper - self.c

    @property
    def active_mask(self) -> Array:
        """False where both bounds are exactly zero (structural sparsity)."""
        return ~((self.xi_lower == 0.0) & (self.xi_upper == 0.0))

    def active_entries(self) -> list[tuple[int, int]]:
        """(i, j) pairs kept in the reduced q-space, row-major order."""
        mask = self.active_mask
        return [(i, j) for i in range(self.n_a) for j in range(self.n_s) if mask[i, j]]

    def contains_jacobian(self, jac: Array, tol: float = 0.0) -> bool:
        return bool(np.all(jac >= self.xi_lower - tol) and np.all(jac <= self.xi_upper + tol))

    @staticmethod
    def uniform(l: float, n_a: int, n_s: int) -> "GradientBoundSet":
        """Symmetric box [-l, l] on every entry."""
        if l < 0:
            raise ValidationError("uniform level must be >= 0")
        full = np.full((n_a, n_s), float(l))
        return GradientBoundSet(-full, full)

    @staticmethod
    def masked(l: float, mask: Array) -> "GradientBoundSet":
        """[-l, l] where mask is true, [0, 0] elsewhere."""
        m = np.asarray(mask, dtype=bool)
        full = np.where(m, float(l), 0.0)
        return GradientBoundSet(-full, full)

    @staticmethod
    def one_sided(l: float, mask: Array, sign_pattern: Array, eps: float = 0.1) -> "GradientBoundSet":
        """One-sided boxes per the observed-sign rule with exploration margin eps.

        sign_pattern entries: +1 -> [-eps*l, l]; -1 -> [-l, eps*l]; 0 -> [-l, l].
        Entries outside mask get [0, 0].
        """
        if not 0 < eps < 1:
            raise ValidationError("eps must lie in (0, 1)")
        m = np.asarray(mask, dtype=bool)
        s = np.asarray(sign_pattern, dtype=float)
        if s.shape != m.shape:
            raise ValidationError("sign pattern and mask shapes differ")
        lo = np.where(s > 0, -eps * l, -float(l))
        hi = np.where(s < 0, eps * l, float(l))
        return GradientBoundSet(np.where(m, lo, 0.0), np.where(m, hi, 0.0))


@dataclass(frozen=True)
class MultiplierSet:
    """Nonnegative S-procedure multipliers lam_ij, one per bound-box entry."""

    lam: Array

    def __post_init__(self):
        lam = _frozen_array(self.lam)
        if lam.ndim != 2:
            raise ValidationError("multipliers must be 2-d (n_a, n_s)")
        if np.any(lam < 0):
            raise ValidationError("multipliers must be nonnegative")
        object.__setattr__(self, "lam", lam)

    @staticmethod
    def from_reduced(values: Array, idxs: Sequence[tuple[int, int]],
                     n_a: int, n_s: int) -> "MultiplierSet":
        lam = np.zeros((n_a, n_s))
        for v, (i, j) in zip(values, idxs):
            lam[i, j] = max(0.0, float(v))
        return MultiplierSet(lam)


@dataclass(frozen=True)
class QuadConstraint:
    """Symmetric matrix M and selection matrix W of the stacked constraint."""

    M: Array
    W: Array
    n_s: int
    n_a: int


def selection_matrix(n_a: int, n_s: int) -> Array:
    """W = I_{n_a} (x) 1_{1 x n_s}, mapping stacked q to output differences."""
    return np.kron(np.eye(n_a), np.ones((1, n_s)))


def build_M(bounds: GradientBoundSet, mult: MultiplierSet) -> QuadConstraint:
    """Assemble the full quadratic-constraint matrix M(lam; xi).

    The returned M has block structure
    [[diag_j(sum_i lam_ij (cb_ij^2 - c_ij^2)),  cross],
     [cross^T,                                  diag(-lam_ij)]]
    with cross[j, i*n_s + j] = lam_ij * c_ij, and satisfies

        [dx; q]^T M [dx; q]
            = sum_ij lam_ij ((cb^2 - c^2) dx_j^2 + 2 c q_ij dx_j - q_ij^2).
    """
    lam = mult.lam
    if lam.shape != (bounds.n_a, bounds.n_s):
        raise ValidationError("multiplier shape does not match bounds")
    m, n = bounds.n_a, bounds.n_s
    c, cb = bounds.c, bounds.c_bar
    dim = n + m * n
    M = np.zeros((dim, dim))
    M[:n, :n] = np.diag(np.sum(lam * (cb**2 - c**2), axis=0))
    for i in range(m):
        for j in range(n):
            p = n + i * n + j
            M[p, p] = -lam[i, j]
            M[j, p] = M[p, j] = lam[i, j] * c[i, j]
    return QuadConstraint(M=M, W=selection_matrix(m, n), n_s=n, n_a=m)


def hybrid_differences(f: Callable[[Array], Array], x: Array, y: Array) -> Array:
    """Per-entry sector components q_ij between x and y via hybrid vectors.

    Walking the hybrid chain h_j = [y_1..y_j, x_{j+1}..x_n] from h_0 = x to
    h_n = y, q[i, j] = f_i(h_{j-1}) - f_i(h_j).  Rows telescope:
    sum_j q[i, j] = f_i(x) - f_i(y) exactly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    h = x.copy()
    prev = np.atleast_1d(np.asarray(f(h), dtype=float))
    q = np.zeros((prev.shape[0], n))
    for j in range(n):
        h[j] = y[j]
        cur = np.atleast_1d(np.asarray(f(h), dtype=float))
        q[:, j] = prev - cur
        prev = cur
    return q


def decompose_sector(pi: Callable[[Array], Array], bounds: GradientBoundSet,
                     y: Array) -> Array:
    """Constructive decomposition of pi(y) - pi(0) into sector components.

    Returns q of shape (n_a, n_s) with sum_j q[i, j] = pi_i(y) - pi_i(0)
    exactly, q[i, j] / y_j inside the bound box whenever the bounds hold for
    pi, and q[i, j] = 0 whenever y_j = 0.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (bounds.n_s,):
        raise ValidationError("base point dimension does not match bounds")
    return hybrid_differences(pi, y, np.zeros_like(y))


def _per_entry_slack(bounds: GradientBoundSet, dx: Array, q: Array) -> Array:
    c, cb = bounds.c, bounds.c_bar
    return (cb**2 - c**2) * dx[None, :] ** 2 + 2.0 * c * q * dx[None, :] - q**2


def check_pointwise(bounds: GradientBoundSet, f: Callable[[Array], Array],
                    x: Array, y: Array, tol: float = POINTWISE_TOL) -> bool:
    """Sampled verifier of the per-entry sector inequalities between x and y.

    q is reconstructed from hybrid-vector differences of f, then each entry
    must satisfy (cb^2 - c^2) dx_j^2 + 2 c q dx_j - q^2 >= -tol.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    q = hybrid_differences(f, x, y)
    if q.shape != (bounds.n_a, bounds.n_s):
        raise ValidationError("function output dimension does not match bounds")
    return bool(np.min(_per_entry_slack(bounds, x - y, q)) >= -tol)


def membership_S(bounds: GradientBoundSet, x: Array, q: Array,
                 tol: float = POINTWISE_TOL) -> bool:
    """Whether the pair (x, q) satisfies every phi_ij(x, q) >= -tol.

    phi_ij(x, q) = (cb^2 - c^2) x_j^2 + 2 c q_ij x_j - q_ij^2; q may be given
    as an (n_a, n_s) matrix or the stacked row-major vector.
    """
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q.reshape(bounds.n_a, bounds.n_s)
    return bool(np.min(_per_entry_slack(bounds, x, q)) >= -tol)


_BOUNDS_CONFIG_KEYS = {"xi_lower", "xi_upper", "lipschitz", "sparsity", "one_sided", "eps"}


def bounds_from_config(cfg: dict, n_a: int | None = None, n_s: int | None = None) -> GradientBoundSet:
    """Build bounds from a config dict (dense matrices or pattern form).

    Dense form: {"xi_lower": [[...]], "xi_upper": [[...]]}.
    Pattern form: {"lipschitz": l, "sparsity": mask?, "one_sided":
    [{"i":, "j":, "sign": "+"|"-", "margin": eps}]?}.  Unknown keys are
    rejected.
    """
    unknown = set(cfg) - _BOUNDS_CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown bounds config keys: {sorted(unknown)}")
    if "xi_lower" in cfg or "xi_upper" in cfg:
        if not ("xi_lower" in cfg and "xi_upper" in cfg):
            raise ValidationError("dense bounds need both xi_lower and xi_upper")
        return GradientBoundSet(np.array(cfg["xi_lower"], dtype=float),
                                np.array(cfg["xi_upper"], dtype=float))
    if "lipschitz" not in cfg:
        raise ValidationError("bounds config needs dense matrices or a lipschitz level")
    l = float(cfg["lipschitz"])
    if "sparsity" in cfg:
        mask = np.array(cfg["sparsity"], dtype=bool)
        if n_a is not None and mask.shape != (n_a, n_s):
            raise ValidationError("sparsity mask has wrong shape")
    else:
        if n_a is None or n_s is None:
            raise ValidationError("pattern bounds without sparsity need explicit dimensions")
        mask = np.ones((n_a, n_s), dtype=bool)
    lo = np.where(mask, -l, 0.0)
    hi = np.where(mask, l, 0.0)
    for entry in cfg.get("one_sided", []):
        extra = set(entry) - {"i", "j", "sign", "margin"}
        if extra:
            raise ValidationError(f"unknown one_sided keys: {sorted(extra)}")
        i, j = int(entry["i"]), int(entry["j"])
        eps = float(entry.get("margin", cfg.get("eps", 0.1)))
        if entry["sign"] == "+":
            lo[i, j] = -eps * l
        elif entry["sign"] == "-":
            hi[i, j] = eps * l
        else:
            raise ValidationError('one_sided sign must be "+" or "-"')
    return GradientBoundSet(lo, hi)
