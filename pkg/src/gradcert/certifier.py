"""LMI feasibility problems certifying L2 gain against gradient-bounded controllers.

For a Hurwitz plant x' = A x + B(pi(x) + e) and bounds xi on the controller
partials, the linear case tests, in decision variables (P >= 0, lam >= 0),

    [[O(P, lam, xi), S(P)], [S(P)^T, -gamma I]]  <  0,
    O = [[A^T P + P A, P B W], [W^T B^T P, 0]] + (1/gamma) diag(I, 0)
        + M(lam; xi),
    S = [P B; 0],

whose feasibility makes V(x) = x^T P x a storage function for the dissipation
inequality and certifies int |y|^2 <= gamma^2 int |e|^2 from rest.  The
nonlinear case augments the plant with a stable IQC filter on the residual
channels and tests the 3x3 block form with rows (x_bar q | v | e); the
gradient-bound matrix and the 1/gamma output weight touch only the plant
states inside x_bar, and the filter middle matrix enters as a nonnegative
combination of its pieces (scalings jointly optimized with lam).

Entries whose bounds are exactly [0, 0] force their sector component q_ij to
zero, so those coordinates (and their multipliers) are eliminated from the
problem before it reaches the solver; the frequency-domain cross-check
applies the same reduction.

Feasibility verdicts: a first-order solve (SCS) is accepted only when its
witness re-validates by direct eigenvalue checks; anything else escalates to
an interior-point solve (CLARABEL), whose certificate-backed statuses decide
feasible/infeasible.  Remaining failures surface as the first-class
"numerical_failure" verdict, never as "infeasible".
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import cvxpy as cp
import numpy as np

from .errors import CertificationError, ValidationError
from .gradient_bounds import GradientBoundSet, MultiplierSet, selection_matrix
from .iqc_blocks import IqcBlock
from .system_model import AugmentedSystem, LtiSystem, augment, is_hurwitz

Array = np.ndarray

EPS_FEAS = 1e-8          # witness re-validation margin on the assembled LMI
EPS_MARGIN = 1e-6        # strict-inequality shift handed to the solver
GAMMA_HI_DEFAULT = 1e4
BISECT_TOL = 0.05
BISECT_CAP = 40


def worker_count(default: int = 1) -> int:
    """Parallelism cap from IQC_CERT_THREADS (default single-threaded)."""
    try:
        return max(1, int(os.environ.get("IQC_CERT_THREADS", default)))
    except ValueError:
        return default


# ---------------------------------------------------------------------------
# assembly (numpy / cvxpy backend switch)
# ---------------------------------------------------------------------------

class _Backend:
    def __init__(self, np_mode: bool):
        self.np_mode = np_mode
        self.bmat = (lambda rows: np.block(rows)) if np_mode else cp.bmat
        self.vstack = np.vstack if np_mode else cp.vstack
        self.diag = np.diag if np_mode else cp.diag
        self.mul = (lambda a, b: a * b) if np_mode else cp.multiply


def _reduced_data(bounds: GradientBoundSet):
    idxs = bounds.active_entries()
    n, m = bounds.n_s, bounds.n_a
    nq = len(idxs)
    Wfull = selection_matrix(m, n)
    Wred = Wfull[:, [i * n + j for (i, j) in idxs]] if nq else np.zeros((m, 0))
    c, cb = bounds.c, bounds.c_bar
    cb2c2 = np.array([cb[i, j] ** 2 - c[i, j] ** 2 for (i, j) in idxs])
    cv = np.array([c[i, j] for (i, j) in idxs])
    state_of = np.array([j for (_, j) in idxs], dtype=int)
    return idxs, nq, Wred, cb2c2, cv, state_of


def _m_blocks(bk: _Backend, lam, cb2c2, cv, state_of, n_rows: int):
    """Mxx (n_rows diag), Mxq (n_rows x nq), Mqq (nq x nq) with the x part
    living on the first plant states of an n_rows-dimensional x block."""
    nq = len(cb2c2)
    Jsel = np.zeros((nq, n_rows))
    Jsel[np.arange(nq), state_of] = 1.0
    dvec = bk.mul(lam, cb2c2) @ Jsel
    Mxx = bk.diag(dvec)
    Mxq = Jsel.T @ bk.diag(bk.mul(lam, cv))
    Mqq = -bk.diag(lam)
    return Mxx, Mxq, Mqq


def _lti_lmi(plant: LtiSystem, bounds: GradientBoundSet, gamma: float,
             P, lam, np_mode: bool):
    bk = _Backend(np_mode)
    A, B = plant.A, plant.B
    n, m = plant.n_s, plant.n_a
    idxs, nq, Wred, cb2c2, cv, state_of = _reduced_data(bounds)
    gam_term = (1.0 / gamma) * np.eye(n)
    if nq:
        Mxx, Mxq, Mqq = _m_blocks(bk, lam, cb2c2, cv, state_of, n)
        O11 = A.T @ P + P @ A + gam_term + Mxx
        O12 = P @ (B @ Wred) + Mxq
        O = bk.bmat([[O11, O12], [O12.T, Mqq]])
    else:
        O = A.T @ P + P @ A + gam_term
    S = bk.vstack([P @ B, np.zeros((nq, m))]) if nq else P @ B
    return bk.bmat([[O, S], [S.T, -gamma * np.eye(m)]])


def _nl_lmi(aug: AugmentedSystem, bounds: GradientBoundSet, gamma: float,
            P, lam, tau, np_mode: bool):
    bk = _Backend(np_mode)
    n, n_psi, m, nv = aug.n_s, aug.n_psi, aug.n_a, aug.n_v
    nx = aug.n_x
    B = aug.B_bar_e[:n, :]
    idxs, nq, Wred, cb2c2, cv, state_of = _reduced_data(bounds)
    pieces = aug.m_pieces
    Mg = sum(tau[k] * pieces[k] for k in range(len(pieces))) if len(pieces) else None
    Iy = np.zeros((nx, nx))
    Iy[:n, :n] = np.eye(n)
    core = aug.A_bar.T @ P + P @ aug.A_bar + (1.0 / gamma) * Iy
    if Mg is not None:
        core = core + aug.C_bar.T @ Mg @ aug.C_bar
    if nq:
        Mxx, Mxq, Mqq = _m_blocks(bk, lam, cb2c2, cv, state_of, nx)
        Bq = np.vstack([np.asarray(B), np.zeros((n_psi, m))])  # [B; 0]
        O12 = P @ (Bq @ Wred) + Mxq
        O = bk.bmat([[core + Mxx, O12], [O12.T, Mqq]])
    else:
        O = core
    rows = [[O]]
    if nv:
        Ov_top = aug.C_bar.T @ Mg @ aug.D_psi_v + P @ aug.B_bar_v if Mg is not None \
            else P @ aug.B_bar_v
        Ov = bk.vstack([Ov_top, np.zeros((nq, nv))]) if nq else Ov_top
        Mid = aug.D_psi_v.T @ Mg @ aug.D_psi_v if Mg is not None else np.zeros((nv, nv))
        rows[0].append(Ov)
        rows.append([Ov.T, Mid])
    S = bk.vstack([P @ aug.B_bar_e, np.zeros((nq, m))]) if nq else P @ aug.B_bar_e
    for r, row in enumerate(rows):
        row.append(S if r == 0 else np.zeros((nv, m)))
    last = [S.T] + ([np.zeros((m, nv))] if nv else []) + [-gamma * np.eye(m)]
    rows.append(last)
    return bk.bmat(rows)


@dataclass
class LmiProblem:
    """Affine LMI in (P, lam, tau) at a fixed gamma, plus its numeric twin."""

    problem: cp.Problem
    P: cp.Variable
    lam: cp.Variable | None
    tau: cp.Variable | None
    rebuild: Callable
    bounds: GradientBoundSet
    gamma: float
    dim: int
    idxs: list


def assemble_lti_sdp(plant: LtiSystem, bounds: GradientBoundSet, gamma: float,
                     eps_margin: float = EPS_MARGIN) -> LmiProblem:
    """SDP(P, lam, gamma, xi) for the linear interconnection."""
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    if bounds.xi_lower.shape != (plant.n_a, plant.n_s):
        raise ValidationError("bounds shape does not match plant")
    if not is_hurwitz(plant.A):
        raise CertificationError("plant must be Hurwitz before certification")
    idxs = bounds.active_entries()
    nq = len(idxs)
    P = cp.Variable((plant.n_s, plant.n_s), symmetric=True)
    lam = cp.Variable(nq, nonneg=True) if nq else None
    expr = _lti_lmi(plant, bounds, gamma, P, lam, np_mode=False)
    dim = expr.shape[0]
    prob = cp.Problem(cp.Minimize(0),
                      [expr << -eps_margin * np.eye(dim), P >> 0])

    def rebuild(Pv, lamv, tauv=None):
        return _lti_lmi(plant, bounds, gamma, Pv,
                        lamv if lamv is not None else np.zeros(0), np_mode=True)

    return LmiProblem(prob, P, lam, None, rebuild, bounds, gamma, dim, idxs)


def assemble_nonlinear_sdp(aug: AugmentedSystem, block: IqcBlock | None,
                           bounds: GradientBoundSet, gamma: float,
                           eps_margin: float = EPS_MARGIN,
                           optimize_tau: bool = True) -> LmiProblem:
    """underline-SDP(P, lam, gamma, xi) for the augmented interconnection.

    block is accepted for interface symmetry; the augmented system already
    carries the filter data and middle-matrix pieces.  With optimize_tau the
    piece scalings join (P, lam) as decision variables, otherwise they are
    pinned at one.
    """
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    if bounds.xi_lower.shape != (aug.n_a, aug.n_s):
        raise ValidationError("bounds shape does not match augmented plant")
    if not is_hurwitz(aug.A_bar[:aug.n_s, :aug.n_s]):
        raise CertificationError("plant must be Hurwitz before certification")
    if block is not None and len(block.m_pieces) != len(aug.m_pieces):
        raise ValidationError("block does not match the augmentation")
    idxs = bounds.active_entries()
    nq = len(idxs)
    n_pieces = len(aug.m_pieces)
    P = cp.Variable((aug.n_x, aug.n_x), symmetric=True)
    lam = cp.Variable(nq, nonneg=True) if nq else None
    tau = cp.Variable(n_pieces, nonneg=True) if (optimize_tau and n_pieces) else None
    tau_expr = tau if tau is not None else np.ones(n_pieces)
    expr = _nl_lmi(aug, bounds, gamma, P, lam, tau_expr, np_mode=False)
    dim = expr.shape[0]
    prob = cp.Problem(cp.Minimize(0),
                      [expr << -eps_margin * np.eye(dim), P >> 0])

    def rebuild(Pv, lamv, tauv):
        t = tauv if (tauv is not None and optimize_tau and n_pieces) else np.ones(n_pieces)
        return _nl_lmi(aug, bounds, gamma, Pv,
                       lamv if lamv is not None else np.zeros(0), t, np_mode=True)

    return LmiProblem(prob, P, lam, tau, rebuild, bounds, gamma, dim, idxs)


# ---------------------------------------------------------------------------
# feasibility with witness re-validation
# ---------------------------------------------------------------------------

@dataclass
class FeasibilityResult:
    status: str                     # feasible / infeasible / numerical_failure
    P: Array | None = None
    lam_reduced: Array | None = None
    tau: Array | None = None
    stats: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


_SCS_OPTS = dict(eps=1e-6, max_iters=20000)


def _witness_valid(problem: LmiProblem, Pv, lamv, tauv, eps_valid: float) -> bool:
    M = problem.rebuild(Pv, lamv, tauv)
    return (np.max(np.linalg.eigvalsh(0.5 * (M + M.T))) <= -eps_valid
            and np.min(np.linalg.eigvalsh(0.5 * (Pv + Pv.T))) >= -1e-9)


def feasibility(problem: LmiProblem, eps_valid: float = EPS_FEAS,
                solvers: Sequence[str] = ("SCS", "CLARABEL", "CVXOPT")) -> FeasibilityResult:
    """Solve a feasibility LMI; verdicts are witness-validated.

    A fast first-order pass is accepted only if its witness passes the direct
    eigenvalue checks (max eig of the assembled matrix <= -eps_valid, P PSD up
    to 1e-9); otherwise the interior-point solvers decide, in order.  Solver
    breakdown returns the numerical_failure verdict rather than infeasible.
    """
    stats: dict = {"solve_ms": 0.0, "attempts": []}
    prob = problem.problem
    for solver in solvers:
        opts = _SCS_OPTS if solver == "SCS" else {}
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                # inaccurate first-order passes are expected; re-validation decides
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                prob.solve(solver=solver, **opts)
        except Exception as exc:  # solver runtime faults escalate / fail
            stats["attempts"].append((solver, f"error:{type(exc).__name__}"))
            continue
        finally:
            stats["solve_ms"] += 1000.0 * (time.perf_counter() - t0)
        stats["attempts"].append((solver, prob.status))
        if prob.status in ("optimal", "optimal_inaccurate") and problem.P.value is not None:
            Pv = np.asarray(problem.P.value)
            lamv = np.asarray(problem.lam.value) if problem.lam is not None else None
            tauv = np.asarray(problem.tau.value) if problem.tau is not None else None
            if _witness_valid(problem, Pv, lamv, tauv, eps_valid):
                stats["solver"] = solver
                if prob.solver_stats is not None:
                    stats["iterations"] = prob.solver_stats.num_iters
                return FeasibilityResult("feasible", Pv, lamv, tauv, stats)
            continue  # invalid witness: escalate
        if solver != "SCS" and prob.status in ("infeasible", "infeasible_inaccurate"):
            stats["solver"] = solver
            return FeasibilityResult("infeasible", stats=stats)
    return FeasibilityResult("numerical_failure", stats=stats)


# ---------------------------------------------------------------------------
# certificates, bisection, sweeps
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    """Outcome of a certification run at (or bisected over) gamma."""

    feasible: bool
    status: str
    gamma: float
    bounds: GradientBoundSet
    P: Array | None = None
    lam: MultiplierSet | None = None
    tau: Array | None = None
    solver_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "feasible": self.feasible,
            "status": self.status,
            "gamma": self.gamma,
            "solver_stats": {k: v for k, v in self.solver_stats.items() if k != "attempts"},
        }
        if self.P is not None:
            out["P"] = np.asarray(self.P).tolist()
        if self.lam is not None:
            out["lambda"] = self.lam.lam.tolist()
        if self.tau is not None:
            out["tau"] = np.asarray(self.tau).tolist()
        return out


def _certificate(res: FeasibilityResult, problem: LmiProblem) -> Certificate:
    lam = None
    if res.feasible and problem.lam is not None:
        lam = MultiplierSet.from_reduced(res.lam_reduced, problem.idxs,
                                         problem.bounds.n_a, problem.bounds.n_s)
    elif res.feasible:
        lam = MultiplierSet(np.zeros((problem.bounds.n_a, problem.bounds.n_s)))
    return Certificate(res.feasible, res.status, problem.gamma, problem.bounds,
                       res.P, lam, res.tau, res.stats)


def bisect_gamma(assembler: Callable[[float], LmiProblem],
                 gamma_range: tuple[float, float | None] = (1.0, GAMMA_HI_DEFAULT),
                 tol: float = BISECT_TOL, max_iter: int = BISECT_CAP) -> Certificate:
    """Smallest feasible gamma within multiplicative tol.

    Feasibility is monotone in gamma (both gamma-dependent terms relax), so a
    log-bisection applies.  An open upper end expands by doubling first.  The
    returned certificate carries the best validated witness; infeasibility at
    the upper end yields an infeasible certificate at that gamma.
    """
    lo, hi = gamma_range
    if lo <= 0:
        raise ValidationError("gamma_range must start positive")
    res_lo = feasibility(assembler(lo))
    if res_lo.feasible:
        return _certificate(res_lo, assembler(lo))
    if hi is None:
        hi = 2.0 * lo
        for _ in range(max_iter):
            res_hi = feasibility(assembler(hi))
            if res_hi.feasible:
                break
            hi *= 2.0
        else:
            prob = assembler(hi)
            return _certificate(feasibility(prob), prob)
    else:
        res_hi = feasibility(assembler(hi))
    if not res_hi.feasible:
        prob = assembler(hi)
        return Certificate(False, res_hi.status, hi, prob.bounds,
                           solver_stats=res_hi.stats)
    best, best_gamma = res_hi, hi
    it = 0
    while hi / lo > 1.0 + tol and it < max_iter:
        mid = float(np.sqrt(lo * hi))
        res = feasibility(assembler(mid))
        if res.feasible:
            hi, best, best_gamma = mid, res, mid
        else:
            lo = mid
        it += 1
    return _certificate(best, assembler(best_gamma))


@dataclass(frozen=True)
class CertificationSetup:
    """Everything needed to assemble feasibility problems for one loop.

    plant is the certification-ready (closed with its nominal, Hurwitz)
    system; block the channel IQC stack with selector/embedding attached, or
    None for a purely linear loop; obs_mask the controller sparsity pattern;
    sign_pattern the per-entry gradient signs used by the nonhomogeneous
    mode (+1 / -1 / 0 = keep symmetric).
    """

    plant: LtiSystem
    block: IqcBlock | None = None
    obs_mask: Array | None = None
    sign_pattern: Array | None = None
    eps_margin: float = 0.1

    def __post_init__(self):
        if self.obs_mask is not None:
            m = np.asarray(self.obs_mask, dtype=bool)
            if m.shape != (self.plant.n_a, self.plant.n_s):
                raise ValidationError("observation mask shape mismatch")
            object.__setattr__(self, "obs_mask", m)
        if self.sign_pattern is not None:
            s = np.asarray(self.sign_pattern, dtype=float)
            if s.shape != (self.plant.n_a, self.plant.n_s):
                raise ValidationError("sign pattern shape mismatch")
            object.__setattr__(self, "sign_pattern", s)

    @property
    def augmented(self) -> AugmentedSystem | None:
        if self.block is None:
            return None
        return augment(self.plant, self.block)

    def assembler(self, bounds: GradientBoundSet) -> Callable[[float], LmiProblem]:
        aug = self.augmented
        if aug is None:
            return lambda gamma: assemble_lti_sdp(self.plant, bounds, gamma)
        return lambda gamma: assemble_nonlinear_sdp(aug, self.block, bounds, gamma)


_MODE_ALIASES = {
    "l2": "l2_only", "l2_only": "l2_only",
    "sparsity": "sparsity", "sp": "sparsity",
    "nonhom": "nonhomogeneous", "nonhomogeneous": "nonhomogeneous", "nh": "nonhomogeneous",
}


def bounds_for_mode(setup: CertificationSetup, mode: str, l: float) -> GradientBoundSet:
    """Bound box at Lipschitz level l for a sweep constraint mode."""
    canon = _MODE_ALIASES.get(mode)
    if canon is None:
        raise ValidationError(f"unknown constraint mode {mode!r}")
    n_a, n_s = setup.plant.n_a, setup.plant.n_s
    if canon == "l2_only":
        return GradientBoundSet.uniform(l, n_a, n_s)
    if setup.obs_mask is None:
        raise ValidationError(f"mode {mode!r} needs an observation mask")
    if canon == "sparsity":
        return GradientBoundSet.masked(l, setup.obs_mask)
    if setup.sign_pattern is None:
        raise ValidationError("nonhomogeneous mode needs a sign pattern")
    return GradientBoundSet.one_sided(l, setup.obs_mask, setup.sign_pattern,
                                      eps=setup.eps_margin)


@dataclass
class MarginCurve:
    """Per-level feasibility along an increasing grid of Lipschitz levels."""

    grid: list
    feasible: list
    gamma_at: list          # certified gamma where feasible, None elsewhere
    solve_ms: list
    constraint_mode: str

    def max_certified(self) -> float:
        best = 0.0
        for l, ok in zip(self.grid, self.feasible):
            if ok:
                best = max(best, l)
        return best

    def monotone(self) -> bool:
        """Infeasibility is upward-closed along the grid."""
        seen_infeasible = False
        for ok in self.feasible:
            if not ok:
                seen_infeasible = True
            elif seen_infeasible:
                return False
        return True

    def rows(self):
        for l, ok, g, ms in zip(self.grid, self.feasible, self.gamma_at, self.solve_ms):
            yield {"l": l, "feasible": ok, "gamma": g, "solve_ms": ms}


def sweep_margin(setup: CertificationSetup, mode: str, l_grid: Sequence[float],
                 gamma_hi: float = GAMMA_HI_DEFAULT,
                 gamma_tol: float | None = None,
                 threads: int | None = None) -> MarginCurve:
    """Feasibility (and optionally bisected gamma) at each grid level.

    Levels are solved independently (thread pool capped by IQC_CERT_THREADS)
    and merged by grid index.  gamma_tol=None records gamma_hi as the
    certified bound at feasible levels; a float requests a gamma bisection to
    that multiplicative tolerance.
    """
    grid = [float(l) for l in l_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError("l_grid must be increasing")

    def run_level(l: float):
        t0 = time.perf_counter()
        bounds = bounds_for_mode(setup, mode, l)
        assembler = setup.assembler(bounds)
        if gamma_tol is None:
            res = feasibility(assembler(gamma_hi))
            ok, gamma = res.feasible, (gamma_hi if res.feasible else None)
        else:
            cert = bisect_gamma(assembler, (1.0, gamma_hi), tol=gamma_tol)
            ok, gamma = cert.feasible, (cert.gamma if cert.feasible else None)
        return ok, gamma, 1000.0 * (time.perf_counter() - t0)

    n_workers = worker_count() if threads is None else max(1, threads)
    if n_workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_level, grid))
    else:
        results = [run_level(l) for l in grid]
    return MarginCurve(
        grid=grid,
        feasible=[r[0] for r in results],
        gamma_at=[r[1] for r in results],
        solve_ms=[r[2] for r in results],
        constraint_mode=_MODE_ALIASES[mode],
    )


def max_certified_l(setup: CertificationSetup, mode: str,
                    gamma_hi: float = GAMMA_HI_DEFAULT, lo: float = 0.01,
                    hi: float = 8.0, tol: float = 0.02, cap: float = 256.0) -> float:
    """Largest certified Lipschitz level by expansion plus log-bisection."""

    def feasible_at(l: float) -> bool:
        bounds = bounds_for_mode(setup, mode, l)
        return feasibility(setup.assembler(bounds)(gamma_hi)).feasible

    if not feasible_at(lo):
        return 0.0
    a = lo
    while feasible_at(hi):
        a = hi
        hi *= 2.0
        if hi > cap:
            return hi
    b = hi
    while b - a > tol * a:
        mid = float(np.sqrt(a * b))
        if feasible_at(mid):
            a = mid
        else:
            b = mid
    return a


def certify(plant: LtiSystem, bounds: GradientBoundSet,
            block: IqcBlock | None = None,
            gamma_max: float = GAMMA_HI_DEFAULT, tol: float = BISECT_TOL) -> Certificate:
    """Bisect gamma for one plant / bounds pair (linear or augmented loop)."""
    setup = CertificationSetup(plant=plant, block=block)
    return bisect_gamma(setup.assembler(bounds), (1.0, gamma_max), tol=tol)


# ---------------------------------------------------------------------------
# frequency-domain cross-check
# ---------------------------------------------------------------------------

def default_omega_grid(n_points: int = 200) -> Array:
    return np.logspace(-3.0, 3.0, n_points)


def _freq_form(plant: LtiSystem, bounds: GradientBoundSet, lam_red: Array,
               gamma: float, omega: float) -> Array:
    """Hermitian form in (q, e) at one frequency for the reduced problem."""
    n, m = plant.n_s, plant.n_a
    idxs, nq, Wred, cb2c2, cv, state_of = _reduced_data(bounds)
    resolvent = np.linalg.solve(1j * omega * np.eye(n) - plant.A, plant.B)
    Ge = resolvent
    Gq = resolvent @ Wred if nq else np.zeros((n, 0), dtype=complex)
    Jsel = np.zeros((nq, n))
    if nq:
        Jsel[np.arange(nq), state_of] = 1.0
    Mxx = Jsel.T @ np.diag(lam_red * cb2c2) @ Jsel + (1.0 / gamma) * np.eye(n)
    Mxq = Jsel.T @ np.diag(lam_red * cv)
    Mqq = -np.diag(lam_red)
    T = np.block([[Gq, Ge],
                  [np.eye(nq), np.zeros((nq, m))],
                  [np.zeros((m, nq)), np.eye(m)]])
    Theta = np.block([[Mxx, Mxq, np.zeros((n, m))],
                      [Mxq.T, Mqq, np.zeros((nq, m))],
                      [np.zeros((m, n + nq)), -gamma * np.eye(m)]])
    F = T.conj().T @ Theta @ T
    return 0.5 * (F + F.conj().T)


def freq_domain_check(plant: LtiSystem, bounds: GradientBoundSet,
                      lam: MultiplierSet | Array, gamma: float,
                      omega_grid: Array | None = None,
                      eps_feas: float = EPS_FEAS) -> bool:
    """Sampled frequency-domain counterpart of the linear feasibility test.

    With multipliers lam and gain gamma fixed, checks that the Hermitian form
    in (q, e) is negative definite (max eigenvalue <= -eps_feas) at every
    grid frequency.  A validated time-domain witness always passes; the grid
    serves as an independent oracle for the LMI route.
    """
    omega_grid = default_omega_grid() if omega_grid is None else np.asarray(omega_grid)
    lam_mat = lam.lam if isinstance(lam, MultiplierSet) else np.asarray(lam, dtype=float)
    idxs = bounds.active_entries()
    lam_red = np.array([lam_mat[i, j] for (i, j) in idxs])
    worst = -np.inf
    for omega in omega_grid:
        F = _freq_form(plant, bounds, lam_red, gamma, float(omega))
        worst = max(worst, float(np.max(np.linalg.eigvalsh(F))))
        if worst > -eps_feas:
            return False
    return True


def freq_domain_feasibility(plant: LtiSystem, bounds: GradientBoundSet, gamma: float,
                            omega_grid: Array | None = None,
                            eps_feas: float = EPS_FEAS) -> tuple[bool, Array | None]:
    """Search for grid-frequency multipliers: the independent oracle route.

    Solves min s subject to F_omega(lam) << s I over the grid, lam >= 0,
    using the real symmetric embedding [[Re F, -Im F], [Im F, Re F]] of each
    Hermitian form.  Small per-frequency blocks keep this cheap for
    desk-scale plants.
    """
    omega_grid = default_omega_grid() if omega_grid is None else np.asarray(omega_grid)
    n, m = plant.n_s, plant.n_a
    idxs, nq, Wred, cb2c2, cv, state_of = _reduced_data(bounds)
    lam = cp.Variable(nq, nonneg=True) if nq else None
    s = cp.Variable()
    cons = []
    Jsel = np.zeros((nq, n))
    if nq:
        Jsel[np.arange(nq), state_of] = 1.0
    if nq:
        Mxx = Jsel.T @ cp.diag(cp.multiply(lam, cb2c2)) @ Jsel + (1.0 / gamma) * np.eye(n)
        Mxq = Jsel.T @ cp.diag(cp.multiply(lam, cv))
        Mqq = -cp.diag(lam)
        Theta = cp.bmat([[Mxx, Mxq, np.zeros((n, m))],
                         [Mxq.T, Mqq, np.zeros((nq, m))],
                         [np.zeros((m, n)), np.zeros((m, nq)), -gamma * np.eye(m)]])
    else:
        Theta = cp.bmat([[(1.0 / gamma) * np.eye(n), np.zeros((n, m))],
                         [np.zeros((m, n)), -gamma * np.eye(m)]])
    for omega in omega_grid:
        resolvent = np.linalg.solve(1j * omega * np.eye(n) - plant.A, plant.B)
        Ge, Gq = resolvent, (resolvent @ Wred if nq else np.zeros((n, 0), dtype=complex))
        T = np.block([[Gq, Ge],
                      [np.eye(nq), np.zeros((nq, m))],
                      [np.zeros((m, nq)), np.eye(m)]])
        Tr, Ti = np.real(T), np.imag(T)
        R = Tr.T @ Theta @ Tr + Ti.T @ Theta @ Ti
        Sk = Tr.T @ Theta @ Ti - Ti.T @ Theta @ Tr
        E = cp.bmat([[R, -Sk], [Sk, R]])
        dim = E.shape[0]
        cons.append(E << s * np.eye(dim))
    prob = cp.Problem(cp.Minimize(s), cons)
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            prob.solve(solver="CLARABEL")
    except cp.SolverError:
        return False, None
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return False, None
    ok = s.value is not None and s.value <= -eps_feas
    lam_mat = None
    if nq and lam.value is not None:
        lam_mat = MultiplierSet.from_reduced(lam.value, idxs, bounds.n_a, bounds.n_s).lam
    return bool(ok), lam_mat
