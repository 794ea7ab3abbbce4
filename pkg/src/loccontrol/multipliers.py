"""The multiplier cone of the first-order relations and its classification.

A multiplier vector ``lam = (lam1, lam2)`` determines the costate by the
backward adjoint solve; it belongs to the cone when the initial boundary
relation holds, ``lam1 >= 0`` with complementary slackness, and the
reference control maximises the Hamiltonian ``<p(t), phi(t, x(t), u)>`` at
every grid step.  Because ``U`` is open and the reference control is
interior, the maximum condition forces ``H_u = 0``; its discrete form
``p_{k+1} B_k = 0`` is linear in ``lam`` and is imposed together with the
boundary relation before the nonlinear maximum filter is applied.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from ._linalg import nullspace
from .trajectory import Costate, costate_solve, endpoint_jacobians, linearize

__all__ = [
    "MultiplierTuple",
    "ConeDescription",
    "HamiltonianReport",
    "SingularityReport",
    "M1_LIMIT",
    "costate_matrices",
    "boundary_map",
    "stationarity_map",
    "multiplier_subspace",
    "hamiltonian_max_check",
    "lambda_max_set",
    "singularity_check",
    "is_pointed",
]

M1_LIMIT = 8
TOL_CS = 1e-9


@dataclass(frozen=True, eq=False)
class MultiplierTuple:
    lam1: np.ndarray
    lam2: np.ndarray
    costate: Costate
    lam0: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def lam(self):
        return np.concatenate([self.lam1, self.lam2])

    def scaled(self, c, system, process, lin=None):
        return make_tuple(system, process, c * self.lam, lin=lin, lam0=c * self.lam0)


@dataclass
class HamiltonianReport:
    passed: bool
    worst_margin: float  # max_k (max_u H - H(u_k)); <= tol_abs when passed
    witness_t: float
    witness_u: np.ndarray
    margins: np.ndarray
    tol_abs: float


@dataclass
class ConeDescription:
    linear_hull_basis: np.ndarray  # (m, d) orthonormal; candidates live here
    generators: list
    order: int
    is_empty: bool
    is_pointed: bool
    hamiltonian_margins: list
    rejected: int = 0
    notes: list = field(default_factory=list)
    # rays are stored as closures; the origin itself is excluded from the cone
    open_at_origin: bool = True

    def to_dict(self):
        return {
            "generators": [g.lam.tolist() for g in self.generators],
            "costates_t0": [g.costate.p[0].tolist() for g in self.generators],
            "order": self.order,
            "is_empty": self.is_empty,
            "is_pointed": self.is_pointed,
            "hamiltonian_margins": [float(m) for m in self.hamiltonian_margins],
            "linear_hull_dim": int(self.linear_hull_basis.shape[1]),
            "rejected_candidates": self.rejected,
            "notes": list(self.notes),
        }


@dataclass
class SingularityReport:
    singular: bool
    witness: MultiplierTuple | None
    constant_fraction: float
    lam1_zero: bool


# --------------------------------------------------------------------------
# linear relations


def costate_matrices(system, process, lin=None):
    """``P[k]`` (n x m) with ``p_k = P[k] @ lam`` for ``lam = (lam1, lam2)``."""
    lin = lin or linearize(system, process)
    fz, gz = endpoint_jacobians(system, process)
    n = system.n
    Ez2 = np.vstack([fz[:, n:], gz[:, n:]])  # (m, n)
    N = lin.A.shape[0]
    m = Ez2.shape[0]
    P = np.empty((N + 1, n, m))
    P[N] = -Ez2.T
    for k in range(N - 1, -1, -1):
        P[k] = lin.A[k].T @ P[k + 1]
    return P


def boundary_map(system, process, lin=None, P=None):
    """Matrix of ``lam -> p(t0) - (f_z1^T lam1 + g_z1^T lam2)``, shape (n, m)."""
    if P is None:
        P = costate_matrices(system, process, lin)
    fz, gz = endpoint_jacobians(system, process)
    n = system.n
    Ez1 = np.vstack([fz[:, :n], gz[:, :n]])
    return P[0] - Ez1.T


def stationarity_map(system, process, lin=None, P=None):
    """Rows ``B_k^T p_{k+1} / dt`` (the discrete ``H_u``), shape (N r, m)."""
    lin = lin or linearize(system, process)
    if P is None:
        P = costate_matrices(system, process, lin)
    S = np.einsum("kna,knm->kam", lin.B, P[1:]) / process.grid.dt
    return S.reshape(S.shape[0] * S.shape[1], P.shape[-1])


def _complementarity_rows(system, process):
    """Selector rows forcing ``lam1_i = 0`` for inactive inequalities."""
    fval = np.asarray(system.f.value(process.endpoints))
    m = system.m1 + system.m2
    inactive = np.where(fval < -TOL_CS)[0]
    E = np.zeros((len(inactive), m))
    E[np.arange(len(inactive)), inactive] = 1.0
    active = np.where(fval >= -TOL_CS)[0]
    return E, active


def multiplier_subspace(system, process, lin=None, rtol=1e-9):
    """Orthonormal basis of multipliers satisfying all linear relations."""
    lin = lin or linearize(system, process)
    P = costate_matrices(system, process, lin)
    M = boundary_map(system, process, lin, P)
    S = stationarity_map(system, process, lin, P)
    E, _ = _complementarity_rows(system, process)
    return nullspace(np.vstack([M, S, E]), rtol)


# --------------------------------------------------------------------------
# Hamiltonian maximum


def hamiltonian_max_check(system, process, costate, tol=1e-9, points_per_axis=101, refine=8):
    """Check that the reference control maximises ``H`` over the test window.

    ``H(t_k, x_k, u, p_k)`` is evaluated on a lattice of the window at every
    step; the ``refine`` worst steps are polished by a bounded local search.
    Passes iff ``max_u H <= H(u_k) + tol_abs`` at all steps, with ``tol_abs``
    equal to ``tol`` times the magnitude of the Hamiltonian values seen.
    """
    p = costate.p if isinstance(costate, Costate) else np.asarray(costate, dtype=float)
    grid = process.grid
    t = grid.times[:-1]
    X = process.x[:-1]
    P = p[:-1]
    lattice = system.control_set.lattice(points_per_axis)
    h_ref = system.hamiltonian(t, X, process.u, P)
    best = np.empty(grid.N)
    arg = np.empty((grid.N, system.r))
    hmax_abs = float(np.max(np.abs(h_ref), initial=0.0))
    chunk = max(1, 200000 // max(1, len(lattice)))
    for s in range(0, grid.N, chunk):
        sl = slice(s, s + chunk)
        H = system.hamiltonian(t[sl, None], X[sl, None, :], lattice[None, :, :], P[sl, None, :])
        idx = np.argmax(H, axis=1)
        best[sl] = H[np.arange(H.shape[0]), idx]
        arg[sl] = lattice[idx]
        hmax_abs = max(hmax_abs, float(np.max(np.abs(H))))
    margins = best - h_ref
    if refine and np.any(P):
        bounds = [tuple(b) for b in system.control_set.test_window]
        for k in np.argsort(margins)[::-1][:refine]:
            res = minimize(
                lambda uu, k=k: -float(system.hamiltonian(t[k], X[k], uu, P[k])),
                arg[k],
                method="L-BFGS-B",
                bounds=bounds,
            )
            if res.success and -res.fun > best[k]:
                best[k] = -res.fun
                arg[k] = res.x
        margins = best - h_ref
    tol_abs = tol * max(1.0, hmax_abs)
    k = int(np.argmax(margins))
    return HamiltonianReport(
        passed=bool(margins[k] <= tol_abs),
        worst_margin=float(margins[k]),
        witness_t=float(t[k]),
        witness_u=arg[k].copy(),
        margins=margins,
        tol_abs=tol_abs,
    )


# --------------------------------------------------------------------------
# cone assembly


def make_tuple(system, process, lam, lin=None, lam0=0.0, ham=None):
    lam = np.asarray(lam, dtype=float)
    m1 = system.m1
    cost = costate_solve(system, process, lam[:m1], lam[m1:], lin=lin)
    fval = np.asarray(system.f.value(process.endpoints))
    diag = {
        "boundary_residual": float(np.max(np.abs(cost.residual), initial=0.0)),
        "complementarity": float(abs(np.dot(lam[:m1], fval))),
    }
    if ham is not None:
        diag["hamiltonian_margin"] = ham.worst_margin
    return MultiplierTuple(lam[:m1].copy(), lam[m1:].copy(), cost, lam0, diag)


def _normalize_sign(v):
    nz = np.flatnonzero(np.abs(v) > 1e-12 * np.max(np.abs(v)))
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def _candidate_rays(basis, active_rows, tol=1e-10):
    """Extreme rays of ``{B c : (B c)_i >= 0, i in active_rows}`` plus +-lineality.

    Returned as unit vectors in multiplier coordinates; a lineality basis is
    sign normalised (first nonzero entry positive) for deterministic output.
    """
    d = basis.shape[1]
    if d == 0:
        return []
    G = basis[active_rows] if len(active_rows) else np.zeros((0, d))
    lineality = nullspace(G, 1e-9) if G.shape[0] else np.eye(d)
    rays = []
    for j in range(lineality.shape[1]):
        v = _normalize_sign(basis @ lineality[:, j])
        rays.extend([v, -v])
    l = lineality.shape[1]
    if l < d:
        # pointed part in the complement of the lineality space
        comp = nullspace(lineality.T, 1e-9) if l else np.eye(d)
        Gc = G @ comp
        dc = comp.shape[1]
        if dc == 1:
            subsets = [()]
        else:
            subsets = itertools.combinations(range(Gc.shape[0]), dc - 1)
        for sub in subsets:
            rows = Gc[list(sub)] if sub else np.zeros((0, dc))
            ker = nullspace(rows, 1e-9) if rows.shape[0] else np.eye(dc)
            if ker.shape[1] != 1:
                continue
            for sgn in (1.0, -1.0):
                c = sgn * ker[:, 0]
                if np.all(Gc @ c >= -tol):
                    v = basis @ (comp @ c)
                    v /= np.linalg.norm(v)
                    if not any(np.allclose(v, w, atol=1e-9) for w in rays):
                        rays.append(v)
    return rays


def is_pointed(vectors):
    """True iff the cone generated by ``vectors`` contains no line."""
    if len(vectors) == 0:
        return True
    V = np.column_stack(vectors)
    k = V.shape[1]
    A_eq = np.vstack([V, np.ones((1, k))])
    b_eq = np.concatenate([np.zeros(V.shape[0]), [1.0]])
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return res.status != 0


def _lp_line_witness(vectors):
    V = np.column_stack(vectors)
    k = V.shape[1]
    A_eq = np.vstack([V, np.ones((1, k))])
    b_eq = np.concatenate([np.zeros(V.shape[0]), [1.0]])
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    if res.status != 0:
        return None
    j = int(np.argmax(res.x))
    return res.x[j] * V[:, j]


def lambda_max_set(system, process, tol_ham=1e-9, points_per_axis=101, lin=None, rtol=1e-9):
    """Generators, order, emptiness and pointedness of the multiplier cone."""
    if system.m1 > M1_LIMIT:
        raise ValueError(f"at most {M1_LIMIT} inequality constraints are supported (got {system.m1})")
    lin = lin or linearize(system, process)
    basis = multiplier_subspace(system, process, lin, rtol)
    notes = []
    if basis.shape[1] == system.m1 + system.m2 and basis.shape[1] > 0:
        notes.append("all linear relations degenerate: full multiplier space")
    _, active = _complementarity_rows(system, process)
    gens, margins = [], []
    rejected = 0
    for ray in _candidate_rays(basis, active):
        tup = make_tuple(system, process, ray, lin=lin)
        ham = hamiltonian_max_check(system, process, tup.costate, tol_ham, points_per_axis)
        if ham.passed:
            tup.diagnostics["hamiltonian_margin"] = ham.worst_margin
            gens.append(tup)
            margins.append(ham.worst_margin)
        else:
            rejected += 1
    if gens:
        order = int(np.linalg.matrix_rank(np.column_stack([g.lam for g in gens]), tol=1e-8))
    else:
        order = 0
    pointed = is_pointed([g.lam for g in gens])
    return ConeDescription(
        linear_hull_basis=basis,
        generators=gens,
        order=order,
        is_empty=not gens,
        is_pointed=pointed,
        hamiltonian_margins=margins,
        rejected=rejected,
        notes=notes,
    )


def singularity_check(system, process, cone, points_per_axis=21, tol=1e-9, lin=None):
    """Detect a line in the cone (equivalently, a singular process).

    The witness is a nonzero tuple whose negation is also in the cone; the
    report also gives the fraction of grid steps on which its Hamiltonian is
    constant in ``u`` over the test window.
    """
    if cone.is_empty or cone.is_pointed:
        return SingularityReport(False, None, 0.0, False)
    vec = _lp_line_witness([g.lam for g in cone.generators])
    vec = vec / np.linalg.norm(vec)
    tup = make_tuple(system, process, vec, lin=lin)
    grid = process.grid
    lattice = system.control_set.lattice(points_per_axis)
    t = grid.times[:-1]
    H = system.hamiltonian(t[:, None], process.x[:-1, None, :], lattice[None], tup.costate.p[:-1, None, :])
    spread = H.max(axis=1) - H.min(axis=1)
    scale = max(1.0, float(np.max(np.abs(H))))
    frac = float(np.mean(spread <= tol * scale))
    return SingularityReport(True, tup, frac, bool(np.all(np.abs(tup.lam1) <= 1e-12)))
