"""Second-order quadratic form, controllability certificates and the
second-order necessary optimality test.

For a multiplier tuple with costate ``p`` the form is

    Q[q, q] = -int H_ww[w, w] dt + <lam1, f''[eta, eta]> + <lam2, g''[eta, eta]>

with ``w = (h, v)`` and ``eta = (h(t0), h(t1))``.  The integral uses the
trapezoid rule on each grid interval with ``v`` held at its step value, so
``Q`` is an exact quadratic form in the cone coordinates ``(h0, v)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import linprog

from .kernel import build_kernel_cone, project_to_cone, sample_cone
from .multipliers import is_pointed, lambda_max_set
from .trajectory import linearize

__all__ = [
    "CONTROLLABLE",
    "NOT_CERTIFIED",
    "UNKNOWN",
    "QuadraticForm",
    "Certificate",
    "LambdaQResult",
    "OptimalityReport",
    "hww_samples",
    "assemble_Q",
    "evaluate_Q",
    "certificate_search",
    "lambda_q_nonempty",
    "augment_with_cost",
    "check_second_order_necessary",
]

CONTROLLABLE = "CONTROLLABLE"
NOT_CERTIFIED = "NOT_CERTIFIED"
UNKNOWN = "UNKNOWN"

TOL_Q_REL = 1e-8


def hww_samples(system, process, p):
    """``H_ww`` at the left and right end of every interval, each (N, n+r, n+r).

    The control is the step value ``u_k`` at both ends.
    """
    grid = process.grid
    t = grid.times
    u = process.u
    left = np.einsum("ki,kiab->kab", p[:-1], system.hess(t[:-1], process.x[:-1], u))
    right = np.einsum("ki,kiab->kab", p[1:], system.hess(t[1:], process.x[1:], u))
    return left, right


def _endpoint_hessian(system, process, lam1, lam2):
    z = process.endpoints
    out = np.zeros((2 * system.n, 2 * system.n))
    if system.m1:
        out += np.einsum("i,iab->ab", lam1, system.f.hess(z))
    if system.m2:
        out += np.einsum("i,iab->ab", lam2, system.g.hess(z))
    return out


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    Q_mat: np.ndarray
    integral: np.ndarray
    endpoint_f: np.ndarray
    endpoint_g: np.ndarray
    multiplier: object

    def value(self, c):
        c = np.asarray(c, dtype=float)
        return float(c @ self.Q_mat @ c)

    def terms(self, c):
        c = np.asarray(c, dtype=float)
        return {
            "integral": float(c @ self.integral @ c),
            "endpoint_f": float(c @ self.endpoint_f @ c),
            "endpoint_g": float(c @ self.endpoint_g @ c),
        }

    @property
    def norm(self):
        return float(np.max(np.abs(np.linalg.eigvalsh(self.Q_mat)), initial=0.0))

    @property
    def tol(self):
        return TOL_Q_REL * self.norm


def assemble_Q(system, process, multiplier, cone):
    """Matrix of ``Q`` in the cone coordinates ``(h0, v)``."""
    n, r, N = cone.n, cone.r, cone.N
    D = cone.dim
    dt = process.grid.dt
    left, right = hww_samples(system, process, multiplier.costate.p)

    # W[k] maps c -> (h_k, v_k) and (h_{k+1}, v_k)
    V = np.zeros((N, r, D))
    idx = n + np.arange(N)[:, None] * r + np.arange(r)[None, :]
    V[np.arange(N)[:, None], np.arange(r)[None, :], idx] = 1.0
    Wl = np.concatenate([cone.S[:-1], V], axis=1)
    Wr = np.concatenate([cone.S[1:], V], axis=1)
    flat = lambda a: a.reshape(-1, D)
    integral = -0.5 * dt * (flat(Wl).T @ flat(left @ Wl) + flat(Wr).T @ flat(right @ Wr))

    D_eta = np.concatenate([cone.S[0], cone.S[-1]], axis=0)
    z = process.endpoints
    ef = np.zeros((D, D))
    eg = np.zeros((D, D))
    if system.m1:
        ef = D_eta.T @ np.einsum("i,iab->ab", multiplier.lam1, system.f.hess(z)) @ D_eta
    if system.m2:
        eg = D_eta.T @ np.einsum("i,iab->ab", multiplier.lam2, system.g.hess(z)) @ D_eta
    sym = lambda a: 0.5 * (a + a.T)
    integral, ef, eg = sym(integral), sym(ef), sym(eg)
    return QuadraticForm(integral + ef + eg, integral, ef, eg, multiplier)


def evaluate_Q(system, process, multiplier, variation):
    """``Q[q, q]`` from the variation's state samples (no matrix assembly).

    Returns ``(value, terms)``; ``terms["scale"]`` sums the magnitudes of the
    individual contributions and sets the tolerance for sign decisions.
    """
    left, right = hww_samples(system, process, multiplier.costate.p)
    wl = np.concatenate([variation.h[:-1], variation.v], axis=1)
    wr = np.concatenate([variation.h[1:], variation.v], axis=1)
    ql = np.einsum("ka,kab,kb->k", wl, left, wl)
    qr = np.einsum("ka,kab,kb->k", wr, right, wr)
    dt = process.grid.dt
    integral = -0.5 * dt * float(np.sum(ql + qr))
    scale_int = 0.5 * dt * float(np.sum(np.abs(ql) + np.abs(qr)))
    eta = variation.eta
    z = process.endpoints
    ef = eg = 0.0
    if system.m1:
        ef = float(np.einsum("i,iab,a,b->", multiplier.lam1, system.f.hess(z), eta, eta))
    if system.m2:
        eg = float(np.einsum("i,iab,a,b->", multiplier.lam2, system.g.hess(z), eta, eta))
    terms = {
        "integral": integral,
        "endpoint_f": ef,
        "endpoint_g": eg,
        "scale": scale_int + abs(ef) + abs(eg),
    }
    return integral + ef + eg, terms


# --------------------------------------------------------------------------
# certificate


@dataclass
class Certificate:
    verdict: str
    witness: object | None  # Variation
    values: list
    min_value: float
    tol_q: float
    min_restricted_eig: float | None = None
    method: str = ""
    reason: str = ""
    cone_residual: float = 0.0

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "witness": None if self.witness is None else self.witness.to_dict(),
            "Q_values": [float(v) for v in self.values],
            "min_value": float(self.min_value),
            "tol_q": float(self.tol_q),
            "min_restricted_eig": None if self.min_restricted_eig is None else float(self.min_restricted_eig),
            "method": self.method,
            "reason": self.reason,
            "cone_residual": float(self.cone_residual),
        }


def _sign_fix(c):
    nz = np.flatnonzero(np.abs(c) > 1e-12 * np.max(np.abs(c)))
    return -c if nz.size and c[nz[0]] < 0 else c


def _equality_only(cone):
    if cone.A_ineq.shape[0] == 0:
        return True
    Ai = cone.A_ineq @ cone.basis
    return float(np.max(np.abs(Ai), initial=0.0)) <= 1e-12 * max(1.0, float(np.max(np.abs(cone.A_ineq))))


def _mass_diag(cone):
    """Diagonal of the discrete ``|h0|^2 + int |v|^2 dt`` metric."""
    w = np.ones(cone.dim)
    w[cone.n :] = cone.dt
    return w


def _restricted_min_eig(Q, cone):
    """Least eigenvalue of ``Q`` on ``ker A_eq`` in the ``L2`` metric.

    Measuring against ``|h0|^2 + int |v|^2 dt`` keeps the value independent
    of the grid size; the returned direction has unit Euclidean norm.
    """
    Z = cone.basis
    if Z.shape[1] == 0:
        return 0.0, np.zeros(cone.dim)
    w, V = eigh(Z.T @ Q @ Z, Z.T @ (_mass_diag(cone)[:, None] * Z))
    c = Z @ V[:, 0]
    return float(w[0]), _sign_fix(c / np.linalg.norm(c))


def _projected_descent(mats, cone, seed, restarts=16, iters=300):
    """Minimise ``max_i c^T Q_i c`` over unit cone members.

    Projected subgradient steps with renormalisation from seeded random
    starts; returns ``(value, c)`` of the best point found.
    """
    rng = np.random.default_rng(seed)
    Z = cone.basis
    if Z.shape[1] == 0:
        return np.inf, None
    L = max(max(float(np.max(np.abs(np.linalg.eigvalsh(Q)), initial=0.0)) for Q in mats), 1e-300)
    step = 0.5 / L
    best_val, best_c = np.inf, None
    for _ in range(restarts):
        pr = project_to_cone(cone, Z @ rng.standard_normal(Z.shape[1]))
        if not pr.feasible or np.linalg.norm(pr.coords) < 1e-12:
            continue
        c = pr.coords / np.linalg.norm(pr.coords)
        for _ in range(iters):
            vals = [c @ Q @ c for Q in mats]
            i = int(np.argmax(vals))
            pr = project_to_cone(cone, c - step * 2.0 * (mats[i] @ c))
            if not pr.feasible:
                break
            nrm = np.linalg.norm(pr.coords)
            if nrm < 1e-12:
                break
            c_new = pr.coords / nrm
            if np.linalg.norm(c_new - c) < 1e-12:
                c = c_new
                break
            c = c_new
        val = max(c @ Q @ c for Q in mats)
        if val < best_val:
            best_val, best_c = float(val), c
    return best_val, best_c


def _generators_of(multipliers):
    if hasattr(multipliers, "generators"):
        gens = list(multipliers.generators)
        return gens, multipliers.order, multipliers.is_pointed
    gens = list(multipliers)
    if not gens:
        return gens, 0, True
    order = int(np.linalg.matrix_rank(np.column_stack([g.lam for g in gens]), tol=1e-8))
    return gens, order, is_pointed([g.lam for g in gens])


def certificate_search(system, process, cone, multipliers, seed=0, restarts=16):
    """Look for ``q`` in the cone with ``Q_i[q, q] < 0`` for every generator.

    ``multipliers`` is a cone description (or a list of tuples).  The search
    is exact (restricted eigenvalue) when no inequality row bites on the
    equality kernel and heuristic otherwise.
    """
    gens, order, pointed = _generators_of(multipliers)
    if not gens:
        return Certificate(UNKNOWN, None, [], np.nan, 0.0, reason="multiplier cone is empty; second-order test not needed")
    if order != 1:
        return Certificate(UNKNOWN, None, [], np.nan, 0.0, reason=f"abnormality order {order} (need 1)")
    if not pointed:
        return Certificate(UNKNOWN, None, [], np.nan, 0.0, reason="process is singular")
    forms = [assemble_Q(system, process, g, cone) for g in gens]
    mats = [f.Q_mat for f in forms]
    tol_q = max(f.tol for f in forms)
    min_eig = None
    if _equality_only(cone) and len(mats) == 1:
        min_eig, c = _restricted_min_eig(mats[0], cone)
        method = "restricted eigenvalue"
    else:
        _, c = _projected_descent(mats, cone, seed, restarts)
        method = f"projected descent ({restarts} starts)"
    if c is None:
        return Certificate(UNKNOWN, None, [], np.nan, tol_q, min_eig, method, "kernel cone is {0}")
    values = [float(c @ Q @ c) for Q in mats]
    worst = max(values)
    eq, ineq = cone.residuals(c)
    resid = max(eq, ineq)
    witness = cone.variation(c)
    if worst < -tol_q and resid <= 1e-9:
        verdict, reason = CONTROLLABLE, "Q negative on every generator at the witness"
    elif min_eig is not None:
        verdict, reason = NOT_CERTIFIED, "Q is nonnegative on the kernel cone"
    else:
        verdict, reason = UNKNOWN, "heuristic search found no negative direction"
    return Certificate(verdict, witness, values, worst, tol_q, min_eig, method, reason, resid)


# --------------------------------------------------------------------------
# emptiness of the per-variation multiplier set


@dataclass
class LambdaQResult:
    status: str  # NONEMPTY | EMPTY | UNKNOWN
    witness: object | None
    values: list
    reason: str = ""


def _q_tol(terms):
    return TOL_Q_REL * terms["scale"] + 1e-15


def lambda_q_nonempty(system, process, q, cone_desc, cone=None):
    """Decide whether some tuple in the cone satisfies ``Q[q, q] >= 0``."""
    if cone is not None:
        eq, ineq = cone.residuals(q.coords)
        scale = max(1.0, q.norm)
        if max(eq, ineq) > 1e-9 * scale:
            raise ValueError(f"variation is not in the kernel cone (residual {max(eq, ineq):.3g})")
    if cone_desc.is_empty:
        return LambdaQResult("EMPTY", None, [], "multiplier cone is empty")
    values = []
    for g in cone_desc.generators:
        val, terms = evaluate_Q(system, process, g, q)
        values.append(val)
        if val >= -_q_tol(terms):
            return LambdaQResult("NONEMPTY", g, values, "generator with Q >= 0")
    if cone_desc.order == 1 and cone_desc.is_pointed:
        return LambdaQResult("EMPTY", None, values, "Q < 0 on the unique ray")
    return LambdaQResult("UNKNOWN", None, values, "order > 1 or singular; generators all negative")


# --------------------------------------------------------------------------
# necessary optimality conditions


def augment_with_cost(system, process, cost_f0):
    """``system`` with ``f0(z) - f0(z_hat) <= 0`` prepended to the inequalities."""
    if cost_f0.dim != 1:
        raise ValueError("cost must be a scalar endpoint map")
    c0 = np.asarray(cost_f0.value(process.endpoints), dtype=float)
    return dataclasses.replace(system, f=cost_f0.shifted(c0).stacked(system.f))


@dataclass
class OptimalityReport:
    first_order_ok: bool
    cone: object
    rows: list = field(default_factory=list)
    refuted: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "first_order": {
                "multipliers_exist": self.first_order_ok,
                "lambda0_positive_possible": bool(any(g.lam1[0] > 1e-12 for g in self.cone.generators)),
                "cone": self.cone.to_dict(),
            },
            "per_q": self.rows,
            "refuted": self.refuted,
            "notes": list(self.notes),
        }


def _lambda0_lp(q_values, lam0s, tol):
    """Max of the lam0 share over conic mixes of generators with ``Q >= -tol``."""
    k = len(q_values)
    res = linprog(
        -np.asarray(lam0s),
        A_ub=-np.asarray(q_values)[None, :],
        b_ub=[tol],
        A_eq=np.ones((1, k)),
        b_eq=[1.0],
        bounds=[(0, None)] * k,
        method="highs",
    )
    return (res.status == 0, -res.fun if res.status == 0 else 0.0)


def check_second_order_necessary(system, process, cost_f0, q_samples=20, seed=0, tol_ham=1e-9, points_per_axis=101):
    """Second-order necessary conditions for a strong minimum of ``f0``.

    The cost enters as the first inequality row of an augmented system, so
    ``lam0`` is the first entry of ``lam1``.  For each variation ``q`` of the
    augmented kernel cone (eigen-directions of the forms plus ``q_samples``
    random members) the report states whether a tuple passes ``Q[q,q] >= 0``
    and whether one with ``lam0 > 0`` exists.  Passing is necessary only:
    the report can refute a candidate, never confirm it.
    """
    aug = augment_with_cost(system, process, cost_f0)
    lin = linearize(aug, process)
    desc = lambda_max_set(aug, process, tol_ham=tol_ham, points_per_axis=points_per_axis, lin=lin)
    report = OptimalityReport(not desc.is_empty, desc)
    if desc.is_empty:
        report.refuted = True
        report.notes.append("no first-order multiplier tuple; candidate refuted")
        return report
    if q_samples == 0:
        report.notes.append("first-order section only")
        return report
    cone = build_kernel_cone(aug, process, lin=lin)
    forms = [assemble_Q(aug, process, g, cone) for g in desc.generators]
    qs = []
    for f in forms:
        if _equality_only(cone):
            _, c = _restricted_min_eig(f.Q_mat, cone)
        else:
            _, c = _projected_descent([f.Q_mat], cone, seed, restarts=4)
        if c is not None:
            qs.append(("eigen", cone.variation(c)))
    qs.extend(("sample", q) for q in sample_cone(cone, q_samples, seed))
    lam0s = [g.lam1[0] for g in desc.generators]
    for kind, q in qs:
        vals, tols = [], []
        for g in desc.generators:
            val, terms = evaluate_Q(aug, process, g, q)
            vals.append(val)
            tols.append(_q_tol(terms))
        tol = max(tols)
        found = max(vals) >= -tol
        ok, share = _lambda0_lp(vals, lam0s, tol) if found else (False, 0.0)
        report.rows.append(
            {
                "kind": kind,
                "Q_values": [float(v) for v in vals],
                "tuple_found": bool(found),
                "lambda0_positive": bool(ok and share > 1e-12),
            }
        )
    report.refuted = any(not row["tuple_found"] for row in report.rows)
    return report
