"""Polyhedral model of the cone of first-order admissible variations.

A variation is parametrised by ``c = (h0, v)`` where ``h0`` perturbs the
initial state and ``v`` holds one control perturbation per grid step.  The
state part follows the discrete tangent ``h_{k+1} = A_k h_k + B_k v_k`` of
the RK4 map, so endpoint deviations of nearby simulated processes agree with
``h`` to second order.  The cone is cut out by ``g_z eta = 0`` and
``f_z eta <= 0`` with ``eta = (h(t0), h(t1))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._linalg import least_distance, nullspace
from .trajectory import endpoint_jacobians, linearize

__all__ = [
    "Variation",
    "KernelCone",
    "Projection",
    "ConeSamples",
    "state_map",
    "build_kernel_cone",
    "project_to_cone",
    "sample_cone",
]

log = logging.getLogger(__name__)

TOL_MEMBER = 1e-9


@dataclass(frozen=True, eq=False)
class Variation:
    coords: np.ndarray  # (n + N r,)
    h0: np.ndarray
    v: np.ndarray  # (N, r)
    h: np.ndarray  # (N+1, n)

    @property
    def eta(self):
        return np.concatenate([self.h[0], self.h[-1]])

    @property
    def norm(self):
        return float(np.linalg.norm(self.coords))

    def to_dict(self):
        return {"h0": self.h0.tolist(), "v": self.v.tolist()}


def state_map(lin, n):
    """Dense map ``S`` of shape (N+1, n, n + N r) with ``h_k = S[k] @ c``."""
    A, B = lin.A, lin.B
    N, _, r = B.shape
    D = n + N * r
    S = np.zeros((N + 1, n, D))
    S[0, :, :n] = np.eye(n)
    for k in range(N):
        S[k + 1] = A[k] @ S[k]
        S[k + 1, :, n + k * r : n + (k + 1) * r] += B[k]
    return S


@dataclass(frozen=True, eq=False)
class KernelCone:
    """``{c : A_eq c = 0, A_ineq c <= 0}`` with the equality kernel basis."""

    A_eq: np.ndarray
    A_ineq: np.ndarray
    basis: np.ndarray  # (D, d) orthonormal basis of ker A_eq
    n: int = 0
    r: int = 0
    N: int = 0
    S: np.ndarray | None = None
    dt: float = 1.0

    @classmethod
    def from_matrices(cls, A_eq, A_ineq, dim=None):
        A_eq = np.asarray(A_eq, dtype=float)
        A_ineq = np.asarray(A_ineq, dtype=float)
        if dim is None:
            dim = max(A_eq.shape[-1] if A_eq.size else 0, A_ineq.shape[-1] if A_ineq.size else 0)
        A_eq = A_eq.reshape(-1, dim)
        A_ineq = A_ineq.reshape(-1, dim)
        return cls(A_eq, A_ineq, nullspace(A_eq))

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def is_trivial(self):
        return self.basis.shape[1] == 0

    def residuals(self, c):
        c = np.asarray(c, dtype=float)
        eq = float(np.max(np.abs(self.A_eq @ c), initial=0.0))
        ineq = float(np.max(self.A_ineq @ c, initial=0.0))
        return eq, max(ineq, 0.0)

    def contains(self, c, tol=TOL_MEMBER):
        eq, ineq = self.residuals(c)
        return eq <= tol and ineq <= tol

    def variation(self, c):
        if self.S is None:
            raise ValueError("cone has no state map")
        c = np.asarray(c, dtype=float)
        h = self.S @ c
        return Variation(c.copy(), c[: self.n].copy(), c[self.n :].reshape(self.N, self.r), h)

    def coords(self, h0, v):
        return np.concatenate([np.asarray(h0, dtype=float).ravel(), np.asarray(v, dtype=float).ravel()])


def build_kernel_cone(system, process, fundamental=None, lin=None):
    """Assemble the linearised endpoint constraints in ``(h0, v)`` coordinates.

    ``fundamental`` is accepted for callers that already hold one; the
    weights are taken from the stepwise RK4 tangent (``lin``) either way.
    """
    lin = lin or linearize(system, process)
    n = system.n
    S = state_map(lin, n)
    D_eta = np.concatenate([S[0], S[-1]], axis=0)  # (2n, D)
    fz, gz = endpoint_jacobians(system, process)
    A_eq = gz @ D_eta
    A_ineq = fz @ D_eta
    N, _, r = lin.B.shape
    return KernelCone(A_eq, A_ineq, nullspace(A_eq), n, r, N, S, process.grid.dt)


@dataclass
class Projection:
    coords: np.ndarray | None
    feasible: bool
    active: np.ndarray  # inequality rows at zero after projection
    eq_residual: float
    ineq_residual: float
    conflict: np.ndarray | None = None
    variation: Variation | None = None


def project_to_cone(cone, candidate, tol=TOL_MEMBER):
    """Nearest cone member to the equality-projected candidate.

    The candidate is first projected orthogonally onto ``ker A_eq``; violated
    inequality rows are then removed by the smallest correction inside that
    kernel (a least-distance problem).
    """
    c = np.asarray(candidate, dtype=float).ravel()
    Z = cone.basis
    cp = Z @ (Z.T @ c)
    Ai = cone.A_ineq
    if Ai.shape[0]:
        G = -(Ai @ Z)
        h = Ai @ cp
        d = least_distance(G, h)
        if d is None:
            bad = np.where(h > tol)[0]
            return Projection(None, False, np.array([], int), np.inf, np.inf, conflict=bad)
        cp = cp + Z @ d
    eq, ineq = cone.residuals(cp)
    scale = max(1.0, float(np.linalg.norm(cp)))
    active = np.where(np.abs(Ai @ cp) <= tol * scale)[0] if Ai.shape[0] else np.array([], int)
    ok = eq <= tol * scale and ineq <= tol * scale
    var = cone.variation(cp) if (ok and cone.S is not None) else None
    return Projection(cp, ok, active, eq, ineq, variation=var)


class ConeSamples(list):
    """List of sampled variations carrying an explanatory ``note``."""

    note = ""


def sample_cone(cone, count, seed=0, max_tries=20):
    """Unit-norm cone members from Gaussian draws in the equality kernel."""
    if count < 1:
        raise ValueError("count must be at least 1")
    out = ConeSamples()
    if cone.is_trivial:
        out.note = "cone is {0}; nothing to sample"
        log.info(out.note)
        return out
    rng = np.random.default_rng(seed)
    d = cone.basis.shape[1]
    tries = 0
    while len(out) < count and tries < max_tries * count:
        tries += 1
        proj = project_to_cone(cone, cone.basis @ rng.standard_normal(d))
        if not proj.feasible:
            continue
        nrm = np.linalg.norm(proj.coords)
        if nrm < 1e-10:
            continue
        c = proj.coords / nrm
        out.append(cone.variation(c) if cone.S is not None else c)
    if len(out) < count:
        out.note = f"only {len(out)} nonzero members found in {tries} draws"
    return out
