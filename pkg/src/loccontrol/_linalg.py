"""Small dense linear-algebra helpers shared by the cone and corrector code."""

from __future__ import annotations

import numpy as np
from scipy.optimize import nnls

__all__ = [
    "nullspace",
    "orth_projector",
    "subspace_distance",
    "least_distance",
    "min_norm_conic",
]


def nullspace(A, rtol=1e-9):
    """Orthonormal basis of ``ker A`` (columns).

    Singular values below ``rtol * sigma_max`` count as zero.  A matrix whose
    singular values are all below that threshold (including the zero matrix)
    has the whole space as kernel.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    ncols = A.shape[1]
    if A.shape[0] == 0 or ncols == 0:
        return np.eye(ncols)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    smax = s[0] if s.size else 0.0
    if smax == 0.0:
        return np.eye(ncols)
    rank = int(np.sum(s > rtol * smax))
    return vt[rank:].T.copy()


def orth_projector(basis):
    basis = np.asarray(basis, dtype=float)
    if basis.size == 0:
        n = basis.shape[0]
        return np.zeros((n, n))
    q, _ = np.linalg.qr(basis)
    return q @ q.T


def subspace_distance(B1, B2):
    """Spectral-norm distance between the orthogonal projectors of two bases."""
    return float(np.linalg.norm(orth_projector(B1) - orth_projector(B2), 2))


def least_distance(G, h, atol=1e-12):
    """Solve ``min ||x||  s.t.  G x >= h`` (Lawson-Hanson LDP via NNLS).

    Returns ``None`` when the constraints are infeasible.  The NNLS answer is
    polished by an exact minimum-norm solve on the detected active rows.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    m, n = G.shape
    if m == 0 or np.all(h <= 0):
        return np.zeros(n)
    E = np.vstack([G.T, h[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u, _ = nnls(E, f, maxiter=50 * (m + n + 1))
    res = E @ u - f
    if abs(res[-1]) < atol:
        return None
    x = -res[:n] / res[-1]
    # polish on the active set
    slack = G @ x - h
    scale = max(1.0, float(np.max(np.abs(h))))
    active = slack <= 1e-9 * scale
    if np.any(active):
        xa, *_ = np.linalg.lstsq(G[active], h[active], rcond=None)
        if np.all(G @ xa - h >= -1e-12 * scale):
            x = xa
    return x


def min_norm_conic(A, z, nonneg, rtol=1e-10):
    """Minimum-norm solution of ``A x = z`` with ``x[nonneg] >= 0``.

    The equality is eliminated exactly (particular solution plus kernel
    coordinates), so the returned ``x`` satisfies ``A x = z`` to rounding.
    Returns ``None`` if no such ``x`` exists.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    xp, *_ = np.linalg.lstsq(A, z, rcond=rtol)
    if np.linalg.norm(A @ xp - z) > 1e-9 * max(1.0, np.linalg.norm(z)):
        return None
    nonneg = np.asarray(nonneg, dtype=int)
    if nonneg.size == 0 or np.all(xp[nonneg] >= 0):
        return xp
    N = nullspace(A, rtol)
    if N.shape[1] == 0:
        return None
    c = least_distance(N[nonneg], -xp[nonneg])
    if c is None:
        return None
    x = xp + N @ c
    x[nonneg] = np.maximum(x[nonneg], 0.0)
    # re-impose the equality after clipping, through the free coordinates
    free = np.setdiff1d(np.arange(A.shape[1]), nonneg)
    if free.size:
        corr, *_ = np.linalg.lstsq(A[:, free], z - A @ x, rcond=rtol)
        x[free] += corr
    return x
