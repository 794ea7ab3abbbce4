"""Second-order corrector: steering the discretised system to nearby targets.

The decision vector is ``w = (xi, v, alpha, s)``: initial state, one control
perturbation per grid step, nonnegative mixing proportions of a fixed tuple
of constant controls (one set per time block), and slacks for the
inequality rows.  The endpoint map is

    G(w) = (f(x(t0), x(t1)) + s,  g(x(t0), x(t1)))

evaluated through the relaxed (convexified) dynamics.  Near a process where
``G'`` alone is not onto, a right inverse ``R`` of
``(w, beta) -> G' w + beta/2 G''[q, q]`` restricted to the admissible
directions gives the fixed-point map

    Psi_y(z) = y + z - G(w_hat + R1(z - G0) + sqrt(R2(z - G0)) q),

whose fixed point solves ``G(w) = y`` with ``|w - w_hat| = O(|y|^(1/2))``.
Positive mixing proportions are finally realised by chattering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._linalg import min_norm_conic
from .trajectory import (
    IntegrationError,
    endpoint_jacobians,
    linearize,
    rk4_step,
    simulate,
    simulate_pieces,
    simulate_relaxed,
)

__all__ = [
    "RegularityError",
    "CorrectorProblem",
    "RightInverse",
    "SteeringResult",
    "ChatteringControl",
    "ProbeResult",
    "build_corrector_problem",
    "build_right_inverse",
    "reach_target",
    "verify_steering",
    "mix_controls",
    "chattering_error",
    "chattering_bound",
    "probe_reachability",
]

SECOND_DIFF_STEP = 1e-4
SOLVE_TOL = 1e-7


class RegularityError(RuntimeError):
    """The first-plus-second-order map is not onto; carries the failing direction."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


# --------------------------------------------------------------------------
# chattering


@dataclass(frozen=True, eq=False)
class ChatteringControl:
    """Piecewise-constant control given by consecutive (duration, value) pieces."""

    t0: float
    durations: np.ndarray
    values: np.ndarray  # (M, r)
    pieces_per_step: int

    @property
    def breakpoints(self):
        return self.t0 + np.concatenate([[0.0], np.cumsum(self.durations)])

    def simulate(self, system, x0):
        """States at the piece boundaries and at the base-grid nodes."""
        ts, xs = simulate_pieces(system, x0, self.t0, self.durations, self.values)
        return ts, xs, xs[:: self.pieces_per_step]


def _weights_per_step(weights, N, k):
    w = np.asarray(weights, dtype=float)
    w = np.broadcast_to(w, (N, k)) if w.ndim <= 1 else w
    if w.shape != (N, k):
        raise ValueError(f"weights must have shape ({k},) or ({N}, {k})")
    if np.any(w < 0):
        raise ValueError("mixing weights must be nonnegative")
    if np.any(w.sum(axis=1) >= 1.0):
        raise ValueError("mixing weights must sum to less than one")
    return w


def mix_controls(controls, weights, subgrid_depth, grid):
    """Time-share ``controls[1:]`` against ``controls[0]`` on refined subintervals.

    Each grid step is split into ``2**subgrid_depth`` equal subintervals; on
    each, control ``i`` runs for the fraction ``alpha_i`` and control 0 for
    the remainder.  ``weights`` is ``(k,)`` or per step ``(N, k)``.  The
    piece durations depend continuously on the weights.
    """
    U = np.stack([np.asarray(c, dtype=float).reshape(grid.N, -1) for c in controls])  # (k+1, N, r)
    k = U.shape[0] - 1
    w = _weights_per_step(weights, grid.N, k)
    sub = 2 ** int(subgrid_depth)
    tau = grid.dt / sub
    frac = np.concatenate([w, 1.0 - w.sum(axis=1, keepdims=True)], axis=1)  # (N, k+1)
    order = list(range(1, k + 1)) + [0]
    vals = U[order].transpose(1, 0, 2)  # (N, k+1, r)
    durations = np.repeat((frac * tau)[:, None, :], sub, axis=1).reshape(-1)
    values = np.repeat(vals[:, None, :, :], sub, axis=1).reshape(-1, U.shape[2])
    return ChatteringControl(grid.t0, durations, values, sub * (k + 1))


def chattering_error(system, x0, controls, weights, grid, subgrid_depth):
    """Max node error of the chattered trajectory against the relaxed one."""
    chat = mix_controls(controls, weights, subgrid_depth, grid)
    _, _, nodes = chat.simulate(system, x0)
    relaxed = simulate_relaxed(system, x0, controls, weights, grid)
    return float(np.max(np.abs(nodes - relaxed)))


def chattering_bound(system, x0, controls, weights, grid, subgrid_depth):
    """Estimate of ``2 ||F_x^-1|| eps`` for the chattered trajectory.

    ``eps`` is the sup over time of the integrated mismatch between the
    chattered and the relaxed field along the relaxed trajectory; the
    inverse norm bounds the solution operator of the variational equation in
    integrated form, ``1 + T max|phi_x| max|Phi(t, s)|``.
    """
    chat = mix_controls(controls, weights, subgrid_depth, grid)
    xr = simulate_relaxed(system, x0, controls, weights, grid)
    U = np.stack([np.asarray(c, dtype=float).reshape(grid.N, system.r) for c in controls])
    w = _weights_per_step(weights, grid.N, U.shape[0] - 1)
    coef = np.concatenate([1.0 - w.sum(axis=1, keepdims=True), w], axis=1)
    pps = chat.pieces_per_step
    starts = chat.breakpoints[:-1]
    mids = starts + 0.5 * chat.durations
    step = np.minimum(((mids - grid.t0) / grid.dt).astype(int), grid.N - 1)
    s = (mids - grid.times[step]) / grid.dt
    xm = xr[step] * (1 - s)[:, None] + xr[step + 1] * s[:, None]
    f_chat = system.dynamics(mids, xm, chat.values)
    f_rel = np.einsum("mj,mjn->mn", coef[step], system.dynamics(mids[:, None], xm[:, None, :], U[:, step].transpose(1, 0, 2)))
    E = np.cumsum((f_chat - f_rel) * chat.durations[:, None], axis=0)
    eps = float(np.max(np.abs(E)))
    jx = system.jac_x(grid.times[:-1], xr[:-1], U[0])
    phi = np.eye(system.n)
    phi_max = 1.0
    # crude bound on the transition matrices from the relaxed linearisation
    for k in range(grid.N):
        phi = (np.eye(system.n) + grid.dt * jx[k]) @ phi
        phi_max = max(phi_max, float(np.linalg.norm(phi, 2)))
    jx_max = float(np.max(np.linalg.norm(jx, ord=2, axis=(1, 2))))
    inv = 1.0 + (grid.t1 - grid.t0) * jx_max * phi_max
    del pps
    return {"eps": eps, "inverse_norm": inv, "bound": 2.0 * inv * eps}


# --------------------------------------------------------------------------
# the corrector problem


@dataclass(frozen=True, eq=False)
class CorrectorProblem:
    system: object
    process: object
    levels: np.ndarray  # (L, r) constant controls mixed in
    block_edges: np.ndarray  # (B+1,) step indices
    Gp: np.ndarray  # (m, W)
    q: np.ndarray  # (W,) unit direction in Ker G' with alpha = 0
    Gqq: np.ndarray  # (m,)
    G0: np.ndarray
    w_hat: np.ndarray
    active_slack: np.ndarray

    @property
    def n(self):
        return self.system.n

    @property
    def N(self):
        return self.process.grid.N

    @property
    def L(self):
        return self.levels.shape[0]

    @property
    def B(self):
        return len(self.block_edges) - 1

    @property
    def slices(self):
        n, Nr, LB = self.n, self.N * self.system.r, self.L * self.B
        return (
            slice(0, n),
            slice(n, n + Nr),
            slice(n + Nr, n + Nr + LB),
            slice(n + Nr + LB, n + Nr + LB + self.system.m1),
        )

    @property
    def alpha_index(self):
        sl = self.slices[2]
        return np.arange(sl.start, sl.stop)

    def split(self, w):
        sx, sv, sa, ss = self.slices
        return w[sx], w[sv].reshape(self.N, self.system.r), w[sa].reshape(self.L, self.B), w[ss]

    def controls(self, w):
        return self.process.u + self.split(w)[1]

    def step_weights(self, w):
        """Per-step mixing proportions ``(N, L)``."""
        alpha = self.split(w)[2]
        out = np.zeros((self.N, self.L))
        for b in range(self.B):
            out[self.block_edges[b] : self.block_edges[b + 1]] = alpha[:, b]
        return out

    def level_controls(self):
        return [np.broadcast_to(lv, (self.N, self.system.r)) for lv in self.levels]

    def _value(self, z, s):
        sys = self.system
        f = np.asarray(sys.f.value(z)) + s if sys.m1 else np.zeros(0)
        g = np.asarray(sys.g.value(z)) if sys.m2 else np.zeros(0)
        return np.concatenate([f, g])

    def endpoints(self, w, depth=None):
        """Endpoint vector and node states for decision vector ``w``.

        ``depth=None`` integrates the relaxed field; an integer realises the
        mixing by chattering at that subgrid depth.
        """
        xi, _, alpha, _ = self.split(w)
        u = self.controls(w)
        grid = self.process.grid
        if not np.any(alpha):
            x = simulate(self.system, xi, u, grid).x
        elif depth is None:
            x = simulate_relaxed(self.system, xi, [u] + self.level_controls(), self.step_weights(w), grid)
        else:
            chat = mix_controls([u] + self.level_controls(), self.step_weights(w), depth, grid)
            x = chat.simulate(self.system, xi)[2]
        return np.concatenate([x[0], x[-1]]), x

    def G(self, w, depth=None):
        z, _ = self.endpoints(w, depth)
        return self._value(z, self.split(w)[3])


def build_corrector_problem(system, process, direction, levels_per_axis=3, blocks=4, lin=None):
    """Assemble ``G'``, the direction ``q`` and ``G''[q, q]`` at the reference.

    ``direction`` is a kernel-cone variation (or its ``(h0, v)`` coordinates),
    normally the certificate witness.
    """
    lin = lin or linearize(system, process)
    n, r, N = system.n, system.r, process.grid.N
    m1 = system.m1
    levels = system.control_set.lattice(levels_per_axis)
    L = levels.shape[0]
    edges = np.linspace(0, N, blocks + 1).round().astype(int)

    # transition to the final time
    to_end = np.empty((N + 1, n, n))
    to_end[N] = np.eye(n)
    for k in range(N - 1, -1, -1):
        to_end[k] = to_end[k + 1] @ lin.A[k]

    sources = np.stack(
        [
            system.dynamics(ts[:, None], ys[:, None, :], levels[None, :, :])
            - system.dynamics(ts, ys, process.u)[:, None, :]
            for ts, ys in zip(lin.stage_times, lin.stage_states)
        ]
    )  # (4, N, L, n)
    C = lin.source_tangent(sources.transpose(0, 1, 3, 2))  # (N, n, L)
    Cend = np.einsum("kab,kbl->kal", to_end[1:], C)
    alpha_cols = np.stack([Cend[edges[b] : edges[b + 1]].sum(axis=0) for b in range(blocks)], axis=-1)  # (n, L, B)

    W = n + N * r + L * blocks + m1
    E = np.zeros((2 * n, W))
    E[:n, :n] = np.eye(n)
    E[n:, :n] = to_end[0]
    E[n:, n : n + N * r] = np.einsum("kab,kbr->akr", to_end[1:], lin.B).reshape(n, N * r)
    E[n:, n + N * r : n + N * r + L * blocks] = alpha_cols.reshape(n, L * blocks)
    fz, gz = endpoint_jacobians(system, process)
    Gf = fz @ E
    Gf[:, W - m1 :] += np.eye(m1)
    Gp = np.vstack([Gf, gz @ E])

    fval = np.asarray(system.f.value(process.endpoints)) if m1 else np.zeros(0)
    w_hat = np.concatenate([process.x[0], np.zeros(N * r + L * blocks), -fval])
    c = np.asarray(getattr(direction, "coords", direction), dtype=float).ravel()
    if c.size != n + N * r:
        raise ValueError("direction must have n + N*r coordinates")
    q = np.zeros(W)
    q[: n + N * r] = c
    q[W - m1 :] = -(fz @ E[:, : n + N * r] @ c) if m1 else 0.0
    q /= np.linalg.norm(q)
    active = np.where(fval >= -1e-9)[0] + (W - m1)

    prob = CorrectorProblem(system, process, levels, edges, Gp, q, np.zeros(Gp.shape[0]), np.zeros(Gp.shape[0]), w_hat, active)
    G0 = prob.G(w_hat)
    e = SECOND_DIFF_STEP
    Gqq = (prob.G(w_hat + e * q) - 2.0 * G0 + prob.G(w_hat - e * q)) / e**2
    return CorrectorProblem(system, process, levels, edges, Gp, q, Gqq, G0, w_hat, active)


@dataclass(frozen=True, eq=False)
class RightInverse:
    """Minimum-norm conic right inverse of ``(w, beta) -> G' w + beta/2 G''[q,q]``."""

    matrix: np.ndarray
    nonneg: np.ndarray
    gamma: float
    probe_residual: float

    @property
    def kappa(self):
        return float(np.sqrt(8.0 * self.gamma))

    def solve(self, z):
        """``(R1(z), R2(z))`` or None when ``z`` is outside the image."""
        z = np.asarray(z, dtype=float)
        if not np.any(z):
            return np.zeros(self.matrix.shape[1] - 1), 0.0
        x = min_norm_conic(self.matrix, z, self.nonneg)
        if x is None:
            return None
        # rounding-level mixing weights would only trigger needless chattering
        tiny = self.nonneg[np.abs(x[self.nonneg]) <= 1e-12 * np.linalg.norm(x)]
        if tiny.size:
            x[tiny] = 0.0
            free = np.setdiff1d(np.arange(x.size), self.nonneg)
            corr, *_ = np.linalg.lstsq(self.matrix[:, free], z - self.matrix @ x, rcond=1e-10)
            x[free] += corr
        if np.linalg.norm(self.matrix @ x - z) > SOLVE_TOL * max(1.0, np.linalg.norm(z)):
            return None
        return x[:-1], max(float(x[-1]), 0.0)

    def __call__(self, z):
        out = self.solve(z)
        if out is None:
            raise RegularityError("second-order regularity not detected", direction=np.asarray(z))
        return out


def build_right_inverse(problem, probes=64, seed=0):
    """Right inverse plus the norm constant ``gamma`` from sphere probes.

    Probes are the signed coordinate directions and ``probes`` random unit
    vectors.  Raises :class:`RegularityError` if any probe is not solvable.
    """
    m = problem.Gp.shape[0]
    A = np.hstack([problem.Gp, 0.5 * problem.Gqq[:, None]])
    nonneg = np.concatenate([problem.alpha_index, problem.active_slack, [A.shape[1] - 1]]).astype(int)
    inv = RightInverse(A, nonneg, 0.0, 0.0)
    rng = np.random.default_rng(seed)
    dirs = [s * e for e in np.eye(m) for s in (1.0, -1.0)]
    for _ in range(probes):
        d = rng.standard_normal(m)
        dirs.append(d / np.linalg.norm(d))
    gamma, resid = 0.0, 0.0
    for d in dirs:
        out = inv.solve(d)
        if out is None:
            raise RegularityError(
                "second-order regularity not detected: direction "
                + np.array2string(d, precision=3)
                + " is not in the image",
                direction=d,
            )
        R1, R2 = out
        resid = max(resid, float(np.linalg.norm(A @ np.concatenate([R1, [R2]]) - d)))
        gamma = max(gamma, float(np.linalg.norm(R1) + R2))
    return RightInverse(A, nonneg, gamma, resid)


# --------------------------------------------------------------------------
# steering


@dataclass
class SteeringResult:
    y: np.ndarray
    converged: bool
    iterations: int
    residual: float
    history: list
    w: np.ndarray
    states: np.ndarray  # node states (N+1, n)
    controls: object  # (N, r) samples or ChatteringControl
    deviation: float
    kappa_empirical: float
    left_trust_ball: bool = False
    chattered: bool = False
    message: str = ""

    @property
    def diverged(self):
        return not self.converged

    def to_dict(self):
        return {
            "y": self.y.tolist(),
            "iterations": self.iterations,
            "deviation": self.deviation,
            "kappa_empirical": self.kappa_empirical,
            "converged": self.converged,
            "residual": self.residual,
            "left_trust_ball": self.left_trust_ball,
            "chattered": self.chattered,
            "residual_history": [float(h) for h in self.history],
            "message": self.message,
        }


def _iterate(problem, rinv, y, z, max_iter, tol, depth, ball):
    history = []
    left = False
    w = problem.w_hat.copy()
    Gw = problem.G(w, depth)
    for it in range(1, max_iter + 1):
        R1, R2 = rinv(z - problem.G0)
        w = problem.w_hat + R1 + np.sqrt(R2) * problem.q
        Gw = problem.G(w, depth)
        res = float(np.linalg.norm(y - Gw))
        history.append(res)
        z = y + z - Gw
        if np.linalg.norm(z - problem.G0) > ball:
            left = True
        if res <= tol:
            return w, z, it, history, left, True
        if not np.isfinite(res):
            break
    return w, z, len(history), history, left, False


def reach_target(problem, right_inv, y, max_iter=200, tol=1e-10, radius=1e-2, depth=5):
    """Fixed-point iteration ``z <- Psi_y(z)`` from ``z0 = G(w_hat)``.

    ``depth`` is the chattering subgrid depth used when the solution mixes
    controls.  The deviation is the max-norm distance of the node states
    from the reference.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != problem.Gp.shape[0]:
        raise ValueError(f"target must have {problem.Gp.shape[0]} entries")
    if np.linalg.norm(y) > radius:
        raise ValueError(f"|y| = {np.linalg.norm(y):.3g} exceeds the corrector radius {radius}")
    G0 = problem.G0
    xref = problem.process.x
    if np.linalg.norm(y - G0) <= tol:
        return SteeringResult(y, True, 0, float(np.linalg.norm(y - G0)), [], problem.w_hat.copy(), xref.copy(), problem.process.u.copy(), 0.0, 0.0)
    ball = 2.0 * np.linalg.norm(y - G0) * (1 + 1e-9)
    msg = ""
    try:
        w, z, its, hist, left, ok = _iterate(problem, right_inv, y, G0.copy(), max_iter, tol, None, ball)
        chattered = False
        if ok and np.any(problem.split(w)[2] > 0):
            chattered = True
            w, z, its2, hist2, left2, ok = _iterate(problem, right_inv, y, z, max_iter, tol, depth, ball)
            its += its2
            hist += hist2
            left = left or left2
    except (IntegrationError, RegularityError, FloatingPointError) as exc:
        return SteeringResult(y, False, 0, np.inf, [], problem.w_hat.copy(), xref.copy(), None, np.inf, np.inf, message=str(exc))
    if not ok:
        msg = f"no convergence in {max_iter} iterations"
    u = problem.controls(w)
    if chattered:
        controls = mix_controls([u] + problem.level_controls(), problem.step_weights(w), depth, problem.process.grid)
        states = controls.simulate(problem.system, problem.split(w)[0])[2]
    else:
        controls = u
        states = problem.endpoints(w)[1]
    dev = float(np.max(np.abs(states - xref)))
    ynorm = float(np.linalg.norm(y))
    return SteeringResult(
        y, ok, its, hist[-1] if hist else np.inf, hist, w, states, controls, dev, dev / np.sqrt(ynorm), left, chattered, msg
    )


def verify_steering(problem, result, tol=1e-10):
    """Independent re-simulation of a steering result.

    Returns a dict with the dynamics defect, control admissibility and the
    endpoint residuals against the target.
    """
    system = problem.system
    grid = problem.process.grid
    xi = problem.split(result.w)[0]
    if isinstance(result.controls, ChatteringControl):
        ch = result.controls
        ts, xs, nodes = ch.simulate(system, xi)
        defect = max(
            float(np.max(np.abs(rk4_step(system, ts[i], xs[i], ch.values[i], ch.durations[i]) - xs[i + 1])))
            for i in range(len(ch.durations))
            if ch.durations[i] > 0
        )
        samples = ch.values
    else:
        u = np.asarray(result.controls)
        nodes = simulate(system, xi, u, grid).x
        steps = rk4_step(system, grid.times[:-1], result.states[:-1], u, grid.dt)
        defect = float(np.max(np.abs(steps - result.states[1:])))
        samples = u
    z = np.concatenate([nodes[0], nodes[-1]])
    m1 = system.m1
    y1, y2 = result.y[:m1], result.y[m1:]
    g_res = float(np.max(np.abs(np.asarray(system.g.value(z)) - y2), initial=0.0)) if system.m2 else 0.0
    f_exc = float(np.max(np.asarray(system.f.value(z)) - y1, initial=0.0)) if m1 else 0.0
    return {
        "dynamics_defect": defect,
        "controls_in_U": bool(np.all(system.control_set.contains(samples))),
        "g_residual": g_res,
        "f_excess": max(f_exc, 0.0),
        "node_mismatch": float(np.max(np.abs(nodes - result.states))),
        "ok": bool(defect <= 1e-8 and np.all(system.control_set.contains(samples)) and g_res <= 10 * tol and f_exc <= 10 * tol),
    }


# --------------------------------------------------------------------------
# reachability probe


@dataclass
class ProbeResult:
    best_residual: float
    controls: np.ndarray | None
    x0: np.ndarray | None
    endpoint_values: np.ndarray | None
    evaluations: int
    held_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    shifted_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def to_dict(self):
        return {
            "best_residual": self.best_residual,
            "evaluations": self.evaluations,
            "endpoint_values": None if self.endpoint_values is None else self.endpoint_values.tolist(),
            "held_rows": self.held_rows.tolist(),
            "shifted_rows": self.shifted_rows.tolist(),
        }


def _fourier_basis(grid, harmonics):
    s = (grid.times[:-1] + 0.5 * grid.dt - grid.t0) / (grid.t1 - grid.t0)
    cols = [np.ones_like(s)]
    for j in range(1, harmonics + 1):
        cols += [np.sin(2 * np.pi * j * s), np.cos(2 * np.pi * j * s)]
    return np.stack(cols, axis=1)  # (N, K)


def _batch_endpoints(system, grid, X0, U):
    """Endpoints for a batch of initial states (B, n) and controls (B, N, r)."""
    x = X0.copy()
    for k in range(grid.N):
        x = rk4_step(system, grid.times[k], x, U[:, k], grid.dt)
    return np.concatenate([X0, x], axis=1)


def probe_reachability(system, process, target_shift, budget=2000, seed=0, harmonics=3, scale=0.5, batch=100):
    """Search for a process with ``g(endpoints) = target_shift``.

    Controls are the reference plus a low-order Fourier perturbation.  Rows
    with zero target shift are held by a chord-Newton correction of the
    initial state and the coefficients; the distance on the shifted rows is
    minimised by batched random sampling followed by Nelder-Mead polishing
    of the best candidates.  ``budget`` counts objective evaluations.  A
    large residual floor corroborates, but never proves, a reachability
    obstruction.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    y = np.asarray(target_shift, dtype=float).ravel()
    if y.size != system.m2:
        raise ValueError(f"target_shift must have m2={system.m2} entries")
    grid = process.grid
    n, r = system.n, system.r
    held = np.where(y == 0)[0]
    shifted = np.where(y != 0)[0]
    Phi = _fourier_basis(grid, harmonics)
    K = Phi.shape[1]
    dim = n + K * r
    base = np.concatenate([process.x[0], np.zeros(K * r)])

    def unpack(theta):
        theta = np.atleast_2d(theta)
        c = theta[:, n:].reshape(-1, K, r)
        return theta[:, :n], process.u[None] + np.einsum("nk,bkr->bnr", Phi, c)

    def gvals(theta):
        X0, U = unpack(theta)
        return np.asarray(system.g.value(_batch_endpoints(system, grid, X0, U))), U

    h = 1e-7 * np.maximum(1.0, np.abs(base))
    gp, _ = gvals(np.vstack([base + np.diag(h), base - np.diag(h)]))
    J = ((gp[:dim] - gp[dim:]) / (2 * h[:, None])).T  # (m2, dim)
    Jpinv = np.linalg.pinv(J[held]) if held.size else np.zeros((dim, 0))

    def evaluate(thetas):
        """Hold rows, then return residuals (inf when rejected) and states."""
        thetas = np.array(thetas, dtype=float)
        ok = np.ones(len(thetas), bool)
        g, U = gvals(thetas)
        for _ in range(30):
            res = g[:, held] - y[held]
            bad = np.max(np.abs(res), axis=1, initial=0.0) > 1e-12
            if not np.any(bad):
                break
            thetas[bad] -= res[bad] @ Jpinv.T
            g, U = gvals(thetas)
        ok &= np.max(np.abs(g[:, held] - y[held]), axis=1, initial=0.0) <= 1e-10
        ok &= np.all(system.control_set.contains(U), axis=1)
        ok &= np.all(np.isfinite(g), axis=1)
        out = np.where(ok, np.linalg.norm(g[:, shifted] - y[shifted], axis=1), np.inf)
        return out, thetas, g

    best = {"res": np.inf, "theta": None, "g": None}

    def record(res, thetas, g):
        i = int(np.argmin(res))
        if res[i] < best["res"]:
            best.update(res=float(res[i]), theta=thetas[i].copy(), g=g[i].copy())

    rng = np.random.default_rng(seed)
    evals = 1
    record(*evaluate(base[None]))
    n_random = min(budget - evals, int(0.6 * budget))
    pool = []
    while n_random > 0 and best["res"] > 1e-12:
        b = min(batch, n_random)
        cand = np.tile(base, (b, 1))
        cand[:, n:] += scale * rng.standard_normal((b, K * r)) / rng.integers(1, 5, size=(b, 1))
        res, th, g = evaluate(cand)
        evals += b
        n_random -= b
        record(res, th, g)
        pool.extend((float(rv), t[n:].copy()) for rv, t in zip(res, th) if np.isfinite(rv))
    pool.sort(key=lambda item: item[0])
    starts = [base[n:]] + [c for _, c in pool[:4]]

    def objective(c):
        nonlocal evals
        evals += 1
        res, th, g = evaluate(np.concatenate([base[:n], c])[None])
        record(res, th, g)
        return float(res[0]) if np.isfinite(res[0]) else 1e6

    reserve = min(budget // 10, 10 * (2 * dim + 1))
    for i, start in enumerate(starts):
        left = budget - reserve - evals
        if left <= 0 or best["res"] <= 1e-12:
            break
        minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"maxfev": max(1, left // (len(starts) - i)), "xatol": 1e-12, "fatol": 1e-15, "adaptive": True},
        )
    # Gauss-Newton polish on all rows from the best point found
    while best["theta"] is not None and best["res"] > 1e-12 and budget - evals >= 2 * dim + 1:
        th = best["theta"]
        hh = 1e-7 * np.maximum(1.0, np.abs(th))
        gp, _ = gvals(np.vstack([th + np.diag(hh), th - np.diag(hh)]))
        evals += 2 * dim
        Jf = ((gp[:dim] - gp[dim:]) / (2 * hh[:, None])).T
        trial = th - np.linalg.lstsq(Jf, best["g"] - y, rcond=None)[0]
        evals += 1
        res, tt, g = evaluate(trial[None])
        if not res[0] < best["res"]:
            break
        record(res, tt, g)
    if best["theta"] is None:
        return ProbeResult(np.inf, None, None, None, evals, held, shifted)
    X0, U = unpack(best["theta"])
    return ProbeResult(best["res"], U[0], X0[0], best["g"], evals, held, shifted)
