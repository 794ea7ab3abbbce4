"""Fixed-grid RK4 integration of states, variations and costates.

Every trajectory lives on one uniform grid ``t_k = t0 + k*dt``, ``k = 0..N``,
with controls held constant on ``[t_k, t_{k+1})``.  Linearisations are the
exact tangent of the RK4 step map (RK4 applied to the variational equation
along the RK4 stage states), and costates are its exact adjoint.  Discrete
duality ``<p_k, h_k> = const`` therefore holds to rounding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid",
    "Process",
    "Linearization",
    "FundamentalMatrix",
    "Costate",
    "IntegrationError",
    "rk4_step",
    "simulate",
    "simulate_pieces",
    "simulate_relaxed",
    "linearize",
    "fundamental_matrix",
    "endpoint_jacobians",
    "costate_solve",
    "quadrature",
    "write_trajectory_csv",
]


class IntegrationError(RuntimeError):
    """Non-finite values encountered while integrating."""


@dataclass(frozen=True)
class Grid:
    t0: float
    t1: float
    N: int = 200

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("grid needs N >= 1")
        if not self.t1 > self.t0:
            raise ValueError("grid needs t1 > t0")

    @property
    def dt(self):
        return (self.t1 - self.t0) / self.N

    @property
    def times(self):
        return np.linspace(self.t0, self.t1, self.N + 1)

    def refined(self, factor):
        return Grid(self.t0, self.t1, self.N * factor)


@dataclass(frozen=True, eq=False)
class Process:
    grid: Grid
    x: np.ndarray  # (N+1, n)
    u: np.ndarray  # (N, r)
    left_state_box: bool = False

    @property
    def endpoints(self):
        return np.concatenate([self.x[0], self.x[-1]])

    def residuals(self, system):
        """Dynamics defect, f-violation and g-residual of this process."""
        z = self.endpoints
        xs = np.array(
            [rk4_step(system, t, xk, uk, self.grid.dt) for t, xk, uk in zip(self.grid.times[:-1], self.x[:-1], self.u)]
        )
        defect = float(np.max(np.abs(self.x[1:] - xs))) if len(xs) else 0.0
        fval = system.f.value(z)
        gval = system.g.value(z)
        inside = bool(np.all(system.control_set.contains(self.u)))
        win = system.control_set.test_window
        in_window = bool(np.all((self.u >= win[:, 0]) & (self.u <= win[:, 1])))
        return {
            "dynamics_defect": defect,
            "f_violation": float(np.max(fval, initial=0.0)),
            "g_residual": float(np.max(np.abs(gval), initial=0.0)),
            "controls_interior": inside,
            "controls_in_test_window": in_window,
            "f_values": fval.tolist(),
        }

    def is_admissible(self, system, tol_dyn=1e-8, tol_end=1e-8):
        res = self.residuals(system)
        return (
            res["dynamics_defect"] <= tol_dyn
            and res["f_violation"] <= tol_end
            and res["g_residual"] <= tol_end
            and res["controls_interior"]
        )


def _rk4_stages(system, t, x, u, dt):
    """Stage times, stage states and stage slopes (vectorised over leading axes)."""
    t = np.asarray(t, dtype=float)
    ts = (t, t + 0.5 * dt, t + 0.5 * dt, t + dt)
    k1 = system.dynamics(ts[0], x, u)
    y2 = x + 0.5 * dt * k1
    k2 = system.dynamics(ts[1], y2, u)
    y3 = x + 0.5 * dt * k2
    k3 = system.dynamics(ts[2], y3, u)
    y4 = x + dt * k3
    k4 = system.dynamics(ts[3], y4, u)
    return ts, (x, y2, y3, y4), (k1, k2, k3, k4)


def rk4_step(system, t, x, u, dt):
    _, _, (k1, k2, k3, k4) = _rk4_stages(system, t, x, u, dt)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(system, x0, controls, grid):
    """Integrate ``x' = phi(t, x, u_k)`` with RK4, one step per grid interval."""
    controls = np.asarray(controls, dtype=float).reshape(grid.N, system.r)
    x = np.empty((grid.N + 1, system.n))
    x[0] = np.asarray(x0, dtype=float)
    times = grid.times
    dt = grid.dt
    for k in range(grid.N):
        x[k + 1] = rk4_step(system, times[k], x[k], controls[k], dt)
    if not np.all(np.isfinite(x)):
        raise IntegrationError("state became non-finite during simulation")
    left = not all(system.in_state_box(xk) for xk in x)
    return Process(grid, x, controls, left_state_box=left)


def simulate_pieces(system, x0, t0, durations, values):
    """Integrate a piecewise-constant control given as (duration, value) pieces.

    One RK4 step per piece; zero-length pieces are skipped.  Returns the piece
    boundary times and the states there.
    """
    durations = np.asarray(durations, dtype=float)
    values = np.asarray(values, dtype=float).reshape(len(durations), system.r)
    x = np.asarray(x0, dtype=float).copy()
    t = float(t0)
    ts = [t]
    xs = [x.copy()]
    for d, val in zip(durations, values):
        if d > 0:
            x = rk4_step(system, t, x, val, d)
            t += d
        ts.append(t)
        xs.append(x.copy())
    xs = np.array(xs)
    if not np.all(np.isfinite(xs)):
        raise IntegrationError("state became non-finite during simulation")
    return np.array(ts), xs


def simulate_relaxed(system, x0, controls, weights, grid):
    """Integrate the convexified field ``(1 - sum a_i) phi(u_0) + sum a_i phi(u_i)``.

    ``weights`` is ``(k,)`` for constant proportions or ``(N, k)`` for one
    set of proportions per grid step.
    """
    U = np.stack([np.asarray(c, dtype=float).reshape(grid.N, system.r) for c in controls])  # (k+1, N, r)
    weights = np.asarray(weights, dtype=float)
    weights = np.broadcast_to(weights, (grid.N, U.shape[0] - 1))
    coef = np.concatenate([1.0 - weights.sum(axis=1, keepdims=True), weights], axis=1)  # (N, k+1)
    x = np.empty((grid.N + 1, system.n))
    x[0] = x0
    dt = grid.dt

    def field(t, y, k):
        return coef[k] @ system.dynamics(t, y[None, :], U[:, k])

    for k, t in enumerate(grid.times[:-1]):
        y = x[k]
        k1 = field(t, y, k)
        k2 = field(t + dt / 2, y + dt / 2 * k1, k)
        k3 = field(t + dt / 2, y + dt / 2 * k2, k)
        k4 = field(t + dt, y + dt * k3, k)
        x[k + 1] = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise IntegrationError("state became non-finite during simulation")
    return x


# --------------------------------------------------------------------------
# linearisation


def _stage_tangent(jx, sources, dt, initial=None):
    """Propagate a tangent through the four RK4 stages.

    ``jx`` holds the stage Jacobians ``(4, ..., n, n)``; ``sources`` the stage
    source terms ``(4, ..., n, p)`` (or None); ``initial`` the tangent of the
    step's starting state ``(..., n, p)`` (or None).  Returns the tangent of
    the step's end state.
    """
    coeff = (0.5 * dt, 0.5 * dt, dt)
    dk = []
    for j in range(4):
        if j == 0:
            dy = initial
        else:
            inc = coeff[j - 1] * dk[j - 1]
            dy = inc if initial is None else initial + inc
        term = None if dy is None else jx[j] @ dy
        if sources is not None:
            term = sources[j] if term is None else term + sources[j]
        dk.append(term)
    out = dt / 6.0 * (dk[0] + 2.0 * dk[1] + 2.0 * dk[2] + dk[3])
    return out if initial is None else initial + out


@dataclass(frozen=True, eq=False)
class Linearization:
    """Per-step tangent ``h_{k+1} = A_k h_k + B_k v_k`` of the RK4 map."""

    process: Process
    A: np.ndarray  # (N, n, n)
    B: np.ndarray  # (N, n, r)
    stage_times: tuple
    stage_states: tuple
    stage_jx: np.ndarray  # (4, N, n, n)

    def source_tangent(self, stage_sources):
        """Per-step response ``(N, n, p)`` to additive field sources ``(4, N, n, p)``."""
        return _stage_tangent(self.stage_jx, stage_sources, self.process.grid.dt)


def linearize(system, process):
    grid = process.grid
    dt = grid.dt
    t = grid.times[:-1]
    ts, ys, _ = _rk4_stages(system, t, process.x[:-1], process.u, dt)
    jx = np.stack([system.jac_x(tj, yj, process.u) for tj, yj in zip(ts, ys)])
    ju = np.stack([system.jac_u(tj, yj, process.u) for tj, yj in zip(ts, ys)])
    eye = np.broadcast_to(np.eye(system.n), (grid.N, system.n, system.n))
    A = _stage_tangent(jx, None, dt, initial=eye)
    B = _stage_tangent(jx, ju, dt)
    return Linearization(process, A, B, ts, ys, jx)


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    samples: np.ndarray  # (N+1, n, n); samples[k] = Phi(t_k, t_0)
    steps: np.ndarray  # (N, n, n) per-step transition matrices

    def transition(self, k, j):
        """``Phi(t_k, t_j)`` as a recomputed partial product (k >= j)."""
        out = np.eye(self.samples.shape[-1])
        for i in range(j, k):
            out = self.steps[i] @ out
        return out


def fundamental_matrix(system, process, lin=None):
    lin = lin or linearize(system, process)
    N, n = lin.A.shape[0], system.n
    phi = np.empty((N + 1, n, n))
    phi[0] = np.eye(n)
    for k in range(N):
        phi[k + 1] = lin.A[k] @ phi[k]
    if not np.all(np.isfinite(phi)):
        raise IntegrationError("fundamental matrix became non-finite")
    return FundamentalMatrix(phi, lin.A)


def endpoint_jacobians(system, process):
    """``(f_z, g_z)`` at the reference endpoints, each ``(m, 2n)``."""
    z = process.endpoints
    return np.asarray(system.f.jac(z)), np.asarray(system.g.jac(z))


@dataclass(frozen=True, eq=False)
class Costate:
    p: np.ndarray  # (N+1, n); row p_k at t_k
    lam1: np.ndarray
    lam2: np.ndarray
    residual: np.ndarray  # p(t0) - (f_z1^T lam1 + g_z1^T lam2)

    @property
    def lam(self):
        return np.concatenate([self.lam1, self.lam2])


def costate_solve(system, process, lam1, lam2, lin=None):
    """Backward solve of ``-p' = p phi_x`` from ``p(t1) = -f_z2^T lam1 - g_z2^T lam2``.

    The initial boundary relation is not imposed; its defect is returned as
    ``residual`` (linear in the multipliers).
    """
    lin = lin or linearize(system, process)
    n = system.n
    lam1 = np.asarray(lam1, dtype=float).ravel()
    lam2 = np.asarray(lam2, dtype=float).ravel()
    if lam1.size != system.m1 or lam2.size != system.m2:
        raise ValueError("multiplier sizes do not match (m1, m2)")
    fz, gz = endpoint_jacobians(system, process)
    N = lin.A.shape[0]
    p = np.empty((N + 1, n))
    p[N] = -(fz[:, n:].T @ lam1 + gz[:, n:].T @ lam2)
    for k in range(N - 1, -1, -1):
        p[k] = p[k + 1] @ lin.A[k]
    if not np.all(np.isfinite(p)):
        raise IntegrationError("costate became non-finite")
    rho = p[0] - (fz[:, :n].T @ lam1 + gz[:, :n].T @ lam2)
    return Costate(p, lam1, lam2, rho)


def quadrature(values, dt=None, times=None):
    """Composite trapezoid rule over ``N + 1`` equally spaced samples."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 3:
        raise ValueError("quadrature needs N >= 2 intervals")
    if times is not None:
        return np.trapezoid(values, times, axis=0)
    if dt is None:
        raise ValueError("give dt or times")
    return np.trapezoid(values, dx=dt, axis=0)


def write_trajectory_csv(path, times, columns):
    """Write ``t`` plus named column blocks, e.g. ``{"x": X, "u": U}``.

    A block of shape ``(len(times) - 1, k)`` (piecewise-constant controls) is
    padded by repeating its last row.
    """
    times = np.asarray(times, dtype=float)
    header = ["t"]
    blocks = []
    for prefix, data in columns.items():
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] == len(times) - 1:
            data = np.vstack([data, data[-1:]])
        header += [f"{prefix}{i + 1}" for i in range(data.shape[1])]
        blocks.append(data)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(times):
            row = [repr(float(t))] + [repr(float(v)) for b in blocks for v in b[i]]
            writer.writerow(row)
