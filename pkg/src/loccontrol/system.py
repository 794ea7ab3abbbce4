"""Control systems ``x' = phi(t, x, u)``, ``u in U`` with endpoint constraints.

All oracles are vectorised over leading axes: ``dynamics(t, x, u)`` accepts
``t`` of shape ``(...)`` (or a scalar), ``x`` of shape ``(..., n)`` and ``u``
of shape ``(..., r)`` and returns ``(..., n)``.  Jacobians carry the output
index before the input index, so ``jac_x`` returns ``(..., n, n)``.  The
second-derivative oracle ``hess`` returns ``(..., n, n + r, n + r)``: one
symmetric bilinear form per state component in the joint variable
``w = (x, u)``.

Endpoint maps act on ``z = (x(t0), x(t1))`` in ``R^{2n}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .expr import ExpressionError, parse_expression

__all__ = [
    "ControlSet",
    "EndpointMap",
    "ControlSystem",
    "ScenarioError",
    "fd_jacobian",
    "fd_hessian",
    "build_builtin",
    "parse_system",
    "verify_derivatives",
    "DerivativeReport",
    "BUILTIN_NAMES",
    "FD_STEP_FIRST",
    "FD_STEP_SECOND",
]

FD_STEP_FIRST = 1e-6
FD_STEP_SECOND = 1e-4


class ScenarioError(ValueError):
    """Invalid system or scenario description."""


# --------------------------------------------------------------------------
# finite differences


def _steps(w, step):
    return step * np.maximum(1.0, np.abs(w))


def fd_jacobian(fun, w, step=FD_STEP_FIRST):
    """Central-difference Jacobian of ``fun: (..., d) -> (..., m)``."""
    w = np.asarray(w, dtype=float)
    d = w.shape[-1]
    h = _steps(w, step)
    cols = []
    for j in range(d):
        wp = w.copy()
        wm = w.copy()
        wp[..., j] += h[..., j]
        wm[..., j] -= h[..., j]
        cols.append((fun(wp) - fun(wm)) / (2.0 * h[..., j])[..., None])
    return np.stack(cols, axis=-1)


def fd_hessian(fun, w, step=FD_STEP_SECOND):
    """Nested central-difference second derivative, shape ``(..., m, d, d)``."""
    w = np.asarray(w, dtype=float)
    d = w.shape[-1]
    h = _steps(w, step)
    out = None
    for i in range(d):
        for j in range(i, d):
            vals = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                ww = w.copy()
                ww[..., i] += si * h[..., i]
                ww[..., j] += sj * h[..., j]
                vals.append(fun(ww))
            hij = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h[..., i] * h[..., j])[..., None]
            if out is None:
                out = np.zeros(hij.shape + (d, d))
            out[..., i, j] = hij
            out[..., j, i] = hij
    if out is None:
        out = np.zeros(w.shape[:-1] + (0, d, d))
    return out


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Open box ``prod_i (lower_i, upper_i)`` with a compact test window inside."""

    lower: np.ndarray
    upper: np.ndarray
    test_window: np.ndarray  # (r, 2)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        win = np.asarray(self.test_window, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "test_window", win)
        if not (lo.shape == hi.shape == (win.shape[0],)):
            raise ScenarioError("control_set: lower, upper and test_window sizes differ")
        if np.any(lo >= hi):
            raise ScenarioError("control_set: need lower < upper in every coordinate")
        if np.any(~np.isfinite(win)) or np.any(win[:, 0] >= win[:, 1]):
            raise ScenarioError("control_set: test_window must be a finite nondegenerate box")
        if np.any(win[:, 0] <= lo) or np.any(win[:, 1] >= hi):
            raise ScenarioError("control_set: test_window must lie in the interior of the bounds")

    @property
    def dim(self):
        return self.lower.size

    def contains(self, u):
        """Strict membership (the set is open); broadcasts over leading axes."""
        u = np.asarray(u, dtype=float)
        return np.all((u > self.lower) & (u < self.upper), axis=-1)

    def lattice(self, points_per_axis=101):
        axes = [np.linspace(a, b, points_per_axis) for a, b in self.test_window]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True, eq=False)
class EndpointMap:
    """``z -> R^m`` with first and second derivatives; ``m`` may be zero."""

    dim: int
    value: Callable
    jac: Callable
    hess: Callable

    @classmethod
    def empty(cls, n):
        def value(z):
            z = np.asarray(z, dtype=float)
            return np.zeros(z.shape[:-1] + (0,))

        def jac(z):
            z = np.asarray(z, dtype=float)
            return np.zeros(z.shape[:-1] + (0, 2 * n))

        def hess(z):
            z = np.asarray(z, dtype=float)
            return np.zeros(z.shape[:-1] + (0, 2 * n, 2 * n))

        return cls(0, value, jac, hess)

    @classmethod
    def affine(cls, C, d):
        """``z -> C z - d``."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        d = np.asarray(d, dtype=float).ravel()
        m, k = C.shape

        def value(z):
            return np.asarray(z, dtype=float) @ C.T - d

        def jac(z):
            z = np.asarray(z, dtype=float)
            return np.broadcast_to(C, z.shape[:-1] + (m, k)).copy()

        def hess(z):
            z = np.asarray(z, dtype=float)
            return np.zeros(z.shape[:-1] + (m, k, k))

        return cls(m, value, jac, hess)

    def stacked(self, other):
        """Concatenate the outputs of two maps."""
        if self.dim == 0:
            return other
        if other.dim == 0:
            return self
        return EndpointMap(
            self.dim + other.dim,
            lambda z: np.concatenate([self.value(z), other.value(z)], axis=-1),
            lambda z: np.concatenate([self.jac(z), other.jac(z)], axis=-3),
            lambda z: np.concatenate([self.hess(z), other.hess(z)], axis=-3),
        )

    def shifted(self, c):
        """``z -> value(z) - c``."""
        c = np.asarray(c, dtype=float)
        return EndpointMap(self.dim, lambda z: self.value(z) - c, self.jac, self.hess)

    def scaled(self, c):
        return EndpointMap(
            self.dim,
            lambda z: c * self.value(z),
            lambda z: c * self.jac(z),
            lambda z: c * self.hess(z),
        )


@dataclass(frozen=True, eq=False)
class ControlSystem:
    name: str
    n: int
    r: int
    dynamics: Callable
    jac_x: Callable
    jac_u: Callable
    hess: Callable
    f: EndpointMap
    g: EndpointMap
    control_set: ControlSet
    state_bounds: tuple | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def m1(self):
        return self.f.dim

    @property
    def m2(self):
        return self.g.dim

    def hamiltonian(self, t, x, u, p):
        """``<p, phi(t, x, u)>`` broadcast over leading axes."""
        return np.sum(np.asarray(p) * self.dynamics(t, x, u), axis=-1)

    def in_state_box(self, x):
        if self.state_bounds is None:
            return True
        lo, hi = self.state_bounds
        return bool(np.all((np.asarray(x) >= lo) & (np.asarray(x) <= hi)))


def _wrap_w(system_dyn, n, t):
    def fun(w):
        return system_dyn(t, w[..., :n], w[..., n:])

    return fun


def _fd_system(name, n, r, dynamics, f, g, control_set, state_bounds=None, params=None):
    """Attach finite-difference derivatives to value-only oracles."""

    def jac_x(t, x, u):
        return fd_jacobian(lambda xx: dynamics(t, xx, u), x)

    def jac_u(t, x, u):
        return fd_jacobian(lambda uu: dynamics(t, x, uu), u)

    def hess(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        w = np.concatenate(
            [np.broadcast_to(x, shape + (n,)), np.broadcast_to(u, shape + (r,))], axis=-1
        )
        return fd_hessian(_wrap_w(dynamics, n, t), w)

    def endpoint(value, m):
        if m == 0:
            return EndpointMap.empty(n)
        return EndpointMap(m, value, lambda z: fd_jacobian(value, z), lambda z: fd_hessian(value, z))

    return ControlSystem(
        name=name,
        n=n,
        r=r,
        dynamics=dynamics,
        jac_x=jac_x,
        jac_u=jac_u,
        hess=hess,
        f=endpoint(*f),
        g=endpoint(*g),
        control_set=control_set,
        state_bounds=state_bounds,
        params=dict(params or {}),
    )


# --------------------------------------------------------------------------
# built-in systems


def _lead(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.broadcast_shapes(x.shape[:-1], u.shape[:-1]), x, u


def _example1(params, free_end=False):
    T = float(params.get("T", 4.0))
    if not T > 0:
        raise ScenarioError("example1 needs T > 0")

    def dyn(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.empty(shape + (2,))
        out[..., 0] = u[..., 0]
        out[..., 1] = u[..., 0] ** 2 - x[..., 0] ** 2
        return out

    def jac_x(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.zeros(shape + (2, 2))
        out[..., 1, 0] = -2.0 * x[..., 0]
        return out

    def jac_u(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.zeros(shape + (2, 1))
        out[..., 0, 0] = 1.0
        out[..., 1, 0] = 2.0 * u[..., 0]
        return out

    def hess(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.zeros(shape + (2, 3, 3))
        out[..., 1, 0, 0] = -2.0
        out[..., 1, 2, 2] = 2.0
        return out

    rows = np.eye(4)[:3] if free_end else np.eye(4)
    return ControlSystem(
        name="example1_free_end" if free_end else "example1",
        n=2,
        r=1,
        dynamics=dyn,
        jac_x=jac_x,
        jac_u=jac_u,
        hess=hess,
        f=EndpointMap.empty(2),
        g=EndpointMap.affine(rows, np.zeros(len(rows))),
        control_set=ControlSet([-np.inf], [np.inf], [[-2.0, 2.0]]),
        params={"T": T},
    )


def _example2(params):
    a = float(params.get("a", -1.0))
    if not a < 1:
        raise ScenarioError("example2 needs a < 1")

    def dyn(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.empty(shape + (2,))
        out[..., 0] = u[..., 0]
        out[..., 1] = u[..., 0] ** 3
        return out

    def jac_x(t, x, u):
        shape, _, _ = _lead(x, u)
        return np.zeros(shape + (2, 2))

    def jac_u(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.zeros(shape + (2, 1))
        out[..., 0, 0] = 1.0
        out[..., 1, 0] = 3.0 * u[..., 0] ** 2
        return out

    def hess(t, x, u):
        shape, x, u = _lead(x, u)
        out = np.zeros(shape + (2, 3, 3))
        out[..., 1, 2, 2] = 6.0 * u[..., 0]
        return out

    margin = 1e-6 * max(1.0, abs(a))
    return ControlSystem(
        name="example2",
        n=2,
        r=1,
        dynamics=dyn,
        jac_x=jac_x,
        jac_u=jac_u,
        hess=hess,
        f=EndpointMap.empty(2),
        g=EndpointMap.affine(np.eye(4), [0.0, 0.0, 1.0, 1.0]),
        control_set=ControlSet([a], [np.inf], [[a + margin, max(3.0, a + 1.0)]]),
        params={"a": a},
    )


def _linear(name, A, B, params):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, r = B.shape

    def dyn(t, x, u):
        return np.asarray(x, dtype=float) @ A.T + np.asarray(u, dtype=float) @ B.T

    def jac_x(t, x, u):
        shape, _, _ = _lead(x, u)
        return np.broadcast_to(A, shape + (n, n)).copy()

    def jac_u(t, x, u):
        shape, _, _ = _lead(x, u)
        return np.broadcast_to(B, shape + (n, r)).copy()

    def hess(t, x, u):
        shape, _, _ = _lead(x, u)
        return np.zeros(shape + (n, n + r, n + r))

    return ControlSystem(
        name=name,
        n=n,
        r=r,
        dynamics=dyn,
        jac_x=jac_x,
        jac_u=jac_u,
        hess=hess,
        f=EndpointMap.empty(n),
        g=EndpointMap.affine(np.eye(2 * n), np.zeros(2 * n)),
        control_set=ControlSet([-np.inf] * r, [np.inf] * r, [[-2.0, 2.0]] * r),
        params=dict(params),
    )


def _double_integrator(params):
    T = float(params.get("T", 1.0))
    return _linear("double_integrator", [[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], {"T": T})


def _uncontrolled_linear(params):
    T = float(params.get("T", 1.0))
    return _linear("uncontrolled_linear", [[1.0]], [[0.0]], {"T": T})


_BUILTINS = {
    "example1": _example1,
    "example1_free_end": lambda params: _example1(params, free_end=True),
    "example2": _example2,
    "double_integrator": _double_integrator,
    "uncontrolled_linear": _uncontrolled_linear,
}
BUILTIN_NAMES = tuple(_BUILTINS)


def build_builtin(name, params=None):
    """Built-in system with exact analytic derivatives.

    ``example1`` takes ``T`` (default 4); ``example1_free_end`` is the same
    model with ``x2(T)`` left free.  ``example2`` takes ``a < 1``
    (default -1); the linear test systems take an optional horizon ``T``.
    """
    try:
        maker = _BUILTINS[name]
    except KeyError:
        raise ScenarioError(f"unknown built-in system {name!r}; choose from {BUILTIN_NAMES}") from None
    return maker(dict(params or {}))


# --------------------------------------------------------------------------
# expression-defined systems


def _num(value, params, what):
    """A number, or an expression over scenario parameters."""
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("inf", "+inf", "infinity"):
            return math.inf
        if low in ("-inf", "-infinity"):
            return -math.inf
        try:
            return float(parse_expression(value, allowed=params)(**params))
        except ExpressionError as exc:
            raise ScenarioError(f"{what}: {exc}") from exc
    if value is None:
        raise ScenarioError(f"{what}: missing value")
    return float(value)


def _compile_list(exprs, allowed, params, what):
    out = []
    for i, text in enumerate(exprs):
        try:
            out.append(parse_expression(text, allowed=set(allowed) | set(params)))
        except ExpressionError as exc:
            raise ScenarioError(f"{what}[{i}]: {exc}") from exc
    return out


def _vector_oracle(compiled, names_of, params):
    """Build ``(..., k) -> (..., m)`` from compiled scalar expressions."""

    def fun(*arrays):
        env, shape = names_of(*arrays)
        env.update(params)
        vals = [np.broadcast_to(np.asarray(e(**env), dtype=float), shape) for e in compiled]
        if not vals:
            return np.zeros(shape + (0,))
        return np.stack(vals, axis=-1)

    return fun


def parse_system(config, params=None):
    """Build a :class:`ControlSystem` from a scenario mapping (or JSON text).

    ``config`` is either a whole scenario (with a ``system`` key) or just the
    ``system`` block merged with ``endpoints``.  A ``system.builtin`` entry
    selects a built-in model instead of expressions.  Derivatives of
    expression systems are central finite differences.
    """
    if isinstance(config, str):
        config = json.loads(config)
    params = {k: float(v) for k, v in dict(params or config.get("params", {})).items()}
    sysblock = config.get("system", config)
    endpoints = config.get("endpoints", sysblock.get("endpoints", {}))

    if "builtin" in sysblock:
        merged = dict(params)
        merged.update(sysblock.get("params", {}))
        return build_builtin(sysblock["builtin"], merged)

    try:
        n = int(sysblock["n"])
        r = int(sysblock["r"])
        dyn_exprs = list(sysblock["dynamics"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"system block needs n, r and dynamics ({exc})") from exc
    if n < 1 or r < 1:
        raise ScenarioError("system: n and r must be positive")
    if len(dyn_exprs) != n:
        raise ScenarioError(f"system: {len(dyn_exprs)} dynamics expressions for n={n}")

    cs = sysblock.get("control_set", {})
    lower = [_num(v, params, "control_set.lower") for v in cs.get("lower", ["-inf"] * r)]
    upper = [_num(v, params, "control_set.upper") for v in cs.get("upper", ["inf"] * r)]
    if len(lower) != r or len(upper) != r:
        raise ScenarioError("control_set: lower/upper must have r entries")
    if "test_window" in cs:
        window = [[_num(a, params, "test_window"), _num(b, params, "test_window")] for a, b in cs["test_window"]]
    else:
        window = []
        for lo, hi in zip(lower, upper):
            a = lo + 1e-6 * max(1.0, abs(lo)) if math.isfinite(lo) else -2.0
            b = hi - 1e-6 * max(1.0, abs(hi)) if math.isfinite(hi) else 2.0
            window.append([a, b])
    if len(window) != r:
        raise ScenarioError("control_set: test_window must have r rows")
    control_set = ControlSet(lower, upper, window)

    xnames = [f"x{i + 1}" for i in range(n)]
    unames = [f"u{i + 1}" for i in range(r)]
    znames = [f"z{i + 1}" for i in range(2 * n)]
    dyn_c = _compile_list(dyn_exprs, ["t"] + xnames + unames, params, "dynamics")
    f_c = _compile_list(endpoints.get("f", []), znames, params, "endpoints.f")
    g_c = _compile_list(endpoints.get("g", []), znames, params, "endpoints.g")

    def dyn_env(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], t.shape)
        env = {"t": t}
        env.update({nm: x[..., i] for i, nm in enumerate(xnames)})
        env.update({nm: u[..., i] for i, nm in enumerate(unames)})
        return env, shape

    def z_env(z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != 2 * n:
            raise ScenarioError(f"endpoint argument must have 2n={2 * n} entries")
        return {nm: z[..., i] for i, nm in enumerate(znames)}, z.shape[:-1]

    dynamics = _vector_oracle(dyn_c, dyn_env, params)
    f_val = _vector_oracle(f_c, z_env, params)
    g_val = _vector_oracle(g_c, z_env, params)

    bounds = sysblock.get("state_bounds")
    if bounds is not None:
        bounds = (
            np.array([_num(v, params, "state_bounds") for v in bounds[0]]),
            np.array([_num(v, params, "state_bounds") for v in bounds[1]]),
        )
    return _fd_system(
        sysblock.get("name", "scenario"),
        n,
        r,
        dynamics,
        (f_val, len(f_c)),
        (g_val, len(g_c)),
        control_set,
        state_bounds=bounds,
        params=params,
    )


def compile_endpoint_expression(texts, n, params=None):
    """Endpoint map from expressions in ``z1..z2n`` with FD derivatives."""
    params = dict(params or {})
    znames = [f"z{i + 1}" for i in range(2 * n)]
    compiled = _compile_list(list(texts), znames, params, "cost")

    def z_env(z):
        z = np.asarray(z, dtype=float)
        return {nm: z[..., i] for i, nm in enumerate(znames)}, z.shape[:-1]

    value = _vector_oracle(compiled, z_env, params)
    return EndpointMap(len(compiled), value, lambda z: fd_jacobian(value, z), lambda z: fd_hessian(value, z))


# --------------------------------------------------------------------------
# derivative verification


@dataclass
class DerivativeReport:
    errors: dict
    first_order_tol: float
    second_order_tol: float

    @property
    def flagged(self):
        out = {}
        for block, err in self.errors.items():
            tol = self.second_order_tol if "hess" in block else self.first_order_tol
            out[block] = err > tol
        return out

    @property
    def ok(self):
        return not any(self.flagged.values())


def _relerr(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric).reshape(analytic.shape[0], -1).max(axis=1)
    scale = np.maximum(1.0, np.abs(numeric).reshape(numeric.shape[0], -1).max(axis=1))
    return float(np.max(diff / scale))


def _box_samples(rng, bounds, dim, count):
    if bounds is None:
        lo, hi = -np.ones(dim), np.ones(dim)
    else:
        lo = np.where(np.isfinite(bounds[0]), bounds[0], -1.0)
        hi = np.where(np.isfinite(bounds[1]), bounds[1], 1.0)
    return lo + (hi - lo) * rng.random((count, dim))


def verify_derivatives(system, samples=100, seed=0, t_range=(0.0, 1.0), first_tol=1e-6, second_tol=1e-4):
    """Compare the system's derivative oracles against central differences.

    Points are drawn in the state box (``[-1, 1]^n`` when undeclared), the
    control test window, and ``t_range``.  Returns the worst relative error
    per block; blocks above tolerance are reported by ``flagged``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    n, r = system.n, system.r
    x = _box_samples(rng, system.state_bounds, n, samples)
    win = system.control_set.test_window
    u = win[:, 0] + (win[:, 1] - win[:, 0]) * rng.random((samples, r))
    t = t_range[0] + (t_range[1] - t_range[0]) * rng.random(samples)
    zb = None
    if system.state_bounds is not None:
        zb = (np.tile(system.state_bounds[0], 2), np.tile(system.state_bounds[1], 2))
    z = _box_samples(rng, zb, 2 * n, samples)

    w = np.concatenate([x, u], axis=-1)
    errors = {
        "jac_x": _relerr(system.jac_x(t, x, u), fd_jacobian(lambda xx: system.dynamics(t, xx, u), x)),
        "jac_u": _relerr(system.jac_u(t, x, u), fd_jacobian(lambda uu: system.dynamics(t, x, uu), u)),
        "hess": _relerr(system.hess(t, x, u), fd_hessian(_wrap_w(system.dynamics, n, t), w)),
    }
    for label, emap in (("f", system.f), ("g", system.g)):
        if emap.dim == 0:
            errors[f"{label}_jac"] = 0.0
            errors[f"{label}_hess"] = 0.0
            continue
        errors[f"{label}_jac"] = _relerr(emap.jac(z), fd_jacobian(emap.value, z))
        errors[f"{label}_hess"] = _relerr(emap.hess(z), fd_hessian(emap.value, z))
    return DerivativeReport(errors, first_tol, second_tol)
