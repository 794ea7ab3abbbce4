"""Scenario files: a system, a reference process on a grid, and settings.

A scenario is a JSON object::

    {
      "name": "example1",
      "params": {"T": 4.0},
      "system": {"builtin": "example1"},          # or an expression block
      "grid": {"t0": 0, "t1": "T", "N": 200},
      "reference": {"x0": [0, 0], "u": ["0"]},    # u(t) expressions or "u_samples"
      "cost": "z4",                                # optional, for optimality checks
      "tolerances": {"hamiltonian": 1e-9, "lattice_points": 101}
    }

Numbers anywhere in ``grid`` and ``reference.x0`` may be expressions over
the parameters.  Built-in systems come with a default grid and reference.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .expr import ExpressionError, parse_expression
from .system import ScenarioError, compile_endpoint_expression, parse_system
from .trajectory import Grid, IntegrationError, simulate

__all__ = ["Scenario", "load_scenario", "builtin_scenario", "DEFAULT_TOLERANCES", "BUILTIN_REFERENCES"]

DEFAULT_TOLERANCES = {
    "hamiltonian": 1e-9,
    "lattice_points": 101,
    "dynamics": 1e-8,
    "endpoints": 1e-8,
}

# default horizon, initial state and reference control of the built-in systems
BUILTIN_REFERENCES = {
    "example1": {"t1": "T", "x0": [0, 0], "u": ["0"], "params": {"T": 4.0}},
    "example1_free_end": {"t1": "T", "x0": [0, 0], "u": ["0"], "params": {"T": 4.0}},
    "example2": {"t1": 1.0, "x0": [0, 0], "u": ["1"], "params": {"a": -1.0}},
    "double_integrator": {"t1": "T", "x0": [0, 0], "u": ["0"], "params": {"T": 1.0}},
    "uncontrolled_linear": {"t1": "T", "x0": [0], "u": ["0"], "params": {"T": 1.0}},
}


@dataclass
class Scenario:
    name: str
    params: dict
    system: object
    grid: Grid
    process: object
    config: dict
    cost: object | None = None
    cost_text: str | None = None
    tolerances: dict = field(default_factory=dict)

    def with_params(self, **overrides):
        cfg = copy.deepcopy(self.config)
        cfg.setdefault("params", {}).update({k: float(v) for k, v in overrides.items()})
        return load_scenario(cfg)


def _value(v, params, what):
    if isinstance(v, str):
        try:
            return float(parse_expression(v, allowed=set(params))(**params))
        except ExpressionError as exc:
            raise ScenarioError(f"{what}: {exc}") from exc
    try:
        return float(v)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{what}: expected a number, got {v!r}") from exc


def _reference_controls(ref, params, grid, r):
    if "u_samples" in ref:
        u = np.asarray(ref["u_samples"], dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape != (grid.N, r):
            raise ScenarioError(f"reference.u_samples must be {grid.N} x {r} (got {u.shape})")
        return u
    texts = ref.get("u", ["0"] * r)
    if isinstance(texts, str):
        texts = [texts]
    if len(texts) != r:
        raise ScenarioError(f"reference.u needs {r} expressions")
    t = grid.times[:-1] + 0.5 * grid.dt
    cols = []
    for i, text in enumerate(texts):
        try:
            e = parse_expression(str(text), allowed={"t"} | set(params))
        except ExpressionError as exc:
            raise ScenarioError(f"reference.u[{i}]: {exc}") from exc
        cols.append(np.broadcast_to(np.asarray(e(t=t, **params), dtype=float), t.shape))
    return np.stack(cols, axis=1)


def load_scenario(source, params=None, grid_n=None):
    """Build a :class:`Scenario` from a path, JSON text or mapping.

    ``params`` overrides the scenario's parameters; ``grid_n`` its grid size.
    """
    if isinstance(source, dict):
        config = copy.deepcopy(source)
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            try:
                with open(text) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ScenarioError(f"cannot read scenario: {exc}") from exc
        try:
            config = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(config, dict) or "system" not in config:
        raise ScenarioError("scenario needs a 'system' block")

    sysblock = config["system"]
    defaults = BUILTIN_REFERENCES.get(sysblock.get("builtin"), {}) if isinstance(sysblock, dict) else {}
    merged = dict(defaults.get("params", {}))
    merged.update(config.get("params", {}))
    merged.update(params or {})
    try:
        merged = {k: float(v) for k, v in merged.items()}
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"params must be numbers ({exc})") from exc
    config["params"] = merged

    system = parse_system(config, merged)

    gblock = dict(config.get("grid", {}))
    t0 = _value(gblock.get("t0", 0.0), merged, "grid.t0")
    t1 = _value(gblock.get("t1", defaults.get("t1", 1.0)), merged, "grid.t1")
    N = int(grid_n if grid_n is not None else gblock.get("N", 200))
    if not t1 > t0:
        raise ScenarioError("grid: need t1 > t0")
    if N < 2:
        raise ScenarioError("grid: N must be at least 2")
    grid = Grid(t0, t1, N)

    ref = dict(defaults)
    ref.update(config.get("reference", {}))
    x0 = np.array([_value(v, merged, "reference.x0") for v in ref.get("x0", [0.0] * system.n)])
    if x0.shape != (system.n,):
        raise ScenarioError(f"reference.x0 must have {system.n} entries")
    u = _reference_controls(ref, merged, grid, system.r)
    try:
        process = simulate(system, x0, u, grid)
    except IntegrationError as exc:
        raise ScenarioError(f"reference simulation failed: {exc}") from exc

    cost = cost_text = None
    if config.get("cost"):
        cost_text = str(config["cost"])
        cost = compile_endpoint_expression([cost_text], system.n, merged)

    tol = dict(DEFAULT_TOLERANCES)
    tol.update(config.get("tolerances", {}))
    return Scenario(config.get("name", system.name), merged, system, grid, process, config, cost, cost_text, tol)


def builtin_scenario(name, grid_n=200, **params):
    """Scenario for a built-in system with its default reference process."""
    return load_scenario({"name": name, "system": {"builtin": name}, "params": params, "grid": {"N": grid_n}})
