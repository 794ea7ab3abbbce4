import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loccontrol.system import (
    BUILTIN_NAMES,
    ControlSet,
    EndpointMap,
    ScenarioError,
    build_builtin,
    compile_endpoint_expression,
    parse_system,
    verify_derivatives,
)

EX1_EXPR = {
    "system": {"n": 2, "r": 1, "dynamics": ["u1", "u1^2 - x1^2"], "control_set": {"test_window": [[-2, 2]]}},
    "endpoints": {"g": ["z1", "z2", "z3", "z4"]},
}
EX2_EXPR = {
    "params": {"a": -1.0},
    "system": {
        "n": 2,
        "r": 1,
        "dynamics": ["u1", "u1^3"],
        "control_set": {"lower": ["a"], "upper": ["inf"], "test_window": [["a + 1e-6", 3]]},
    },
    "endpoints": {"g": ["z1", "z2", "z3 - 1", "z4 - 1"]},
}


def test_example1_shape():
    s = build_builtin("example1", {"T": 4})
    assert (s.n, s.r, s.m1, s.m2) == (2, 1, 0, 4)
    np.testing.assert_allclose(s.dynamics(0.0, np.array([0.5, 0.0]), np.array([2.0])), [2.0, 3.75])


def test_example2_endpoints_and_bounds():
    s = build_builtin("example2", {"a": -3})
    assert s.control_set.lower[0] == -3 and s.control_set.upper[0] == np.inf
    z = np.array([0.0, 0.0, 1.0, 1.0])
    np.testing.assert_allclose(s.g.value(z), 0.0)
    np.testing.assert_allclose(s.g.value(np.array([0.1, 0.2, 0.3, 0.4])), [0.1, 0.2, -0.7, -0.6])


def test_double_integrator():
    s = build_builtin("double_integrator")
    np.testing.assert_allclose(s.dynamics(0.0, np.array([1.0, 2.0]), np.array([3.0])), [2.0, 3.0])
    assert s.m2 == 4


def test_builtin_errors():
    with pytest.raises(ScenarioError):
        build_builtin("example2", {"a": 1.0})
    with pytest.raises(ScenarioError):
        build_builtin("nope")


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtin_derivatives(name):
    rep = verify_derivatives(build_builtin(name), samples=100, seed=1)
    for block, err in rep.errors.items():
        assert err <= (1e-4 if "hess" in block else 1e-6), block
    assert rep.ok


def test_wrong_jacobian_flagged():
    s = build_builtin("example1")
    bad = dataclasses.replace(s, jac_x=lambda t, x, u: s.jac_x(t, x, u) + 0.05)
    rep = verify_derivatives(bad, samples=10, seed=1)
    assert rep.errors["jac_x"] >= 1e-2
    assert rep.flagged["jac_x"] and not rep.ok


def test_constant_dynamics_derivatives():
    s = parse_system({"system": {"n": 2, "r": 1, "dynamics": ["1.5", "-2"]}})
    rep = verify_derivatives(s, samples=5, seed=1)
    assert max(rep.errors.values()) <= 1e-9
    np.testing.assert_allclose(s.jac_x(0.0, np.zeros(2), np.zeros(1)), 0.0, atol=1e-9)


def test_parsed_example1_jacobians():
    s = parse_system(EX1_EXPR)
    x, u = np.array([0.3, 0.0]), np.array([0.2])
    np.testing.assert_allclose(s.jac_x(0.0, x, u), [[0, 0], [-0.6, 0]], atol=1e-6)
    np.testing.assert_allclose(s.jac_u(0.0, x, u), [[1], [0.4]], atol=1e-6)
    ref = build_builtin("example1")
    np.testing.assert_allclose(s.hess(0.0, x, u), ref.hess(0.0, x, u), atol=1e-4)


@pytest.mark.parametrize("cfg, name", [(EX1_EXPR, "example1"), (EX2_EXPR, "example2")])
def test_parsed_values_match_builtin(cfg, name, rng):
    s = parse_system(cfg)
    ref = build_builtin(name, cfg.get("params"))
    x = rng.normal(size=(100, 2))
    u = rng.uniform(-0.9, 2.0, size=(100, 1))
    t = rng.uniform(0, 1, size=100)
    np.testing.assert_allclose(s.dynamics(t, x, u), ref.dynamics(t, x, u), rtol=1e-12, atol=1e-12)
    z = rng.normal(size=(100, 4))
    np.testing.assert_allclose(s.g.value(z), ref.g.value(z), rtol=1e-12, atol=1e-12)


def test_parsed_double_integrator():
    s = parse_system({"system": {"n": 2, "r": 1, "dynamics": ["x2", "u1"]}})
    ref = build_builtin("double_integrator")
    np.testing.assert_allclose(s.jac_x(0, np.ones(2), np.ones(1)), ref.jac_x(0, np.ones(2), np.ones(1)), atol=1e-8)


@pytest.mark.parametrize(
    "cfg",
    [
        {"system": {"n": 2, "r": 1, "dynamics": ["u1 +* x1", "0"]}},
        {"system": {"n": 2, "r": 1, "dynamics": ["u1"]}},
        {"system": {"n": 1, "r": 1, "dynamics": ["y1"]}},
        {"system": {"n": 1, "r": 1, "dynamics": ["u1"], "control_set": {"lower": [1], "upper": [0]}}},
        {"system": {"n": 1, "r": 1}},
    ],
)
def test_parse_errors(cfg):
    with pytest.raises(ScenarioError):
        parse_system(cfg)


def test_parse_error_reports_offset():
    with pytest.raises(ScenarioError, match="offset 4"):
        parse_system({"system": {"n": 2, "r": 1, "dynamics": ["u1 +* x1", "0"]}})


def test_control_set_open():
    cs = ControlSet([-1.0], [2.0], [[-0.5, 1.5]])
    assert cs.contains(np.array([0.0]))
    assert not cs.contains(np.array([-1.0]))
    assert not cs.contains(np.array([2.0]))
    with pytest.raises(ScenarioError):
        ControlSet([-1.0], [2.0], [[-1.0, 1.5]])
    assert cs.lattice(101).shape == (101, 1)


@given(st.floats(-1, 2, exclude_min=True, exclude_max=True))
def test_control_set_interior(u):
    assert ControlSet([-1.0], [2.0], [[-0.5, 1.5]]).contains(np.array([u]))


def test_second_derivatives_symmetric(rng):
    for name in BUILTIN_NAMES:
        s = build_builtin(name)
        H = s.hess(0.0, rng.normal(size=(5, s.n)), rng.normal(size=(5, s.r)) * 0.1 + 0.5)
        np.testing.assert_array_equal(H, np.swapaxes(H, -1, -2))
    s = parse_system(EX1_EXPR)
    H = s.hess(0.0, rng.normal(size=(5, 2)), rng.normal(size=(5, 1)))
    np.testing.assert_allclose(H, np.swapaxes(H, -1, -2), atol=1e-14)


def test_endpoint_maps():
    c = compile_endpoint_expression(["z1*z4 + z2^2"], 2)
    z = np.array([1.0, 2.0, 3.0, 4.0])
    assert c.value(z)[0] == pytest.approx(8.0)
    np.testing.assert_allclose(c.jac(z)[0], [4, 4, 0, 1], atol=1e-6)
    st_ = c.stacked(EndpointMap.affine(np.eye(4)[:1], [1.0]))
    assert st_.dim == 2 and st_.value(z)[1] == pytest.approx(0.0)
    assert c.shifted(8.0).value(z)[0] == pytest.approx(0.0)
    np.testing.assert_allclose(EndpointMap.empty(2).jac(z).shape, (0, 4))
