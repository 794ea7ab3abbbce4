import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loccontrol.corrector import (
    ChatteringControl,
    RegularityError,
    build_corrector_problem,
    build_right_inverse,
    chattering_bound,
    chattering_error,
    mix_controls,
    probe_reachability,
    reach_target,
    verify_steering,
)
from loccontrol.kernel import sample_cone
from loccontrol.scenario import builtin_scenario
from loccontrol.secondorder import certificate_search
from loccontrol.trajectory import Grid, simulate, simulate_relaxed


@pytest.fixture(scope="module")
def steer_setup():
    sc = builtin_scenario("example1", grid_n=200, T=4.0)
    from loccontrol.kernel import build_kernel_cone
    from loccontrol.multipliers import lambda_max_set

    cone = lambda_max_set(sc.system, sc.process)
    K = build_kernel_cone(sc.system, sc.process)
    cert = certificate_search(sc.system, sc.process, K, cone)
    prob = build_corrector_problem(sc.system, sc.process, cert.witness)
    rinv = build_right_inverse(prob, seed=0)
    return sc, prob, rinv


def test_problem_invariants(steer_setup):
    sc, prob, _ = steer_setup
    assert np.max(np.abs(prob.G0)) <= 1e-12
    assert np.linalg.norm(prob.q) == pytest.approx(1.0)
    assert np.max(np.abs(prob.Gp @ prob.q)) <= 1e-8
    # G'' along the certificate direction: only the x2(T) row sees the quadratic part
    assert abs(prob.Gqq[3]) > 1e-3
    np.testing.assert_allclose(prob.Gqq[:3], 0, atol=1e-6)


def test_Gp_matches_finite_differences(steer_setup, rng):
    _, prob, _ = steer_setup
    base = prob.w_hat.copy()
    # alpha columns are one-sided (alpha >= 0); test them with forward steps
    for _ in range(5):
        d = rng.normal(size=base.size)
        d[prob.alpha_index] = np.abs(d[prob.alpha_index])
        e = 1e-6
        fd = (prob.G(base + e * d) - prob.G(base)) / e
        np.testing.assert_allclose(fd, prob.Gp @ d, atol=1e-4 * max(1.0, np.linalg.norm(d)))


def test_right_inverse(steer_setup, rng):
    _, prob, rinv = steer_setup
    A = rinv.matrix
    ratios = []
    for _ in range(100):
        z = rng.normal(size=A.shape[0])
        R1, R2 = rinv(z)
        assert R2 >= 0
        assert np.all(R1[prob.alpha_index] >= 0)
        np.testing.assert_allclose(A @ np.concatenate([R1, [R2]]), z, atol=1e-9 * max(1, np.linalg.norm(z)))
        ratios.append((np.linalg.norm(R1) + R2) / np.linalg.norm(z))
    assert np.isfinite(rinv.gamma) and rinv.kappa == pytest.approx(np.sqrt(8 * rinv.gamma))
    # gamma is a sampled estimate; fresh samples stay near it
    assert max(ratios) <= 1.1 * rinv.gamma
    R1, R2 = rinv(np.zeros(A.shape[0]))
    assert not np.any(R1) and R2 == 0.0


def test_right_inverse_homogeneous(steer_setup, rng):
    _, _, rinv = steer_setup
    z = rng.normal(size=rinv.matrix.shape[0])
    R1, R2 = rinv(z)
    S1, S2 = rinv(3.0 * z)
    a, b = np.append(R1, R2), np.append(S1, S2)
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-8, atol=1e-12)


def test_regularity_failure_T3():
    sc = builtin_scenario("example1", grid_n=100, T=3.0)
    from loccontrol.kernel import build_kernel_cone

    K = build_kernel_cone(sc.system, sc.process)
    prob = build_corrector_problem(sc.system, sc.process, sample_cone(K, 1, seed=0)[0])
    with pytest.raises(RegularityError) as err:
        build_right_inverse(prob)
    assert err.value.direction is not None


def test_zero_target(steer_setup):
    sc, prob, rinv = steer_setup
    res = reach_target(prob, rinv, np.zeros(4))
    assert res.converged and res.iterations == 0 and res.deviation == 0.0
    np.testing.assert_array_equal(res.states, sc.process.x)


def test_reach_delta_e3(steer_setup):
    sc, prob, rinv = steer_setup
    y = np.array([0.0, 0.0, 1e-4, 0.0])
    res = reach_target(prob, rinv, y)
    assert res.converged and not res.left_trust_ball
    chk = verify_steering(prob, res)
    assert chk["ok"] and chk["g_residual"] <= 1e-8 and chk["dynamics_defect"] <= 1e-8
    assert res.deviation <= rinv.kappa * 1e-2
    d = res.to_dict()
    assert set(d) >= {"y", "iterations", "deviation", "kappa_empirical", "converged"}


@pytest.mark.parametrize("y", [[0, 0, 0, -1e-4], [0, -3e-5, 0, -1e-4], [2e-5, 0, 0, 1e-5]])
def test_reach_monotone_residual(steer_setup, y):
    _, prob, rinv = steer_setup
    res = reach_target(prob, rinv, np.array(y, dtype=float))
    assert res.converged and verify_steering(prob, res)["ok"]
    h = res.history[3:]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


def test_reach_rejects_large_target(steer_setup):
    _, prob, rinv = steer_setup
    with pytest.raises(ValueError):
        reach_target(prob, rinv, np.array([0, 0, 0, 0.1]))
    with pytest.raises(ValueError):
        reach_target(prob, rinv, np.zeros(3))


def test_sqrt_law_short(steer_setup):
    _, prob, rinv = steer_setup
    mags = np.array([1e-3, 1e-4, 1e-5])
    devs = [reach_target(prob, rinv, np.array([0, 0, 0, -m])).deviation for m in mags]
    slope = np.polyfit(np.log(mags), np.log(devs), 1)[0]
    assert 0.4 <= slope <= 0.6


def ex1(N=20, T=4.0):
    sc = builtin_scenario("example1", grid_n=N, T=T)
    return sc.system, Grid(0.0, T, N)


def test_mix_zero_weight():
    s, grid = ex1()
    u0 = np.full((grid.N, 1), 0.3)
    ch = mix_controls([u0, np.ones((grid.N, 1))], [0.0], 3, grid)
    assert isinstance(ch, ChatteringControl)
    assert np.all(ch.values[ch.durations > 0] == 0.3)
    np.testing.assert_allclose(ch.breakpoints[-1], grid.t1)
    nodes = ch.simulate(s, [0.0, 0.0])[2]
    np.testing.assert_allclose(nodes, simulate(s, [0.0, 0.0], u0, grid).x, atol=1e-12)


def test_mix_weight_errors():
    _, grid = ex1()
    cs = [np.zeros((grid.N, 1))] * 3
    with pytest.raises(ValueError):
        mix_controls(cs, [0.7, 0.4], 2, grid)
    with pytest.raises(ValueError):
        mix_controls(cs, [-0.1, 0.4], 2, grid)
    with pytest.raises(ValueError):
        mix_controls(cs[:2], [0.5, 0.2], 2, grid)


def test_chattering_ratio():
    s, grid = ex1()
    cs = [np.zeros((grid.N, 1)), np.ones((grid.N, 1))]
    errs = [chattering_error(s, [0.0, 0.0], cs, [0.5], grid, d) for d in range(1, 6)]
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.all((ratios >= 0.4) & (ratios <= 0.6)), ratios
    for d in (1, 3):
        b = chattering_bound(s, [0.0, 0.0], cs, [0.5], grid, d)
        assert errs[d - 1] <= b["bound"]


def test_relaxed_oracle():
    # the relaxed field of (0, 1) at 1/2 is (1/2, 1/2 - x1^2); x1 = t/2, x2 = t/2 - t^3/12
    s, grid = ex1(N=40)
    x = simulate_relaxed(s, [0.0, 0.0], [np.zeros((40, 1)), np.ones((40, 1))], [0.5], grid)
    t = grid.times
    np.testing.assert_allclose(x[:, 0], t / 2, atol=1e-12)
    np.testing.assert_allclose(x[:, 1], t / 2 - t**3 / 12, atol=1e-10)


def l1_distance(a, b, t1, samples=200_001):
    ts = np.linspace(0, t1, samples)[:-1] + 0.5 * t1 / samples

    def at(ch):
        idx = np.searchsorted(ch.breakpoints, ts, side="right") - 1
        return ch.values[np.clip(idx, 0, len(ch.values) - 1)]

    return float(np.mean(np.abs(at(a) - at(b))) * t1)


@given(st.floats(0.0, 0.9), st.floats(1e-4, 0.05))
def test_mix_continuity(alpha, delta):
    _, grid = ex1(N=8)
    cs = [np.zeros((grid.N, 1)), np.ones((grid.N, 1))]
    a = mix_controls(cs, [alpha], 2, grid)
    b = mix_controls(cs, [min(alpha + delta, 0.95)], 2, grid)
    assert l1_distance(a, b, grid.t1) <= 1.01 * grid.t1 * delta + 1e-3


def test_mix_per_step_weights():
    s, grid = ex1()
    w = np.linspace(0, 0.8, grid.N)[:, None]
    cs = [np.zeros((grid.N, 1)), np.ones((grid.N, 1))]
    nodes = mix_controls(cs, w, 6, grid).simulate(s, [0.0, 0.0])[2]
    relaxed = simulate_relaxed(s, [0.0, 0.0], cs, w, grid)
    assert np.max(np.abs(nodes - relaxed)) <= 2e-2


def test_probe_zero_shift():
    sc = builtin_scenario("example2", grid_n=100, a=-1.0)
    res = probe_reachability(sc.system, sc.process, np.zeros(4), budget=50, seed=0)
    assert res.best_residual == 0.0
    assert res.evaluations <= 50


def test_probe_upward_small_budget():
    sc = builtin_scenario("example2", grid_n=50, a=-1.0)
    target = np.array([0, 0, 0, 1e-2])
    res = probe_reachability(sc.system, sc.process, target, budget=600, seed=1)
    assert res.best_residual <= 1e-6
    d = res.to_dict()
    assert d["best_residual"] == res.best_residual


def test_sqrt_law_grid_stable():
    from loccontrol.analysis import run_analysis

    slopes = []
    mags = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    for N in (200, 400):
        an = run_analysis(builtin_scenario("example1", grid_n=N, T=4.0))
        sc = an.scenario
        prob = build_corrector_problem(sc.system, sc.process, an.certificate.witness, lin=an.lin)
        rinv = build_right_inverse(prob)
        devs = [reach_target(prob, rinv, np.array([0, 0, 0, -m])).deviation for m in mags]
        slopes.append(np.polyfit(np.log(mags), np.log(devs), 1)[0])
    assert abs(slopes[0] - slopes[1]) <= 0.05
