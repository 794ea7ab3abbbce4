"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured numbers.
Run ``pytest tests/test_acceptance.py -v -s`` to see them, or execute this
file directly for the summary lines alone.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from loccontrol.analysis import run_analysis
from loccontrol.corrector import (
    build_corrector_problem,
    build_right_inverse,
    chattering_error,
    probe_reachability,
    reach_target,
    verify_steering,
)
from loccontrol.kernel import sample_cone
from loccontrol.multipliers import lambda_max_set, make_tuple, multiplier_subspace, singularity_check
from loccontrol.scenario import builtin_scenario, load_scenario
from loccontrol.secondorder import assemble_Q, evaluate_Q
from loccontrol._linalg import subspace_distance
from loccontrol.trajectory import Grid

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    print(line)
    return ok


def criterion_1():
    start = time.perf_counter()
    Ts = np.linspace(2.9, 3.4, 26)
    eig = []
    for T in Ts:
        an = run_analysis(load_scenario(SCEN / "example1.json", params={"T": float(T)}, grid_n=400))
        eig.append(an.certificate.min_restricted_eig)
    elapsed = time.perf_counter() - start
    signs = np.sign(eig)
    flips = np.flatnonzero(np.diff(signs))
    ok = len(flips) == 1
    detail = f"{len(flips)} sign change(s), {elapsed:.1f} s"
    if ok:
        lo, hi = Ts[flips[0]], Ts[flips[0] + 1]
        ok = lo <= np.pi <= hi and hi - lo <= 0.05 and elapsed <= 30
        detail = f"sign change in [{lo:.3f}, {hi:.3f}], {elapsed:.1f} s"
    return report(1, "example1 threshold at T = pi", ok, detail)


def criterion_2():
    an4 = run_analysis(load_scenario(SCEN / "example1.json", params={"T": 4.0}))
    an3 = run_analysis(load_scenario(SCEN / "example1.json", params={"T": 3.0}))
    sc = an4.scenario
    gen = an4.cone.generators[0]
    tup = make_tuple(sc.system, sc.process, gen.lam / abs(gen.costate.p[0, 1]))
    K = an4.kernel
    t = sc.grid.times
    v = np.diff(np.sin(np.pi * t / 4.0)) / sc.grid.dt
    q = K.variation(K.coords(np.zeros(2), v[:, None]))
    val = assemble_Q(sc.system, sc.process, tup, K).value(q.coords)
    target = np.pi**2 / 4 - 4
    ok = (
        an4.verdict == "CONTROLLABLE"
        and an4.certificate.witness is not None
        and an3.verdict == "NOT_CERTIFIED"
        and abs(val - target) <= 5e-3
    )
    return report(2, "example1 verdicts and closed-form Q", ok, f"T=4 {an4.verdict}, T=3 {an3.verdict}, Q(mode) = {val:.5f} vs {target:.5f}")


def criterion_3():
    ok = True
    parts = []
    an = run_analysis(load_scenario(SCEN / "example2.json", params={"a": -3.0}))
    ok &= an.cone.is_empty and an.verdict == "LINEARLY_CONTROLLABLE"
    parts.append(f"a=-3 {an.verdict}")
    for a in (-2.0, -1.0):
        an = run_analysis(load_scenario(SCEN / "example2.json", params={"a": a}))
        sc, cone = an.scenario, an.cone
        ok &= len(cone.generators) == 1 and cone.order == 1 and not an.singular.singular
        ok &= an.verdict == "NOT_CERTIFIED"
        g = cone.generators[0]
        p0 = g.costate.p[0]
        ok &= bool(np.allclose(g.costate.p / p0[0], [1.0, -1.0 / 3.0], atol=1e-10))
        tup = make_tuple(sc.system, sc.process, g.lam / p0[0])
        worst = 0.0
        for qq in sample_cone(an.kernel, 20, seed=0):
            val = evaluate_Q(sc.system, sc.process, tup, qq)[0]
            ref = 2.0 * np.sum(qq.v**2) * sc.grid.dt
            worst = max(worst, abs(val - ref) / ref)
            ok &= val >= 0
        ok &= worst <= 1e-6
        parts.append(f"a={a:g} {an.verdict}, max rel err {worst:.1e}")
    return report(3, "example2 verdicts", bool(ok), "; ".join(parts))


def criterion_4():
    start = time.perf_counter()
    an = run_analysis(load_scenario(SCEN / "example1.json", params={"T": 4.0}))
    sc = an.scenario
    prob = build_corrector_problem(sc.system, sc.process, an.certificate.witness, lin=an.lin)
    rinv = build_right_inverse(prob, seed=0)
    mags = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    devs, resid, conv = [], 0.0, True
    for m in mags:
        res = reach_target(prob, rinv, np.array([0.0, 0.0, 0.0, -m]))
        chk = verify_steering(prob, res)
        conv &= res.converged and chk["ok"]
        resid = max(resid, chk["g_residual"])
        devs.append(res.deviation)
    slope = float(np.polyfit(np.log(mags), np.log(devs), 1)[0])
    elapsed = time.perf_counter() - start
    ok = conv and 0.4 <= slope <= 0.6 and resid <= 1e-7 and elapsed <= 60
    return report(4, "sqrt|y| deviation law", ok, f"slope {slope:.4f}, max residual {resid:.1e}, {elapsed:.1f} s")


def criterion_5():
    sc = builtin_scenario("example1", grid_n=20, T=4.0)
    grid = Grid(0.0, 4.0, 20)
    cs = [np.zeros((20, 1)), np.ones((20, 1))]
    errs = [chattering_error(sc.system, [0.0, 0.0], cs, [0.5], grid, d) for d in range(1, 6)]
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    ok = bool(np.all((ratios >= 0.3) & (ratios <= 0.7)))
    return report(5, "chattering error halves per depth", ok, "ratios " + ", ".join(f"{r:.3f}" for r in ratios))


def criterion_6():
    ok = True
    # double integrator: Kalman rank 2 => no multipliers
    sc = builtin_scenario("double_integrator", grid_n=200)
    A, B = np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]])
    kalman = np.linalg.matrix_rank(np.hstack([B, A @ B])) == 2
    cone = lambda_max_set(sc.system, sc.process)
    sub = multiplier_subspace(sc.system, sc.process)
    ok &= kalman and cone.is_empty and sub.shape[1] == 0 and not singularity_check(sc.system, sc.process, cone).singular
    # x' = x, x(0) = x(T) = 0, B = 0: p(0) = lam_1 and p(T) = -lam_2 with the
    # RK4 amplification p(0) = a^N p(T); every tuple is singular
    sc = builtin_scenario("uncontrolled_linear", grid_n=200)
    dt = sc.grid.dt
    amp = (1 + dt + dt**2 / 2 + dt**3 / 6 + dt**4 / 24) ** sc.grid.N
    hand = np.array([[-amp], [1.0]])
    sub = multiplier_subspace(sc.system, sc.process)
    dist = subspace_distance(sub, hand) if sub.shape[1] == 1 else np.inf
    cone = lambda_max_set(sc.system, sc.process)
    sing = singularity_check(sc.system, sc.process, cone)
    ok &= dist <= 1e-8 and sing.singular and not cone.is_pointed
    return report(6, "linear oracles", bool(ok), f"Kalman rank 2 -> empty; uncontrolled: subspace distance {dist:.1e}, singular {sing.singular}")


def criterion_7():
    sc = builtin_scenario("example2", grid_n=200, a=-1.0)
    low = probe_reachability(sc.system, sc.process, np.array([0, 0, 0, -1e-2]), budget=2000, seed=0)
    high = probe_reachability(sc.system, sc.process, np.array([0, 0, 0, 1e-2]), budget=2000, seed=0)
    ok = low.best_residual >= 9e-3 and high.best_residual <= 1e-6
    return report(7, "example2 reachability probe", ok, f"1-eps residual {low.best_residual:.3e}, 1+eps residual {high.best_residual:.1e}")


PROPERTY_TESTS = [
    "tests/test_system.py::test_builtin_derivatives",
    "tests/test_system.py::test_parsed_example1_jacobians",
    "tests/test_system.py::test_wrong_jacobian_flagged",
    "tests/test_trajectory.py::test_pairing_conservation",
    "tests/test_secondorder.py::test_Q_symmetric",
    "tests/test_secondorder.py::test_polarization_matches_direct",
    "tests/test_secondorder.py::test_Q_value_is_quadratic",
    "tests/test_secondorder.py::test_scaling_covariance",
    "tests/test_multipliers.py::test_scaling_g_invariance",
    "tests/test_multipliers.py::test_generator_scaling",
    "tests/test_cli.py::test_determinism",
]


def criterion_8():
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
        cwd=ROOT,
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - start
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    ok = proc.returncode == 0 and elapsed <= 120
    return report(8, "property suites", ok, f"{last}; {elapsed:.1f} s")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("crit", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 9)])
def test_criterion(crit, capsys):
    ok = crit()
    with capsys.disabled():
        print("\n" + capsys.readouterr().out.strip())
    assert ok


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
