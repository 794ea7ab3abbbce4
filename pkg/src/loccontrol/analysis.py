"""End-to-end analysis pipeline behind the command-line tool.

Verdicts:

- ``LINEARLY_CONTROLLABLE``: the multiplier cone is empty, so the linearised
  endpoint map is onto and first-order steering works.
- ``CONTROLLABLE``: the cone is a single non-singular ray and a kernel-cone
  variation makes the quadratic form negative on it.
- ``NOT_CERTIFIED``: single ray, but the form is nonnegative on the cone;
  the second-order test is silent (this does not mean not controllable).
- ``UNKNOWN``: higher abnormality order, a singular process, or a failed
  heuristic search.

All verdicts are relative to the control test window used for the
Hamiltonian maximum check.
"""

from __future__ import annotations

import concurrent.futures
import datetime
import os

import numpy as np

from . import __version__
from .corrector import (
    RegularityError,
    build_corrector_problem,
    build_right_inverse,
    reach_target,
    verify_steering,
)
from .kernel import build_kernel_cone, sample_cone
from .multipliers import lambda_max_set, make_tuple, singularity_check
from .scenario import load_scenario
from .secondorder import (
    CONTROLLABLE,
    NOT_CERTIFIED,
    UNKNOWN,
    certificate_search,
    check_second_order_necessary,
    evaluate_Q,
    lambda_q_nonempty,
)
from .trajectory import linearize

__all__ = [
    "LINEARLY_CONTROLLABLE",
    "VERDICTS",
    "InadmissibleError",
    "CorrectorFailure",
    "Analysis",
    "run_analysis",
    "analyze",
    "verify_certificate",
    "sweep",
    "steer",
    "check_optimality",
    "to_jsonable",
]

LINEARLY_CONTROLLABLE = "LINEARLY_CONTROLLABLE"
VERDICTS = (CONTROLLABLE, NOT_CERTIFIED, UNKNOWN, LINEARLY_CONTROLLABLE)
LAMBDA_Q_SAMPLES = 20


class InadmissibleError(RuntimeError):
    def __init__(self, residuals):
        super().__init__("reference process is not admissible: " + ", ".join(f"{k}={v}" for k, v in residuals.items()))
        self.residuals = residuals


class CorrectorFailure(RuntimeError):
    pass


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


class Analysis:
    """Intermediate objects of one analysis run (cone, kernel, certificate)."""

    def __init__(self, scenario, lin, cone_desc, singular, kernel, certificate, verdict, reason, lambda_q):
        self.scenario = scenario
        self.lin = lin
        self.cone = cone_desc
        self.singular = singular
        self.kernel = kernel
        self.certificate = certificate
        self.verdict = verdict
        self.reason = reason
        self.lambda_q = lambda_q


def _check_admissible(scenario):
    res = scenario.process.residuals(scenario.system)
    tol = scenario.tolerances
    if not scenario.process.is_admissible(scenario.system, tol["dynamics"], tol["endpoints"]):
        raise InadmissibleError({k: v for k, v in res.items() if k != "f_values"})
    return res


def run_analysis(scenario, seed=0):
    sysm, proc = scenario.system, scenario.process
    _check_admissible(scenario)
    tol = scenario.tolerances
    lin = linearize(sysm, proc)
    desc = lambda_max_set(sysm, proc, tol_ham=tol["hamiltonian"], points_per_axis=int(tol["lattice_points"]), lin=lin)
    sing = singularity_check(sysm, proc, desc, lin=lin)
    kernel = build_kernel_cone(sysm, proc, lin=lin)
    cert = None
    lam_q = None
    if desc.is_empty:
        verdict, reason = LINEARLY_CONTROLLABLE, "multiplier cone is empty"
    elif sing.singular:
        verdict, reason = UNKNOWN, "process is singular"
    elif desc.order != 1:
        verdict, reason = UNKNOWN, f"abnormality order {desc.order}; no second-order decision procedure"
    else:
        cert = certificate_search(sysm, proc, kernel, desc, seed=seed)
        verdict, reason = cert.verdict, cert.reason
        if verdict == NOT_CERTIFIED:
            qs = sample_cone(kernel, LAMBDA_Q_SAMPLES, seed)
            statuses = [lambda_q_nonempty(sysm, proc, q, desc, kernel).status for q in qs]
            lam_q = {
                "samples": len(statuses),
                "nonempty": statuses.count("NONEMPTY"),
                "empty": statuses.count("EMPTY"),
                "unknown": statuses.count("UNKNOWN"),
            }
            if statuses and lam_q["nonempty"] == len(statuses):
                reason = "Λ(q) nonempty for all sampled q"
    return Analysis(scenario, lin, desc, sing, kernel, cert, verdict, reason, lam_q)


def _scenario_echo(scenario):
    return {"name": scenario.name, "params": scenario.params, "config": scenario.config}


def _header(scenario, meta):
    out = {"tool": {"name": "loccontrol", "version": __version__}}
    if meta:
        out["meta"] = {"created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")}
    g = scenario.grid
    out["scenario"] = _scenario_echo(scenario)
    out["grid"] = {"t0": g.t0, "t1": g.t1, "N": g.N}
    out["tolerances"] = dict(scenario.tolerances)
    return out


def analyze(scenario, seed=0, meta=True, q_samples=None):
    """Full analysis report (a JSON-ready dict) for a loaded scenario."""
    an = run_analysis(scenario, seed)
    sysm = scenario.system
    report = _header(scenario, meta)
    report["admissibility"] = {k: v for k, v in scenario.process.residuals(sysm).items()}
    report["cone"] = an.cone.to_dict()
    report["abnormality_order"] = an.cone.order
    report["singular"] = an.singular.singular
    if an.singular.witness is not None:
        report["singular_witness"] = {
            "lam": an.singular.witness.lam.tolist(),
            "constant_fraction": an.singular.constant_fraction,
        }
    report["certificate"] = an.certificate.to_dict() if an.certificate is not None else None
    if an.certificate is not None:
        report["certificate"]["generators"] = [g.lam.tolist() for g in an.cone.generators]
    report["lambda_q"] = an.lambda_q
    report["verdict"] = an.verdict
    report["verdict_reason"] = an.reason
    window = sysm.control_set.test_window.tolist()
    report["notes"] = [f"verdicts are relative to the control test window {window}"] + list(an.cone.notes)
    if scenario.cost is not None:
        opt = check_second_order_necessary(
            sysm,
            scenario.process,
            scenario.cost,
            q_samples=LAMBDA_Q_SAMPLES if q_samples is None else q_samples,
            seed=seed,
            tol_ham=scenario.tolerances["hamiltonian"],
            points_per_axis=int(scenario.tolerances["lattice_points"]),
        )
        report["optimality"] = opt.to_dict()
    return to_jsonable(report)


def verify_certificate(report, scenario):
    """Re-check a serialized certificate without searching again.

    The generators and the witness are read from the report; costates,
    cone residuals and ``Q`` values are recomputed.  Returns the verdict
    those numbers support and the recomputed values.
    """
    cert = report.get("certificate")
    if not cert or cert.get("witness") is None:
        return {"verdict": report.get("verdict"), "checked": False}
    sysm, proc = scenario.system, scenario.process
    lin = linearize(sysm, proc)
    kernel = build_kernel_cone(sysm, proc, lin=lin)
    w = cert["witness"]
    c = kernel.coords(w["h0"], w["v"])
    eq, ineq = kernel.residuals(c)
    q = kernel.variation(c)
    values = []
    for lam in cert["generators"]:
        tup = make_tuple(sysm, proc, lam, lin=lin)
        values.append(evaluate_Q(sysm, proc, tup, q)[0])
    tol_q = float(cert["tol_q"])
    ok = max(eq, ineq) <= 1e-9 and all(v < -tol_q for v in values)
    verdict = CONTROLLABLE if ok else cert["verdict"] if cert["verdict"] != CONTROLLABLE else UNKNOWN
    return {"verdict": verdict, "checked": True, "Q_values": values, "cone_residual": max(eq, ineq)}


# --------------------------------------------------------------------------
# sweeps


def _sweep_row(args):
    config, param, value, grid_n, seed = args
    sc = load_scenario(config, params={param: value}, grid_n=grid_n)
    an = run_analysis(sc, seed)
    eig = an.certificate.min_restricted_eig if an.certificate is not None else None
    return {"param": float(value), "min_eig": eig, "verdict": an.verdict}


def sweep(config, param, lo, hi, steps, grid_n=None, seed=0, workers=1):
    """One analysis per parameter value on ``linspace(lo, hi, steps)``.

    An empty range (``steps < 1`` or ``lo > hi``) yields no rows.
    """
    sc = load_scenario(config, grid_n=grid_n)
    if param not in sc.params:
        raise ValueError(f"unknown parameter {param!r}; declared: {sorted(sc.params)}")
    if steps < 1 or lo > hi:
        return []
    values = np.linspace(lo, hi, steps) if steps > 1 else np.array([lo])
    jobs = [(sc.config, param, float(v), grid_n, seed) for v in values]
    if workers and workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
            return list(pool.map(_sweep_row, jobs))
    return [_sweep_row(j) for j in jobs]


# --------------------------------------------------------------------------
# steering and optimality


def steer(scenario, target, force=False, seed=0, meta=True, **options):
    """Run the analysis, then the corrector toward ``target``.

    Returns ``(report, result, problem)``; raises :class:`CorrectorFailure`
    when the right inverse cannot be built or the iteration diverges, and
    ``ValueError`` when the verdict does not support steering (unless
    ``force``).
    """
    an = run_analysis(scenario, seed)
    report = _header(scenario, meta)
    report["verdict"] = an.verdict
    if an.verdict not in (CONTROLLABLE, LINEARLY_CONTROLLABLE) and not force:
        raise ValueError(f"analysis verdict is {an.verdict}; use --force to steer anyway")
    y = np.asarray(target, dtype=float).ravel()
    m = scenario.system.m1 + scenario.system.m2
    if y.size != m:
        raise ValueError(f"target must have m1 + m2 = {m} entries")
    if an.certificate is not None and an.certificate.witness is not None:
        direction = an.certificate.witness
    else:
        qs = sample_cone(an.kernel, 1, seed)
        direction = qs[0] if len(qs) else np.zeros(an.kernel.dim)
    if not np.any(getattr(direction, "coords", direction)):
        direction = np.eye(an.kernel.dim)[0]
    try:
        problem = build_corrector_problem(scenario.system, scenario.process, direction, lin=an.lin)
        rinv = build_right_inverse(problem, seed=seed)
    except RegularityError as exc:
        raise CorrectorFailure(str(exc)) from exc
    result = reach_target(problem, rinv, y, **options)
    check = verify_steering(problem, result)
    report["steering"] = result.to_dict()
    report["steering"]["gamma"] = rinv.gamma
    report["steering"]["kappa_bound"] = rinv.kappa
    report["steering"]["verification"] = check
    report = to_jsonable(report)
    if not result.converged:
        raise CorrectorFailure(f"corrector diverged: {result.message or 'residual ' + str(result.residual)}")
    return report, result, problem


def check_optimality(scenario, cost, samples=20, seed=0, meta=True):
    """Second-order necessary-condition report for the cost ``cost``."""
    _check_admissible(scenario)
    rep = check_second_order_necessary(
        scenario.system,
        scenario.process,
        cost,
        q_samples=samples,
        seed=seed,
        tol_ham=scenario.tolerances["hamiltonian"],
        points_per_axis=int(scenario.tolerances["lattice_points"]),
    )
    report = _header(scenario, meta)
    report["optimality"] = rep.to_dict()
    report["refuted"] = rep.refuted
    return to_jsonable(report)
