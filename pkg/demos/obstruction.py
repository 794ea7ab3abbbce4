"""The cubic example: a nonempty multiplier set that cannot be removed.

x1' = u, x2' = u^3 on [0, 1] along u = 1 with x(1) = (1, 1).  For a < -2
the control bound a makes the multiplier cone empty and the linear test
already gives controllability.  For a >= -2 one ray survives, Q is
nonnegative on every variation, and the reachable set is one-sided:
x2(1) can be pushed up but not down.
"""

import numpy as np

from loccontrol.analysis import run_analysis
from loccontrol.corrector import probe_reachability
from loccontrol.scenario import builtin_scenario

# %% verdicts across the control bound
for a in (-3.0, -2.5, -2.0, -1.5, -1.0):
    an = run_analysis(builtin_scenario("example2", grid_n=200, a=a))
    line = f"a = {a:5.2f}  {an.verdict:22s} order {an.cone.order}"
    if an.cone.generators:
        p0 = an.cone.generators[0].costate.p[0]
        line += f"  costate ~ {np.round(p0 / p0[0], 4)}"
    print(line)

# %% one-sided reachability at a = -1
sc = builtin_scenario("example2", grid_n=200, a=-1.0)
for eps in (-1e-2, 1e-2):
    res = probe_reachability(sc.system, sc.process, np.array([0, 0, 0, eps]), budget=1000, seed=0)
    print(f"target x2(1) = 1 {eps:+.0e}:  best residual {res.best_residual:.3e}  ({res.evaluations} evaluations)")
