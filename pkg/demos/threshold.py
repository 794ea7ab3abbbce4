"""The T = pi threshold of the two-state example.

x1' = u, x2' = u^2 - x1^2 with both ends pinned at the origin.  The zero
process has a one-dimensional multiplier ray with costate p = (0, alpha),
alpha < 0, and the second-order form reduces to -2 alpha int (v^2 - h1^2).
It takes negative values exactly when the horizon exceeds pi.
"""

import numpy as np

from loccontrol.analysis import run_analysis
from loccontrol.multipliers import make_tuple
from loccontrol.scenario import builtin_scenario
from loccontrol.secondorder import assemble_Q

# %% the multiplier ray at T = 4
an = run_analysis(builtin_scenario("example1", grid_n=200, T=4.0))
gen = an.cone.generators[0]
print("abnormality order:", an.cone.order, " pointed:", an.cone.is_pointed)
print("costate at t0:", np.round(gen.costate.p[0], 4), " lambda2:", np.round(gen.lam2, 4))

# %% Q on the lowest Dirichlet mode, generator scaled to alpha = -1
sc = an.scenario
tup = make_tuple(sc.system, sc.process, gen.lam / abs(gen.costate.p[0, 1]))
t = sc.grid.times
v = np.diff(np.sin(np.pi * t / 4.0)) / sc.grid.dt
q = an.kernel.variation(an.kernel.coords(np.zeros(2), v[:, None]))
form = assemble_Q(sc.system, sc.process, tup, an.kernel)
print(f"Q[mode] = {form.value(q.coords):.5f}   closed form pi^2/4 - 4 = {np.pi**2 / 4 - 4:.5f}")

# %% sweep the horizon; the L2-normalised least eigenvalue is sqrt(2) (1 - (T/pi)^2)
print("\n   T     min_eig    closed form   verdict")
for T in np.linspace(2.8, 3.5, 15):
    an = run_analysis(builtin_scenario("example1", grid_n=200, T=float(T)))
    eig = an.certificate.min_restricted_eig
    print(f"{T:5.2f}  {eig:+.6f}   {np.sqrt(2) * (1 - (T / np.pi) ** 2):+.6f}   {an.verdict}")
