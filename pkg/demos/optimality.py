"""Second-order necessary conditions for minimising x2(T).

Drop the x2(T) = 0 constraint from the two-state example and use x2(T) as
the cost.  For T < pi every sampled variation admits a multiplier tuple
with lambda0 > 0; for T > pi the lowest mode admits none and the zero
process is refuted as a strong minimum.
"""

from loccontrol.scenario import builtin_scenario
from loccontrol.secondorder import check_second_order_necessary
from loccontrol.system import compile_endpoint_expression

for T in (3.0, 4.0):
    sc = builtin_scenario("example1_free_end", grid_n=200, T=T)
    cost = compile_endpoint_expression(["z4"], sc.system.n, sc.params)
    rep = check_second_order_necessary(sc.system, sc.process, cost, q_samples=10, seed=0)
    found = sum(r["tuple_found"] for r in rep.rows)
    pos = sum(r["lambda0_positive"] for r in rep.rows)
    eig = [r for r in rep.rows if r["kind"] == "eigen"][0]["Q_values"][0]
    print(f"T = {T}: tuples for {found}/{len(rep.rows)} variations, lambda0 > 0 for {pos};"
          f" Q on the lowest mode {eig:+.4f}; refuted: {rep.refuted}")
