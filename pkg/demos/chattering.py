"""Mixing two controls by fast switching.

Half of every subinterval runs u = 1 and half u = 0.  As the subintervals
shrink, the switched trajectory approaches the trajectory of the averaged
field, and the error halves with every halving of the subinterval.
"""

import numpy as np

from loccontrol.corrector import chattering_bound, chattering_error, mix_controls
from loccontrol.scenario import builtin_scenario
from loccontrol.trajectory import Grid, simulate_relaxed

sc = builtin_scenario("example1", grid_n=20, T=4.0)
grid = Grid(0.0, 4.0, 20)
controls = [np.zeros((20, 1)), np.ones((20, 1))]

relaxed = simulate_relaxed(sc.system, [0.0, 0.0], controls, [0.5], grid)
print("relaxed endpoint:", np.round(relaxed[-1], 6), " exact:", [2.0, 2.0 - 64 / 12])

print("\ndepth  pieces   error      ratio    bound")
prev = None
for depth in range(1, 7):
    err = chattering_error(sc.system, [0.0, 0.0], controls, [0.5], grid, depth)
    bound = chattering_bound(sc.system, [0.0, 0.0], controls, [0.5], grid, depth)["bound"]
    pieces = len(mix_controls(controls, [0.5], depth, grid).durations)
    ratio = "" if prev is None else f"{err / prev:.3f}"
    print(f"{depth:5d}  {pieces:6d}   {err:.3e}  {ratio:7s}  {bound:.3e}")
    prev = err
