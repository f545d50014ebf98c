"""Heat kernel, deterministic decay and the mean of the parabolic Anderson model.

Run: python3 demos/01_heat_and_pam.py   (about 10 s)
"""

import math

import numpy as np

from pamlab import Field, Grid, SolverConfig, evolve, heat_kernel, initial_state, linear
from pamlab.torus import convolve

# The periodic kernel relaxes to the uniform density 1/2 on a torus of length 2.
for t in (0.01, 0.1, 1.0, 10.0):
    print(f"p_t(0) at t={t:5}: {heat_kernel(t, 0.0):.6f}")

# Without noise the cosine mode decays like exp(-pi^2 t).
g = Grid(256)
w0 = Field.from_function(g, lambda x: 1.5 + np.cos(np.pi * x))
w = evolve(initial_state(g, w0, linear(0.0, 0.0), seed=0), SolverConfig(dt=1e-4), 0.2)
amp = np.max(w.values - 1.5)
print(f"cos amplitude at t=0.2: {amp:.6f}  exact {math.exp(-np.pi ** 2 * 0.2):.6f}")

# With noise the ensemble mean still solves the heat equation with drift mu.
g = Grid(64)
mu, sigma, m = 0.5, 1.0, 400
u0 = Field.from_function(g, lambda x: 1.5 + np.cos(np.pi * x))
u = evolve(initial_state(g, u0, linear(mu, sigma), seed=1, trajectory_ids=tuple(range(m))),
           SolverConfig(dt=5e-4), 1.0)
mean = u.values.mean(axis=0)
se = u.values.std(axis=0, ddof=1) / math.sqrt(m)
expect = math.exp(mu) * convolve(1.0, u0).values
print(f"max |mean - e^mu p_1*u0| / SE over the grid: {np.max(np.abs(mean - expect) / se):.2f}")
print(f"single paths at x=0 range over [{u.values[:, 32].min():.3g}, {u.values[:, 32].max():.3g}]")
