"""Langevin updates on the bowl E(x) = 0.5 * |x|^2.

Without noise or clipping each step multiplies x by (1 - step/2), so the
chain contracts geometrically. With the default clip of 0.01 every
coordinate moves at most step * 0.005 per step, which is why large step
sizes are needed when features are large.

Run:  python3 demos/02_langevin_quadratic.py
"""

import numpy as np

from energyadapt.sgld import SgldConfig, adapt, quadratic_energy

x0 = np.array([[2.0, -1.0]])
rng = np.random.default_rng(0)

free = SgldConfig(step_size=1.0, num_steps=6, noise_std=0.0, grad_clip=1e9, record_trace=True)
_, trace = adapt(x0, None, quadratic_energy, free, rng)
print("unclipped, noiseless (x halves every step):")
for k, (f, e) in enumerate(zip(trace.features, trace.energies)):
    print(f"  step {k}: x = {np.round(f[0], 4)}  E = {e[0]:.5f}")

clipped = SgldConfig(step_size=50.0, num_steps=20, record_trace=True)
_, trace = adapt(x0, None, quadratic_energy, clipped, rng)
print("\nstep 50 with clip 0.01 and noise 0.001 (moves about 0.25 per step):")
for k in (0, 5, 10, 20):
    print(f"  step {k:2d}: x = {np.round(trace.features[k][0], 4)}  E = {trace.energies[k][0]:.4f}")
