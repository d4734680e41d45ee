"""Convexity constraints on a GP posterior built from very little data.

Four noiseless samples of a parabola leave a plain GP free to wiggle between
and beyond them. Asking for a non-negative second derivative at five virtual
points bends every posterior draw into a bowl.

Run:  python demos/02_convexity.py
"""
import numpy as np

from tvbo.constrained import constrained_posterior_samples, place_vops
from tvbo.gp import Dataset, Observation, ParamPoint, SpatialKernelParams, TimeInvariant, predict
from tvbo.region import TrustRegion

X = np.array([-0.9, -0.3, 0.4, 0.8])
data = Dataset([Observation(ParamPoint([x], 0), float(x ** 2)) for x in X])
params = SpatialKernelParams([0.7], 1.0)
grid = np.linspace(-1.0, 1.0, 41)[:, None]

plain = predict(data, grid, 0, params, TimeInvariant(), 1e-6)
vops = place_vops(TrustRegion([-1.0], [1.0]), per_dim=5, t_next=0)
res = constrained_posterior_samples(data, vops, grid, params, TimeInvariant(), 1e-6,
                                    n_samples=256, rng_seed=0)


def worst_curvature(m):
    return float((m[:-2] - 2 * m[1:-1] + m[2:]).min())


print("sampler:", res.diagnostics.sampler, f"({res.diagnostics.n_constraints} constraints)")
print(f"smallest second difference, plain mean:       {worst_curvature(plain.mean):+.2e}")
print(f"smallest second difference, constrained mean: {worst_curvature(res.mean_estimate):+.2e}")
print("\n    x   truth   plain  constrained  (std plain / constrained)")
for i in range(0, 41, 5):
    x = grid[i, 0]
    print(f"{x:+.2f}  {x * x:6.3f}  {plain.mean[i]:6.3f}  {res.mean_estimate[i]:11.3f}"
          f"  ({plain.std[i]:.3f} / {res.std_estimate[i]:.3f})")
