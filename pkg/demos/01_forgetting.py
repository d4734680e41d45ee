"""How two forgetting strategies treat an old observation.

We condition a spatio-temporal GP on one noiseless point, y = 1 at t = 0, and
then look at the same parameter value further and further into the future.

* Uncertainty injection (a Wiener temporal kernel) keeps the posterior mean
  where the data put it and lets the variance grow linearly.
* Back-to-prior (a stationary temporal kernel) lets the mean drift back to
  the zero prior mean while the variance returns to the prior variance.

Run:  python demos/01_forgetting.py
"""
import numpy as np

from tvbo.gp import (BackToPriorTemporal, Dataset, ExactGP, Observation, ParamPoint,
                     SpatialKernelParams, WienerTemporal)

data = Dataset([Observation(ParamPoint([0.0], 0), 1.0)])
spatial = SpatialKernelParams(lengthscales=[1.0], output_variance=1.0)
rate = 0.03

ui = ExactGP(data, spatial, WienerTemporal(rate), noise_variance=1e-12)
b2p = ExactGP(data, spatial, BackToPriorTemporal(rate), noise_variance=1e-12)

print(f"{'t':>5} | {'UI mean':>8} {'UI var':>8} | {'B2P mean':>8} {'B2P var':>8}")
for t in (0, 1, 10, 50, 100, 300):
    a = ui.predict([[0.0]], t)
    b = b2p.predict([[0.0]], t)
    print(f"{t:5d} | {a.mean[0]:8.4f} {a.variance[0]:8.4f} | {b.mean[0]:8.4f} {b.variance[0]:8.4f}")

# The UI variance grows by exactly output_variance * rate per step.
slope = np.diff([ui.predict([[0.0]], t).variance[0] for t in (10, 11)])[0]
print(f"\nUI variance increase per step: {slope:.6f} (rate = {rate})")
