"""Exponential service: the diffusion model against its scalar reduction."""
import numpy as np

from manyserver import DiffusionConfig, DistributionSpec
from manyserver.diffusion import scalar_oracle_paths, simulate_x_batch
from manyserver.stationary import ks_distance

cfg = DiffusionConfig(service=DistributionSpec.parse("Exponential"), beta=1.0, sigma=1.0,
                      horizon=5.0, dt=0.01, x0=-0.5)
rng = np.random.default_rng(3)
x = simulate_x_batch(cfg, 2000, rng)[:, -1]
ref = scalar_oracle_paths(1.0, 1.0, -0.5, 5.0, 1e-3, 5000, rng)[:, 0]
print(f"mean X_5: diffusion {x.mean():+.3f}, scalar {ref.mean():+.3f}")
print(f"KS distance: {ks_distance(x, ref):.4f}")
