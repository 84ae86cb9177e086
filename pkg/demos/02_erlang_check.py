"""Stationary M/M/10 queue length against the birth-death oracle."""
import numpy as np

from manyserver import DistributionSpec, SimConfig, erlang_oracle, estimate_queue_stationary
from manyserver.stationary import total_variation

cfg = SimConfig(N=10, beta=1.0, service=DistributionSpec.parse("Exponential"), horizon=1.0,
                seed=7, compute_z=False)
law = estimate_queue_stationary(cfg, burn_in=50.0, n_draws=5000, functionals=("X",))["X"]
x = law.sample.astype(int)
p = erlang_oracle(10, cfg.lam)
emp = np.bincount(x, minlength=p.size) / x.size
print(f"TV(empirical, oracle) = {total_variation(emp, p):.4f} over {x.size} draws")
print(f"P(wait): simulated {np.mean(x >= 10):.4f}, oracle {p[10:].sum():.4f}")
