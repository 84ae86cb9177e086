"""Queue stationary X-hat at growing N against the diffusion stationary law."""
import numpy as np

from manyserver import (DiffusionConfig, DistributionSpec, EmpiricalLaw, SimConfig, compare,
                        estimate_diffusion_stationary, estimate_queue_stationary)

service = DistributionSpec.parse("Exponential")
diff = estimate_diffusion_stationary(DiffusionConfig(service=service, horizon=30.0, dt=0.02,
                                                     seed=1), burn_in=29.0, n_draws=4000)
for N in (25, 100, 400):
    cfg = SimConfig(N=N, beta=1.0, service=service, horizon=1.0, seed=N, compute_z=False)
    q = estimate_queue_stationary(cfg, burn_in=30.0, n_draws=4000, functionals=("xhat",))["xhat"]
    rep = compare(q, diff, n_boot=200, seed=0)
    print(f"N = {N:4d}   KS = {rep.ks:.4f} +- {rep.ks_se:.4f}   W1 = {rep.w1:.4f}")
