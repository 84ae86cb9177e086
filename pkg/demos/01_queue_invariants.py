"""Simulate a Lomax(4) many-server queue and check the pathwise invariants."""
import numpy as np

from manyserver import DistributionSpec, SimConfig, run
from manyserver.queue_sim import check_invariants

cfg = SimConfig(N=50, beta=1.0, service=DistributionSpec.parse("Lomax alpha=4"), horizon=50.0,
                sample_times=np.linspace(0, 50, 11), seed=1)
path = run(cfg)
inv = check_invariants(path)
print(f"event times checked: {inv['n_times']}")
print(f"non-idling violations: {inv['non_idling']}, mass-balance violations: "
      f"{inv['mass_balance']}, boundary error: {inv['boundary']}")
for t, x in zip(path.samples.times, path.samples.xhat):
    print(f"t = {t:5.1f}   X-hat = {x:+.3f}")
