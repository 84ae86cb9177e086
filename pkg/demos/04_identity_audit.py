"""Rebuild Z from the event log and compare with the direct value."""
import numpy as np

from manyserver import DistributionSpec, SimConfig, identity_audit, run

cfg = SimConfig(N=50, beta=1.0, service=DistributionSpec.parse("Lomax alpha=4"), horizon=20.0,
                sample_times=[5.0, 10.0, 20.0], seed=4)
path = run(cfg)
for rule in ("exact", "gauss"):
    rep = identity_audit(path, rule=rule)
    print(f"{rule:5s}: max relative discrepancy {rep.max_rel:.2e}")
