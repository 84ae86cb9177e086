import numpy as np
import pytest

from manyserver.diagnostics import UsageError, fluid_deviation, identity_audit, tightness_profile
from manyserver.distributions import DistributionSpec, build_bundle
from manyserver.kernels import RGrid
from manyserver.queue_sim import SimConfig, run, run_with_primitives

LOMAX = DistributionSpec.parse("Lomax alpha=4")
GRID = RGrid.geometric(r_max=10.0, m=12)


@pytest.fixture(scope="module")
def lomax_path():
    return run(SimConfig(N=30, beta=1.0, service=LOMAX, horizon=10.0, seed=8, r_grid=GRID))


def test_identity_audit_exact_and_gauss(lomax_path):
    exact = identity_audit(lomax_path, rule="exact")
    gauss = identity_audit(lomax_path, rule="gauss", substep=0.5)
    assert exact.max_rel < 1e-12
    assert gauss.max_rel < 1e-8


def test_identity_audit_left_rule_is_first_order(lomax_path):
    coarse = identity_audit(lomax_path, rule="left", substep=0.1).max_abs
    fine = identity_audit(lomax_path, rule="left", substep=0.05).max_abs
    assert 1.5 < coarse / fine < 2.5


def test_identity_audit_without_departures():
    # no departure before the horizon: the martingale term is minus the compensator,
    # which is not zero, and the identity must still close
    p = run_with_primitives(3, [0.05, 0.1], [5.0, 5.0], 0.3,
                            DistributionSpec.parse("Gamma alpha=100"), init_ages=[0.5],
                            init_residuals=[4.0], r_grid=GRID)
    rep = identity_audit(p, times=[0.1, 0.3], rule="exact")
    assert rep.max_abs < 1e-12
    assert np.all(rep.martingale <= 0) and np.min(rep.martingale) < -1e-3


def test_identity_audit_needs_event_log():
    with pytest.raises(UsageError):
        identity_audit(None)


def test_tightness_profile(lomax_path):
    paths = [lomax_path.samples,
             run(SimConfig(N=30, beta=1.0, service=LOMAX, horizon=10.0, seed=9,
                           r_grid=GRID)).samples]
    prof = tightness_profile(paths, ladder=[1.0, 5.0, 10.0], bundle=build_bundle(LOMAX))
    g = prof.groups[(30, 0.0)]
    assert g["l2"].shape == (2, 3)
    # windowed norms grow with the window, tail norms shrink
    assert np.all(np.diff(g["l2"], axis=1) >= -1e-12)
    assert np.all(np.diff(g["tail"], axis=1) <= 1e-12)
    assert np.allclose(g["tail"][:, -1], 0.0)
    assert prof.tail_bound_at_rmax is not None


def test_fluid_deviation(lomax_path):
    d = fluid_deviation(lomax_path)
    assert d["x"].shape == (1, lomax_path.samples.times.size)
    assert d["x"][0, 0] == 0.0  # the star start has X0 = N
    assert np.all(d["z_l2"] >= 0)


def test_exponential_audit_matches_closed_form():
    p = run(SimConfig(N=25, beta=1.0, service=DistributionSpec.parse("Exponential"),
                      horizon=5.0, seed=4, r_grid=GRID))
    rep = identity_audit(p, times=[1.0, 5.0], rule="exact")
    X = p.counts_at(np.array([1.0, 5.0]))[3]
    closed = np.minimum(X, 25)[:, None] * np.exp(-GRID.nodes)[None, :]
    np.testing.assert_allclose(rep.reconstructed, closed, rtol=1e-12)


def test_star_zhat_mean_square_below_envelope():
    # exponential service, star start: E[Zhat_0(r)^2] <= Z-bar(r)
    b = build_bundle("Exponential")
    paths = [run(SimConfig(N=50, beta=1.0, service=DistributionSpec.parse("Exponential"),
                           horizon=1e-6, sample_times=[0.0], seed=s, r_grid=GRID)).samples
             for s in range(2000)]
    prof = tightness_profile(paths, ladder=[1.0, 10.0], bundle=b)
    assert not prof.envelope_exceed.any()


def test_zero_paths_have_zero_norms():
    p = run(SimConfig(N=4, beta=0.0, service=LOMAX, horizon=1e-6, sample_times=[0.0],
                      r_grid=GRID)).samples
    from dataclasses import replace
    z = replace(p, zhat=np.zeros_like(p.zhat), zhat_prime=np.zeros_like(p.zhat_prime))
    prof = tightness_profile([z], ladder=[1.0, 5.0])
    g = prof.groups[(4, 0.0)]
    assert np.all(g["l2"] == 0) and np.all(g["h1"] == 0)


def test_fluid_deviation_of_exact_fluid_state_is_small():
    # with a huge N the sampled state is the fluid state up to O(N^-1/2)
    d = fluid_deviation(run(SimConfig(N=40000, beta=1.0, service=LOMAX, horizon=1e-6,
                                      sample_times=[0.0], r_grid=GRID)))
    assert d["x"][0, 0] == 0.0 and d["z_l2"][0, 0] < 0.05
