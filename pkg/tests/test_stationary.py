import math

import numpy as np
import pytest
from scipy import stats

from manyserver.distributions import DistributionSpec
from manyserver.kernels import RGrid
from manyserver.queue_sim import SimConfig, run
from manyserver.stationary import (EmpiricalLaw, InstabilityError, UsageError, compare,
                                   erlang_oracle, estimate_queue_stationary, ks_distance,
                                   lhat_bound, total_variation, trend_statistic, w1_distance)

EXP = DistributionSpec.parse("Exponential")


def test_erlang_single_server_is_geometric():
    p = erlang_oracle(1, 0.5)
    k = np.arange(p.size)
    np.testing.assert_allclose(p[:30], 0.5 ** (k[:30] + 1), rtol=1e-12)


def test_erlang_two_servers_by_hand():
    # N = 2, lam = 1: weights 1, 1, 1/2, 1/4, ... sum to 3
    p = erlang_oracle(2, 1.0)
    np.testing.assert_allclose(p[:4], np.array([1, 1, 0.5, 0.25]) / 3, rtol=1e-12)


def test_erlang_c_formula():
    # P(wait) = P(X >= N) against the textbook Erlang C expression
    N, a = 10, 10 - math.sqrt(10)
    p = erlang_oracle(N, a)
    top = a ** N / math.factorial(N) * N / (N - a)
    c = top / (sum(a ** k / math.factorial(k) for k in range(N)) + top)
    assert p[N:].sum() == pytest.approx(c, rel=1e-12)


def test_erlang_detailed_balance_and_errors():
    N, lam = 5, 4.2
    p = erlang_oracle(N, lam)
    k = np.arange(p.size - 1)
    np.testing.assert_allclose(lam * p[:-1], np.minimum(k + 1, N) * p[1:], rtol=1e-10)
    with pytest.raises(InstabilityError):
        erlang_oracle(3, 3.0)


def test_ks_and_w1_hand_examples():
    assert ks_distance([0.0, 1.0], [0.5]) == pytest.approx(0.5)
    assert w1_distance([0.0, 1.0], [0.5]) == pytest.approx(0.5)
    assert ks_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert w1_distance([0.0], [2.0]) == pytest.approx(2.0)


def test_ks_and_w1_against_scipy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=500), rng.normal(0.2, 1.3, size=300)
    assert ks_distance(a, b) == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-15)
    assert w1_distance(a, b) == pytest.approx(stats.wasserstein_distance(a, b), rel=1e-12)


def test_ks_brute_force_with_ties():
    a = np.array([0, 0, 1, 2, 2, 2], dtype=float)
    b = np.array([0, 1, 1, 3], dtype=float)
    grid = np.array([0, 1, 2, 3], dtype=float)
    brute = max(abs(np.mean(a <= x) - np.mean(b <= x)) for x in grid)
    assert ks_distance(a, b) == pytest.approx(brute)


def test_compare_bootstrap():
    rng = np.random.default_rng(1)
    la = EmpiricalLaw.from_sample(rng.normal(size=2000), "xhat")
    lb = EmpiricalLaw.from_sample(rng.normal(size=2000), "xhat")
    rep = compare(la, lb, n_boot=300, seed=2)
    # KS between two 2000-samples of one law is O(n^-1/2)
    assert rep.ks < 0.06 and 0 < rep.ks_se < 0.03
    assert rep.ks_ci[0] <= rep.ks_ci[1]
    assert compare(la, lb, n_boot=300, seed=2) == rep
    with pytest.raises(UsageError):
        compare(la, EmpiricalLaw.from_sample([0.0], "zhat0"))


def test_total_variation_pads():
    assert total_variation(np.array([1.0]), np.array([0.5, 0.5])) == pytest.approx(0.5)


def test_trend_statistic():
    t = trend_statistic([0.1, 0.05, 0.02], [0.005, 0.005, 0.005])
    assert t["decreasing"] and t["decreasing_beyond_noise"]
    t = trend_statistic([0.1, 0.095], [0.005, 0.005])
    assert t["decreasing"] and not t["decreasing_beyond_noise"]


def test_queue_stationary_mm_small():
    cfg = SimConfig(N=4, beta=0.5, service=EXP, horizon=1.0, seed=3,
                    r_grid=RGrid.geometric(10.0, 8))
    laws = estimate_queue_stationary(cfg, burn_in=30.0, n_draws=3000, functionals=("X", "xhat"))
    p = erlang_oracle(4, cfg.lam)
    x = laws["X"].sample.astype(int)
    emp = np.bincount(x, minlength=p.size) / x.size
    assert total_variation(emp, p) < 0.05
    np.testing.assert_allclose(laws["xhat"].sample, np.sort((x - 4) / 2.0))


def test_queue_stationary_path_mode_and_functionals():
    cfg = SimConfig(N=10, beta=1.0, service=EXP, horizon=1.0, seed=3,
                    r_grid=RGrid.geometric(10.0, 8))
    laws = estimate_queue_stationary(cfg, burn_in=10.0, n_draws=200, spacing=0.5, mode="path",
                                     functionals=("xhat", "zhat0", "zhat_h1", "zhat_r=1"))
    assert "lag1_autocorrelation" in laws["xhat"].meta
    np.testing.assert_allclose(np.sort(laws["zhat0"].sample),
                               np.sort(np.minimum(laws["xhat"].sample, 0.0)), atol=1e-12)
    with pytest.raises(UsageError):
        estimate_queue_stationary(cfg, 1.0, 5, mode="path")


def test_lhat_bound_is_nonnegative_and_scales():
    cfg = SimConfig(N=25, beta=1.0, service=DistributionSpec.parse("Lomax alpha=4"),
                    horizon=1.0, seed=0)
    law = lhat_bound(cfg, horizon=5.0, replications=50)
    assert law.n == 50 and np.all(law.sample >= 0)
    assert law.mean() < 5.0


def test_compare_hand_examples():
    def rep(a, b):
        return compare(EmpiricalLaw.from_sample(a, "x"), EmpiricalLaw.from_sample(b, "x"),
                       n_boot=20)
    r = rep([0.3, 0.1, 0.2], [0.3, 0.1, 0.2])
    assert r.ks == 0 and r.w1 == 0
    r = rep([0, 0, 0], [1, 1, 1])
    assert r.ks == 1 and r.w1 == 1
    r = rep([0, 1], [0, 2])
    assert r.ks == 0.5 and r.w1 == 0.5


def test_erlang_balance_equations_brute_force():
    # solve the truncated balance equations as a linear system
    N, lam, K = 2, 1.0, 80
    Q = np.zeros((K + 1, K + 1))
    for k in range(K):
        Q[k, k + 1] = lam
        Q[k + 1, k] = min(k + 1, N)
    Q -= np.diag(Q.sum(axis=1))
    A = np.vstack([Q.T, np.ones(K + 1)])
    p_lin = np.linalg.lstsq(A, np.r_[np.zeros(K + 1), 1.0], rcond=None)[0]
    p = erlang_oracle(N, lam)
    np.testing.assert_allclose(p[:20], p_lin[:20], atol=1e-12)
    assert abs(p.sum() - 1) < 1e-12


def test_lhat_zero_arrivals_and_domination():
    cfg = SimConfig(N=25, beta=1.0, service=DistributionSpec.parse("Lomax alpha=4"),
                    horizon=1.0, seed=0)
    assert np.all(lhat_bound(cfg, 5.0, 10, arrival_rate=0.0).sample == 0)
    lh = lhat_bound(cfg, 10.0, 2000)
    laws = estimate_queue_stationary(SimConfig(N=25, beta=1.0, service=cfg.service, horizon=1.0,
                                               seed=9, compute_z=False), burn_in=10.0,
                                     n_draws=2000, functionals=("xhat_plus",))
    xp = laws["xhat_plus"]
    grid = np.linspace(0, 3, 31)
    # P(X+ <= x) >= P(L <= x) up to sampling noise
    slack = 3 * math.sqrt(0.25 / 2000) * math.sqrt(2)
    assert np.all(xp.ecdf(grid) >= lh.ecdf(grid) - slack)


def test_sweep_single_n_has_no_trend():
    from manyserver.stationary import convergence_sweep
    diff = EmpiricalLaw.from_sample(np.random.default_rng(0).normal(-0.5, 1, 500), "xhat")
    out = convergence_sweep(EXP, 1.0, [9], ["xhat"], {"xhat": diff}, n_draws=100, burn_in=5.0,
                            n_boot=20)
    assert len(out["rows"]) == 1 and out["trend"] is None


def test_sample_boundary_elementwise():
    cfg = SimConfig(N=9, beta=1.0, service=DistributionSpec.parse("Lomax alpha=4"), horizon=1.0,
                    seed=2, r_grid=RGrid.geometric(10.0, 8))
    laws = estimate_queue_stationary(cfg, 5.0, 50, spacing=1.0, mode="path",
                                     functionals=("zhat0", "xhat"))
    s = run(replace_times(cfg, 5.0 + np.arange(50))).samples
    np.testing.assert_allclose(s.zhat[:, 0], -np.maximum(-s.xhat, 0), atol=1e-12)


def replace_times(cfg, times):
    from dataclasses import replace
    return replace(cfg, horizon=float(times[-1]), sample_times=times)
