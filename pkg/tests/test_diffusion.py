import math

import numpy as np
import pytest
from scipy import integrate, stats

from manyserver.diffusion import (CmsInput, DiffusionConfig, StepSizeError, mm_integral,
                                  picard_oracle, run_diffusion, scalar_stationary_cdf,
                                  scalar_stationary_sample, simulate_drivers, solve_cms)
from manyserver.distributions import DistributionSpec, build_bundle, fluid_z
from manyserver.kernels import RGrid

LOMAX = DistributionSpec.parse("Lomax alpha=4")
EXP = DistributionSpec.parse("Exponential")
GRID = RGrid.geometric(r_max=10.0, m=16)


def test_cms_fluid_input_is_second_order():
    # eta = t and zeta = Z-bar(t) - 1 have the exact solution x = 0, kappa = t
    b = build_bundle(LOMAX)
    errs = []
    for dt in (2e-2, 1e-2):
        t = np.arange(int(round(5.0 / dt)) + 1) * dt
        sol = solve_cms(CmsInput(t, fluid_z(b, t) - 1.0, 0.0), b, dt)
        errs.append(max(np.max(np.abs(sol.x)), np.max(np.abs(sol.kappa - t))))
    assert errs[1] < 10 * 1e-4 * 6
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_cms_agrees_with_picard_oracle():
    b = build_bundle(DistributionSpec.parse("Gamma alpha=3"))
    dt, T = 5e-3, 3.0

    def eta(t):
        return 0.8 * np.sin(2 * t)

    def zeta(t):
        return -0.3 * np.exp(-t)

    t = np.arange(int(round(T / dt)) + 1) * dt
    sol = solve_cms(CmsInput(eta(t), zeta(t), -0.3), b, dt)
    ref = picard_oracle(eta, zeta, -0.3, b, dt, T)
    assert np.max(np.abs(sol.x - ref.x)) < 5 * dt ** 2
    assert sol.residual_eq1 < 10 * dt ** 2 * (1 + np.max(np.abs(sol.kappa)))


def test_cms_batch_matches_single():
    b = build_bundle(LOMAX)
    dt = 0.01
    t = np.arange(101) * dt
    eta = np.stack([-t, 0.5 * t])
    zeta = np.zeros_like(eta)
    both = solve_cms(CmsInput(eta, zeta, np.array([0.5, 0.0])), b, dt, residuals=False)
    one = solve_cms(CmsInput(eta[1], zeta[1], 0.0), b, dt, residuals=False)
    np.testing.assert_allclose(both.x[1], one.x, rtol=0, atol=0)


def test_cms_input_validation_and_step_size():
    b = build_bundle(DistributionSpec.parse("Gamma alpha=3"))
    with pytest.raises(ValueError):
        CmsInput(np.array([0.1, 0.2]), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        CmsInput(np.zeros(2), np.zeros(2), -1.0)
    lomax = build_bundle(LOMAX)  # g(0) = 4/3
    with pytest.raises(StepSizeError):
        solve_cms(CmsInput(np.zeros(3), np.zeros(3), 0.0), lomax, 2.0)


def test_driver_isometry_small():
    # Var H_t(1) for exponential service equals (1 - e^{-2t}) / 2
    cfg = DiffusionConfig(EXP, horizon=1.0, dt=0.02, r_grid=GRID)
    drv = simulate_drivers(cfg, np.random.default_rng(0), batch=4000)
    v = drv.H1[:, -1].var(ddof=1)
    target = (1 - math.exp(-2)) / 2
    assert abs(v - target) < 4 * target * math.sqrt(2 / 3999)


def test_mm_integral_retained_and_projected_agree():
    cfg = DiffusionConfig(LOMAX, horizon=1.0, dt=0.05, r_grid=GRID, retain_field=True, seed=4)
    drv = simulate_drivers(cfg)
    b = build_bundle(LOMAX)
    # a kernel in the span of the basis: G-bar(x + 1 - s) / G-bar(x)
    def k(x, s):
        return b.survival_ratio(x, 1.0 - s)
    direct = mm_integral(drv, k, 1.0)
    proj = float(np.sum((drv.basis.U.T @ k(drv.cells.centers[:, None],
                                            ((np.arange(20) + 0.5) * 0.05)[None, :])) * drv.P))
    assert direct == pytest.approx(proj, abs=1e-12)
    assert direct == pytest.approx(drv.H1[-1], abs=1e-6)
    with pytest.raises(ValueError):
        mm_integral(drv, k, 2.0)


@pytest.mark.parametrize("service", [EXP, LOMAX])
def test_run_diffusion_boundary_and_residuals(service):
    cfg = DiffusionConfig(service, horizon=2.0, dt=0.01, r_grid=GRID, x0=-0.5, seed=2,
                          sample_times=[0.0, 1.0, 2.0])
    p = run_diffusion(cfg)
    assert p.boundary_error < 1e-8
    assert p.residual_eq1 < 10 * cfg.dt ** 2 * (1 + np.max(np.abs(p.K)))
    assert p.Z.shape == (3, len(GRID))


def test_exponential_z_collapses_to_x_minus_part():
    # exponential service: Z(r) = e^{-r} (x ^ 0) up to discretization error
    cfg = DiffusionConfig(EXP, horizon=2.0, dt=0.005, r_grid=GRID, x0=-0.5, seed=9,
                          sample_times=[1.0, 2.0])
    p = run_diffusion(cfg)
    idx = np.rint(p.sample_times / cfg.dt).astype(int)
    ref = np.minimum(p.X[idx], 0.0)[:, None] * np.exp(-GRID.nodes)[None, :]
    assert np.max(np.abs(p.Z - ref)) < 0.05


def test_scalar_stationary_law():
    # P(X > 0) from the normalized speed density, computed by quadrature
    beta, sigma = 1.0, 1.0
    v = 1 + sigma ** 2

    def dens(x):
        return math.exp(-2 * beta * x / v) if x >= 0 else math.exp(-(x + beta) ** 2 / v + beta ** 2 / v)

    pos = integrate.quad(dens, 0, np.inf)[0]
    neg = integrate.quad(dens, -np.inf, 0)[0]
    assert 1 - float(scalar_stationary_cdf(0.0)) == pytest.approx(pos / (pos + neg), rel=1e-10)
    assert 1 - float(scalar_stationary_cdf(0.0)) == pytest.approx(0.2234, abs=1e-4)
    s = scalar_stationary_sample(20000, np.random.default_rng(0))
    assert stats.kstest(s, scalar_stationary_cdf).statistic < 0.015


class _ZeroRng:
    def standard_normal(self, size):
        return np.zeros(size)


def test_zero_noise_zero_state():
    cfg = DiffusionConfig(LOMAX, beta=0.0, sigma=0.0, horizon=2.0, dt=0.01, r_grid=GRID,
                          sample_times=[0.0, 1.0, 2.0])
    p = run_diffusion(cfg, rng=_ZeroRng())
    assert np.all(p.X == 0) and np.all(p.K == 0) and np.all(p.Z == 0)


def test_cms_zero_input():
    b = build_bundle(LOMAX)
    sol = solve_cms(CmsInput(np.zeros(50), np.zeros(50), 0.0), b, 0.01)
    assert np.all(sol.kappa == 0) and np.all(sol.x == 0)


def test_driver_moments():
    cfg = DiffusionConfig(LOMAX, sigma=0.7, beta=0.3, horizon=2.0, dt=0.02, r_grid=GRID)
    drv = simulate_drivers(cfg, np.random.default_rng(7), batch=10_000)
    eT = drv.E[:, -1]
    assert np.var(eT, ddof=1) == pytest.approx(0.49 * 2.0, rel=0.05)
    h = drv.H1[:, -1]
    assert abs(h.mean()) < 3 * h.std() / 100


def test_white_noise_isometry_and_orthogonality():
    cfg = DiffusionConfig(LOMAX, horizon=1.0, dt=0.1, n_cells=32, r_grid=GRID,
                          retain_field=True)
    b = build_bundle(LOMAX)
    rng = np.random.default_rng(3)
    cut = 0.5

    def k1(x, s):
        return (x < cut) * np.cos(s + x)

    def k2(x, s):
        return (x >= cut) * 1.0

    one, v1, v2 = [], [], []
    for _ in range(10_000):
        drv = simulate_drivers(cfg, rng, b)
        one.append(mm_integral(drv, lambda x, s: np.ones_like(x * s), 1.0))
        v1.append(mm_integral(drv, k1, 1.0))
        v2.append(mm_integral(drv, k2, 1.0))
    assert mm_integral(drv, lambda x, s: 0.0 * x * s, 1.0) == 0.0
    one, v1, v2 = map(np.array, (one, v1, v2))
    n = one.size
    # phi = 1: variance t times the total g-measure
    assert abs(one.var(ddof=1) - 1.0) < 3 * math.sqrt(2 / (n - 1))
    # phi = k1: midpoint-rule value of int int phi^2 g dx ds on the cell grid
    c, w = drv.cells.centers, drv.cells.measure
    s = (np.arange(10) + 0.5) * 0.1
    target = float(np.sum(w[:, None] * k1(c[:, None], s[None, :]) ** 2) * 0.1)
    assert abs(v1.var(ddof=1) - target) < 3 * target * math.sqrt(2 / (n - 1))
    assert abs(np.corrcoef(v1, v2)[0, 1]) < 3 / math.sqrt(n)


def test_exponential_marginal_at_t1_matches_scalar_oracle():
    from manyserver.diffusion import scalar_oracle_paths, simulate_x_batch
    from manyserver.stationary import ks_distance
    cfg = DiffusionConfig(EXP, horizon=1.0, dt=0.01, x0=-0.5, r_grid=GRID)
    xs = simulate_x_batch(cfg, 10_000, np.random.default_rng(1))[:, -1]
    ref = scalar_oracle_paths(1.0, 1.0, -0.5, 1.0, 1e-3, 50_000, np.random.default_rng(2))[:, 0]
    assert ks_distance(xs, ref) < 0.02


def test_exponential_stationary_law_matches_scalar_law():
    from manyserver.diffusion import estimate_diffusion_stationary
    cfg = DiffusionConfig(EXP, horizon=20.0, dt=0.02, r_grid=GRID, seed=5)
    law = estimate_diffusion_stationary(cfg, burn_in=19.0, n_draws=10_000)
    assert stats.kstest(law.sample, scalar_stationary_cdf).statistic < 0.02


def test_stationary_positive_part_decreases_in_beta():
    from manyserver.diffusion import estimate_diffusion_stationary
    probs, ses = [], []
    for beta in (0.5, 1.0, 2.0):
        cfg = DiffusionConfig(LOMAX, beta=beta, horizon=20.0, dt=0.05, r_grid=GRID, seed=1)
        s = estimate_diffusion_stationary(cfg, burn_in=10.0, n_draws=4000, spacing=5.0).sample
        p = float(np.mean(s > 0))
        probs.append(p)
        ses.append(math.sqrt(p * (1 - p) / s.size))
    for i in range(2):
        assert probs[i] - probs[i + 1] > 3 * math.hypot(ses[i], ses[i + 1])
