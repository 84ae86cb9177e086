"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a one-line verdict that is repeated in the terminal
summary.  The long Monte Carlo criteria (3, 6, 7, 8, 9) are marked ``slow``.
"""
import math
import time

import numpy as np
import pytest

from manyserver.cli import run_experiment
from manyserver.diagnostics import fluid_deviation, identity_audit
from manyserver.diffusion import (CmsInput, DiffusionConfig, estimate_diffusion_stationary,
                                  picard_oracle, scalar_oracle_paths, simulate_drivers,
                                  simulate_x_batch, solve_cms)
from manyserver.distributions import DistributionSpec, build_bundle, fluid_z
from manyserver.kernels import RGrid
from manyserver.parallel import seed_split
from manyserver.queue_sim import SimConfig, check_invariants, run
from manyserver.stationary import (EmpiricalLaw, compare, erlang_oracle,
                                   estimate_queue_stationary, ks_distance, total_variation,
                                   trend_statistic)

EXP = DistributionSpec.parse("Exponential")
LOMAX = DistributionSpec.parse("Lomax alpha=4")
MASTER = 20240611


def test_c01_pathwise_invariants(record):
    cfg = SimConfig(N=50, beta=1.0, service=LOMAX, horizon=50.0, seed=MASTER)
    run(SimConfig(N=5, beta=1.0, service=LOMAX, horizon=1.0))  # compile outside the timing
    start = time.perf_counter()
    path = run(cfg)
    inv = check_invariants(path)
    secs = time.perf_counter() - start
    ok = (inv["non_idling"] == 0 and inv["boundary"] == 0.0 and inv["mass_balance"] == 0
          and secs < 1.0)
    assert record(1, "pathwise invariants", ok,
                  f"{inv['n_times']} event times, non-idling {inv['non_idling']}, boundary "
                  f"{inv['boundary']}, mass balance {inv['mass_balance']}, {secs:.2f} s")


def test_c02_exponential_collapse(record):
    run(SimConfig(N=5, beta=1.0, service=EXP, horizon=1.0))
    start = time.perf_counter()
    path = run(SimConfig(N=100, beta=1.0, service=EXP, horizon=20.0, seed=MASTER))
    s = path.samples
    ref = np.exp(-s.r_grid.nodes)[None, :] * np.minimum(s.X, 100)[:, None]
    rel = float(np.max(np.abs(s.Z - ref) / np.abs(ref)))
    secs = time.perf_counter() - start
    ok = rel <= 1e-12 and secs < 5.0
    assert record(2, "exponential collapse", ok,
                  f"max relative error {rel:.2e} over {s.times.size} times, {secs:.2f} s")


@pytest.mark.slow
def test_c03_erlang_oracle(record):
    cfg = SimConfig(N=10, beta=1.0, service=EXP, horizon=1.0, seed=MASTER, compute_z=False)
    laws = estimate_queue_stationary(cfg, burn_in=50.0, n_draws=100_000, functionals=("X",))
    x = laws["X"].sample.astype(int)
    p = erlang_oracle(10, cfg.lam)
    tv = total_variation(np.bincount(x, minlength=p.size) / x.size, p)
    assert record(3, "Erlang oracle", tv < 0.02,
                  f"total variation {tv:.4f} over {x.size} independent draws (threshold 0.02)")


def test_c04_driver_isometry(record):
    cfg = DiffusionConfig(EXP, horizon=1.0, dt=0.01, seed=MASTER)
    drv = simulate_drivers(cfg, batch=10_000)
    h = drv.H1[:, -1]
    v = float(np.var(h, ddof=1))
    target = (1 - math.exp(-2)) / 2
    se = target * math.sqrt(2 / (h.size - 1))
    z = (v - target) / se
    assert record(4, "driver isometry", abs(z) <= 3,
                  f"Var H_1(1) = {v:.4f} vs {target:.4f}, {z:+.2f} standard errors")


def _canonical_inputs(bundle):
    return {
        "ramp": (lambda t: -t, lambda t: 0.0 * t, 0.5),
        "wave": (lambda t: 0.8 * np.sin(2 * t), lambda t: -0.3 * np.exp(-t), -0.3),
        "fluid": (lambda t: t, lambda t: fluid_z(bundle, t) - 1.0, 0.0),
    }


def test_c05_cms_solver(record):
    b = build_bundle(LOMAX)
    dt, T = 1e-3, 5.0
    t = np.arange(int(round(T / dt)) + 1) * dt
    parts, ok = [], True
    for name, (eta, zeta, x0) in _canonical_inputs(b).items():
        sol = solve_cms(CmsInput(eta(t), zeta(t), x0), b, dt)
        tol_r = 10 * dt ** 2 * (1 + float(np.max(np.abs(sol.kappa))))
        ref = picard_oracle(eta, zeta, x0, b, dt, T)
        err = float(np.max(np.abs(sol.x - ref.x)))
        ok &= max(sol.residual_eq1, sol.residual_eq2) <= tol_r and err <= 5 * dt ** 2
        parts.append(f"{name}: residuals {sol.residual_eq1:.1e}/{sol.residual_eq2:.1e} "
                     f"(<= {tol_r:.1e}), oracle {err:.1e} (<= {5 * dt ** 2:.0e})")
    assert record(5, "CMS solver", ok, "; ".join(parts))


@pytest.mark.slow
def test_c06_diffusion_scalar_equivalence(record):
    cfg = DiffusionConfig(EXP, beta=1.0, sigma=1.0, horizon=5.0, dt=0.01, x0=-0.5, seed=MASTER)
    xs = simulate_x_batch(cfg, 10_000, np.random.default_rng(cfg.seed))[:, -1]
    ref = scalar_oracle_paths(1.0, 1.0, -0.5, 5.0, 1e-3, 100_000,
                              np.random.default_rng(seed_split(MASTER, 1)))[:, 0]
    ks = ks_distance(xs, ref)
    assert record(6, "diffusion-scalar equivalence", ks < 0.02,
                  f"KS {ks:.4f} between 1e4 diffusion draws and 1e5 scalar Euler-Maruyama draws "
                  f"at t = 5 (threshold 0.02)")


# -- stationary comparisons (criteria 7 and 9 share samples) -------------------

N_LIST = (25, 100, 400)
N_DRAWS = 50_000
DIFF_HORIZON, DIFF_DT = 30.0, 0.02


@pytest.fixture(scope="module")
def stationary_samples():
    out = {}
    for label, spec in (("exponential", EXP), ("lomax", LOMAX)):
        queue = {}
        for N in N_LIST:
            cfg = SimConfig(N=N, beta=1.0, service=spec, horizon=1.0,
                            seed=seed_split(MASTER, N), compute_z=False)
            queue[N] = estimate_queue_stationary(cfg, burn_in=50.0, n_draws=N_DRAWS,
                                                 functionals=("xhat",))["xhat"]
        dcfg = DiffusionConfig(spec, beta=1.0, sigma=1.0, horizon=DIFF_HORIZON, dt=DIFF_DT,
                               seed=seed_split(MASTER, 10 ** 6))
        diff = estimate_diffusion_stationary(dcfg, burn_in=DIFF_HORIZON - DIFF_DT,
                                             n_draws=N_DRAWS)
        out[label] = (queue, diff)
    return out


@pytest.mark.slow
def test_c07_uniform_l1_bound(record, stationary_samples):
    queue, _ = stationary_samples["lomax"]
    means, ses = [], []
    for N in N_LIST:
        law = EmpiricalLaw.from_sample(np.maximum(queue[N].sample, 0.0), "xhat_plus")
        means.append(law.mean())
        ses.append(law.bootstrap_mean_se(n_boot=1000, seed=N))
    rises = [means[i + 1] - means[i] for i in range(len(N_LIST) - 1)]
    limits = [3 * math.hypot(ses[i], ses[i + 1]) for i in range(len(N_LIST) - 1)]
    ok = all(r <= lim for r, lim in zip(rises, limits))
    detail = ", ".join(f"N={N}: {m:.4f} +- {s:.4f}" for N, m, s in zip(N_LIST, means, ses))
    detail += "; rises " + ", ".join(f"{r:+.4f} (3 SE {lim:.4f})" for r, lim in zip(rises, limits))
    assert record(7, "uniform L1 bound", ok, "mean xhat+ " + detail)


@pytest.mark.slow
def test_c08_fluid_rate(record):
    b = build_bundle(LOMAX)
    Ns = (25, 100, 400, 1600)
    reps = 200
    dist = []
    for N in Ns:
        vals = []
        for i in range(reps):
            cfg = SimConfig(N=N, beta=1.0, service=LOMAX, horizon=1e-6, sample_times=[0.0],
                            seed=seed_split(MASTER + 8, N * 10_000 + i))
            vals.append(fluid_deviation(run(cfg), bundle=b)["z_l2"][0, 0])
        dist.append(float(np.mean(vals)))
    slope = float(np.polyfit(np.log(Ns), np.log(dist), 1)[0])
    ok = -0.6 <= slope <= -0.4
    assert record(8, "fluid rate", ok,
                  f"slope {slope:.3f} (target [-0.6, -0.4]); mean L2 distance "
                  + ", ".join(f"N={N}: {d:.4f}" for N, d in zip(Ns, dist)))


@pytest.mark.slow
def test_c09_queue_to_diffusion_convergence(record, stationary_samples):
    ok, parts = True, []
    for label in ("exponential", "lomax"):
        queue, diff = stationary_samples[label]
        reps = [compare(queue[N], diff, n_boot=500, seed=N) for N in N_LIST]
        trend = trend_statistic([r.ks for r in reps], [r.ks_se for r in reps])
        ok &= trend["decreasing_beyond_noise"]
        part = f"{label} KS " + ", ".join(f"N={N}: {r.ks:.4f} +- {r.ks_se:.4f}"
                                           for N, r in zip(N_LIST, reps))
        part += " drops " + ", ".join(f"{d:.4f} (noise {n:.4f})"
                                       for d, n in zip(trend["drops"], trend["noise"]))
        if label == "exponential":
            ok &= reps[-1].ks < 0.05
            part += f", final {reps[-1].ks:.4f} (< 0.05)"
        parts.append(part)
    assert record(9, "queue-diffusion convergence", ok, "; ".join(parts))


def test_c10_identity_audit(record):
    path = run(SimConfig(N=50, beta=1.0, service=LOMAX, horizon=20.0, seed=MASTER))
    times = np.linspace(0.0, 20.0, 6)
    gauss = identity_audit(path, times=times, rule="gauss")
    exact = identity_audit(path, times=times, rule="exact")
    ok = gauss.max_rel <= 1e-3 and exact.max_rel <= 1e-3
    assert record(10, "identity audit", ok,
                  f"max relative discrepancy {gauss.max_rel:.1e} (Gauss-Legendre compensator), "
                  f"{exact.max_rel:.1e} (closed form); threshold 1e-3")


_CONFIGS = {
    "simulate-queue": """
[experiment]
kind = simulate-queue
seed = 11
replications = 4
[queue]
N = 20
beta = 1
horizon = 5
sample_times = linspace 0 5 6
[service]
family = Lomax
alpha = 4
[rgrid]
r_max = 10
m = 10
""",
    "simulate-diffusion": """
[experiment]
kind = simulate-diffusion
seed = 12
replications = 3
[service]
family = Lomax
alpha = 4
[diffusion]
horizon = 2
dt = 0.02
x0 = -0.5
[rgrid]
r_max = 10
m = 10
""",
    "stationary": """
[experiment]
kind = stationary
seed = 13
[queue]
N = 16
beta = 1
horizon = 1
[service]
family = Exponential
[stationary]
burn_in = 10
n_draws = 200
functionals = X, xhat
diffusion_draws = 200
diffusion_horizon = 4
""",
    "sweep": """
[experiment]
kind = sweep
seed = 14
[queue]
N = 9
beta = 1
horizon = 1
[service]
family = Exponential
[sweep]
n_list = 9, 16
n_draws = 100
burn_in = 10
diffusion_horizon = 4
n_boot = 50
""",
    "verify-dist": """
[experiment]
kind = verify-dist
[service]
family = Gamma
alpha = 3
""",
    "audit": """
[experiment]
kind = audit
seed = 15
replications = 2
[queue]
N = 20
beta = 1
horizon = 5
[service]
family = Lomax
alpha = 4
[audit]
times = 1, 5
[rgrid]
r_max = 10
m = 10
""",
}


def test_c11_determinism(record, tmp_path):
    bad = []
    for kind, text in _CONFIGS.items():
        cfg = tmp_path / f"{kind}.ini"
        cfg.write_text(text)
        outs = []
        for i, threads in enumerate((1, 1, 2)):
            out = tmp_path / f"{kind}-{i}"
            run_experiment(cfg, out=out, threads=threads)
            outs.append(out)
        for name in ("results.csv", "report.json", "cache.npz"):
            if len({(o / name).read_bytes() for o in outs}) != 1:
                bad.append(f"{kind}/{name}")
    assert record(11, "determinism", not bad,
                  f"{len(_CONFIGS)} kinds x 3 runs (threads 1, 1, 2): "
                  + ("all outputs byte-identical" if not bad else "differs: " + ", ".join(bad)))
