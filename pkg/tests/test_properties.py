import numpy as np
from hypothesis import given, settings, strategies as st

from manyserver.config import parse_config
from manyserver.distributions import DistributionSpec, build_bundle
from manyserver.kernels import RGrid, t_map
from manyserver.parallel import seed_split
from manyserver.queue_sim import check_invariants, run_with_primitives
from manyserver.stationary import erlang_oracle, ks_distance, w1_distance

EXP = DistributionSpec.parse("Exponential")
LOMAX = build_bundle("Lomax alpha=4")
GRID = RGrid.geometric(r_max=5.0, m=6)

pos = st.floats(min_value=1e-3, max_value=5.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(N=st.integers(1, 4), gaps=st.lists(pos, min_size=0, max_size=25),
       services=st.lists(pos, min_size=25, max_size=25),
       ages=st.lists(st.floats(0, 3), max_size=4))
def test_fcfs_invariants_on_arbitrary_primitives(N, gaps, services, ages):
    ages = ages[:N]
    arrivals = np.cumsum(gaps)
    p = run_with_primitives(N, arrivals, services[:arrivals.size], 30.0, EXP, init_ages=ages,
                            init_residuals=[1.0] * len(ages), r_grid=GRID, compute_z=False)
    inv = check_invariants(p)
    assert inv["non_idling"] == 0 and inv["mass_balance"] == 0
    assert inv["K_monotone"] and inv["D_monotone"]
    # FCFS: entries are in arrival order and never precede the arrival
    arr = p.kind == 2
    assert np.all(np.diff(p.entry[arr]) >= 0)
    assert np.all(p.entry[arr] >= p.arrival[arr])


@settings(max_examples=50, deadline=None)
@given(ages=st.lists(st.floats(0, 50), min_size=1, max_size=30))
def test_t_map_is_bounded_and_decreasing(ages):
    r = np.linspace(0, 20, 41)
    z = t_map(LOMAX, ages, r)
    assert z[0] == len(ages)
    assert np.all(np.diff(z) <= 1e-12) and np.all(z >= 0)


@settings(max_examples=60, deadline=None)
@given(a=st.lists(st.floats(-10, 10), min_size=1, max_size=40),
       b=st.lists(st.floats(-10, 10), min_size=1, max_size=40))
def test_distance_axioms(a, b):
    assert 0 <= ks_distance(a, b) <= 1
    assert ks_distance(a, b) == ks_distance(b, a)
    assert abs(w1_distance(a, b) - w1_distance(b, a)) < 1e-9
    assert ks_distance(a, a) == 0 and w1_distance(a, a) == 0
    # W1 between samples is at least the distance of their means
    assert w1_distance(a, b) >= abs(np.mean(a) - np.mean(b)) - 1e-9


@settings(max_examples=40, deadline=None)
@given(N=st.integers(1, 60), rho=st.floats(0.05, 0.97))
def test_erlang_oracle_is_a_distribution(N, rho):
    p = erlang_oracle(N, rho * N)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


@given(m=st.integers(0, 2 ** 63), i=st.integers(0, 2 ** 32), j=st.integers(0, 2 ** 32))
def test_seed_split_distinct_indices(m, i, j):
    if i != j:
        assert seed_split(m, i) != seed_split(m, j)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 500), beta=st.floats(0.0, 3.0), seed=st.integers(0, 2 ** 40))
def test_config_round_trip(n, beta, seed):
    text = f"[experiment]\nkind = audit\nseed = {seed}\n[queue]\nN = {n}\nbeta = {beta!r}\nhorizon = 2\n"
    cfg = parse_config(text)
    again = parse_config(cfg.to_text())
    assert again.hash() == cfg.hash() and again.seed == seed
    assert again.get_float("queue", "beta") == beta
