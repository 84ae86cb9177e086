"""Discrete-event simulation of the GI/GI/N FCFS non-idling queue.

Customers are processed in arrival order.  Under FCFS with identical
servers the entry epoch of customer k is the later of its arrival and the
first time a server frees up after customer k-1 has been placed, so the
whole run is one pass over the customers with a heap of server free-times.
When several servers are idle at an arrival, one is picked uniformly.

The run keeps an event log (arrival, entry, departure, service, server per
job) from which every quantity of the state descriptor can be reconstructed
at any time: ages are ``t - entry`` for the jobs with
``entry <= t < departure``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numba
import numpy as np

from .distributions import (DistributionBundle, DistributionSpec, Family, build_bundle,
                            fluid_z, sample_residual, sample_service)
from .kernels import RGrid, t_map, t_map_derivative

__all__ = [
    "ConfigError",
    "ExplicitInit",
    "SimConfig",
    "QueueState",
    "QueuePath",
    "ScaledPath",
    "init_star",
    "run",
    "run_with_primitives",
    "fluid_scale",
    "compensated_departure",
    "compensated_departure_psi",
    "check_invariants",
]

KIND_INIT_SERVICE = 0
KIND_INIT_QUEUE = 1
KIND_ARRIVAL = 2


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass(frozen=True)
class ExplicitInit:
    """Initial condition given by hand.

    ``ages`` lists the ages of the ``min(X0, N)`` jobs in service; the
    ``X0 - N`` waiting jobs (if any) get fresh service times.  ``R0`` is the
    time to the first arrival; ``None`` starts the renewal process fresh.
    """

    X0: int
    ages: Sequence[float] = ()
    R0: float | None = None


@dataclass(frozen=True)
class SimConfig:
    N: int
    beta: float
    service: DistributionSpec
    horizon: float
    arrival: DistributionSpec = field(default_factory=lambda: DistributionSpec(Family.EXPONENTIAL))
    sample_times: Sequence[float] | None = None
    r_grid: RGrid = field(default_factory=RGrid.geometric)
    init: str | ExplicitInit = "star"
    seed: int = 0
    compute_z: bool = True

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError("N must be a positive integer")
        if self.lam <= 0:
            raise ConfigError(f"arrival rate N - beta sqrt(N) = {self.lam:g} must be positive")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if isinstance(self.init, str) and self.init.lower() not in ("star", "empty"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.sample_times is not None:
            st = np.asarray(self.sample_times, dtype=float)
            if np.any(st < 0) or np.any(st > self.horizon) or np.any(np.diff(st) < 0):
                raise ConfigError("sample_times must be sorted and lie in [0, horizon]")

    @property
    def lam(self) -> float:
        return self.N - self.beta * math.sqrt(self.N)

    @property
    def times(self) -> np.ndarray:
        if self.sample_times is None:
            return np.linspace(0.0, self.horizon, 101)
        return np.asarray(self.sample_times, dtype=float)


@dataclass
class QueueState:
    """Snapshot of the state descriptor at a given time."""

    t: float
    R: float
    X: int
    ages: np.ndarray
    residual_service: np.ndarray
    queue_services: np.ndarray
    E: int
    K: int
    D: int

    @property
    def in_service(self) -> int:
        return self.ages.size


@dataclass
class ScaledPath:
    """Samples of the raw and diffusion-scaled state at the sample times."""

    times: np.ndarray
    X: np.ndarray
    K: np.ndarray
    E: np.ndarray
    D: np.ndarray
    xhat: np.ndarray
    Z: np.ndarray | None
    Zp: np.ndarray | None
    zhat: np.ndarray | None
    zhat_prime: np.ndarray | None
    r_grid: RGrid
    N: int
    beta: float
    seed: int


@dataclass
class QueuePath:
    """Event log of one run plus its sampled :class:`ScaledPath`."""

    config: SimConfig
    bundle: DistributionBundle
    arrival: np.ndarray
    entry: np.ndarray
    departure: np.ndarray
    service: np.ndarray
    server: np.ndarray
    kind: np.ndarray
    X0: int
    R0: float
    samples: ScaledPath | None = None

    @property
    def N(self) -> int:
        return self.config.N

    @property
    def n_init_service(self) -> int:
        return int(np.count_nonzero(self.kind == KIND_INIT_SERVICE))

    def _sorted(self, name):
        cache = self.__dict__.setdefault("_cache", {})
        if name not in cache:
            if name == "arr":
                v = self.arrival[self.kind == KIND_ARRIVAL]
            elif name == "ent":
                v = self.entry[self.kind != KIND_INIT_SERVICE]
            else:
                v = self.departure
            cache[name] = np.sort(v)
        return cache[name]

    def counts_at(self, t):
        """``(E_t, K_t, D_t, X_t)`` with right-continuous counting on ``(0, t]``."""
        t = np.asarray(t, dtype=float)
        E = np.searchsorted(self._sorted("arr"), t, side="right")
        K = np.searchsorted(self._sorted("ent"), t, side="right")
        D = np.searchsorted(self._sorted("dep"), t, side="right")
        X = self.X0 + E - D
        return E, K, D, X

    def ages_at(self, t: float) -> np.ndarray:
        """Ages of the jobs in service at time ``t`` (ordered by entry)."""
        mask = (self.entry <= t) & (self.departure > t)
        return t - self.entry[mask]

    def state_at(self, t: float) -> QueueState:
        E, K, D, X = (int(v) for v in self.counts_at(t))
        mask = (self.entry <= t) & (self.departure > t)
        waiting = (self.entry > t) & ((self.kind == KIND_INIT_QUEUE) |
                                      ((self.kind == KIND_ARRIVAL) & (self.arrival <= t)))
        arr = self._sorted("arr")
        nxt = np.searchsorted(arr, t, side="right")
        R = float(arr[nxt] - t) if nxt < arr.size else math.inf
        return QueueState(t=float(t), R=R, X=X, ages=t - self.entry[mask],
                          residual_service=self.departure[mask] - t,
                          queue_services=self.service[waiting], E=E, K=K, D=D)

    def event_times(self, horizon: float | None = None) -> np.ndarray:
        T = self.config.horizon if horizon is None else horizon
        ev = np.concatenate([self._sorted("arr"), self._sorted("ent"), self._sorted("dep")])
        ev = ev[(ev > 0) & (ev <= T)]
        return np.unique(np.concatenate([[0.0], ev]))


# ---------------------------------------------------------------------------
# engine


@numba.njit(cache=True)
def _heap_push(ht, hs, n, t, s):
    i = n
    ht[i] = t
    hs[i] = s
    while i > 0:
        p = (i - 1) >> 1
        if ht[p] <= ht[i]:
            break
        ht[p], ht[i] = ht[i], ht[p]
        hs[p], hs[i] = hs[i], hs[p]
        i = p
    return n + 1


@numba.njit(cache=True)
def _heap_pop(ht, hs, n):
    t = ht[0]
    s = hs[0]
    n -= 1
    ht[0] = ht[n]
    hs[0] = hs[n]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= n:
            break
        c = l
        if l + 1 < n and ht[l + 1] < ht[l]:
            c = l + 1
        if ht[i] <= ht[c]:
            break
        ht[c], ht[i] = ht[i], ht[c]
        hs[c], hs[i] = hs[i], hs[c]
        i = c
    return t, s, n


@numba.njit(cache=True)
def _fcfs(N, busy_free, arrivals, services, unif):
    """Entry epochs, departure epochs and servers for customers in arrival
    order.  ``busy_free[s]`` is the initial free time of server s, or a
    negative number if it starts idle."""
    n = arrivals.size
    entry = np.empty(n)
    dep = np.empty(n)
    srv = np.empty(n, dtype=np.int64)
    ht = np.empty(N)
    hs = np.empty(N, dtype=np.int64)
    hn = 0
    idle = np.empty(N, dtype=np.int64)
    ni = 0
    for s in range(N):
        if busy_free[s] >= 0.0:
            hn = _heap_push(ht, hs, hn, busy_free[s], s)
        else:
            idle[ni] = s
            ni += 1
    for k in range(n):
        a = arrivals[k]
        # an arrival sees a server freeing at the same epoch as still busy
        while hn > 0 and ht[0] < a:
            t, s, hn = _heap_pop(ht, hs, hn)
            idle[ni] = s
            ni += 1
        if ni > 0:
            j = int(unif[k] * ni)
            if j >= ni:
                j = ni - 1
            s = idle[j]
            idle[j] = idle[ni - 1]
            ni -= 1
            e = a
        else:
            t, s, hn = _heap_pop(ht, hs, hn)
            e = t if t > a else a
        d = e + services[k]
        hn = _heap_push(ht, hs, hn, d, s)
        entry[k] = e
        dep[k] = d
        srv[k] = s
    return entry, dep, srv


# ---------------------------------------------------------------------------
# initial conditions and primitives


def _conditional_residual(bundle: DistributionBundle, ages: np.ndarray, rng) -> np.ndarray:
    """Remaining service of jobs of the given ages: ``isf(u G-bar(a)) - a``."""
    if ages.size == 0:
        return np.zeros(0)
    u = rng.random(ages.size)
    if bundle.spec.family is Family.EXPONENTIAL:
        return -np.log(u) / bundle.rate
    target = u * bundle.sf(ages)
    tot = bundle.isf(np.maximum(target, 1e-300))
    res = tot - ages
    # the inverse can lose the age to rounding; fall back to a tiny positive time
    return np.where(res > 0, res, np.finfo(float).tiny + 0.0 * res)


def init_star(config: SimConfig, rng: np.random.Generator, bundle=None, arrival_bundle=None
              ) -> QueueState:
    """Stationary-fluid start: N jobs in service with residual-law ages,
    empty queue, delay to the first arrival from the equilibrium law of the
    inter-arrival distribution rescaled by the arrival rate."""
    bundle = bundle or build_bundle(config.service)
    arrival_bundle = arrival_bundle or build_bundle(config.arrival)
    N = config.N
    ages = np.asarray(sample_residual(bundle, rng, N), dtype=float)
    resid = _conditional_residual(bundle, ages, rng)
    R0 = float(sample_residual(arrival_bundle, rng, 1)[0]) / config.lam
    return QueueState(t=0.0, R=R0, X=N, ages=ages, residual_service=resid,
                      queue_services=np.zeros(0), E=0, K=0, D=0)


def _initial_state(config, rng, bundle, arrival_bundle) -> QueueState:
    init = config.init
    if isinstance(init, str) and init.lower() == "star":
        return init_star(config, rng, bundle, arrival_bundle)
    if isinstance(init, str):  # empty
        R0 = float(sample_service(arrival_bundle, rng, 1)[0]) / config.lam
        return QueueState(0.0, R0, 0, np.zeros(0), np.zeros(0), np.zeros(0), 0, 0, 0)
    X0 = int(init.X0)
    ages = np.asarray(init.ages, dtype=float)
    if X0 < 0 or ages.size != min(X0, config.N):
        raise ConfigError("explicit init needs one age per busy server (min(X0, N) ages)")
    resid = _conditional_residual(bundle, ages, rng)
    qs = np.asarray(sample_service(bundle, rng, max(X0 - config.N, 0)), dtype=float)
    R0 = init.R0
    if R0 is None:
        R0 = float(sample_service(arrival_bundle, rng, 1)[0]) / config.lam
    return QueueState(0.0, float(R0), X0, ages, resid, qs, 0, 0, 0)


def _arrival_epochs(R0: float, lam: float, horizon: float, arrival_bundle, rng) -> np.ndarray:
    """Renewal epochs in ``(0, horizon]`` starting with ``R0``."""
    if R0 > horizon:
        return np.zeros(0)
    chunks = [np.array([R0])]
    last = R0
    expect = int(lam * horizon * 1.1) + 32
    while last <= horizon:
        gaps = np.asarray(sample_service(arrival_bundle, rng, expect), dtype=float) / lam
        c = last + np.cumsum(gaps)
        chunks.append(c)
        last = c[-1]
        expect = max(int(lam * (horizon - last) * 1.1), 0) + 32
    arr = np.concatenate(chunks)
    return arr[arr <= horizon]


def _assemble(config, bundle, state: QueueState, arrivals, services, unif) -> QueuePath:
    N = config.N
    n0 = state.ages.size
    nq = state.queue_services.size
    busy_free = np.full(N, -1.0)
    busy_free[:n0] = state.residual_service
    cust_arr = np.concatenate([np.zeros(nq), arrivals])
    cust_srv = np.concatenate([state.queue_services, services])
    entry, dep, srv = _fcfs(N, busy_free, cust_arr, cust_srv, unif)
    path = QueuePath(
        config=config, bundle=bundle,
        arrival=np.concatenate([-state.ages, cust_arr]),
        entry=np.concatenate([-state.ages, entry]),
        departure=np.concatenate([state.residual_service, dep]),
        service=np.concatenate([state.ages + state.residual_service, cust_srv]),
        server=np.concatenate([np.arange(n0), srv]),
        kind=np.concatenate([np.full(n0, KIND_INIT_SERVICE), np.full(nq, KIND_INIT_QUEUE),
                             np.full(arrivals.size, KIND_ARRIVAL)]).astype(np.int8),
        X0=state.X, R0=state.R,
    )
    path.samples = _sample(path)
    return path


def _sample(path: QueuePath) -> ScaledPath:
    cfg = path.config
    N = cfg.N
    times = cfg.times
    E, K, D, X = path.counts_at(times)
    sq = math.sqrt(N)
    xhat = (X - N) / sq
    Z = Zp = zhat = zhatp = None
    if cfg.compute_z:
        nodes = cfg.r_grid.nodes
        Z = np.empty((times.size, nodes.size))
        Zp = np.empty_like(Z)
        for i, t in enumerate(times):
            a = path.ages_at(t)
            Z[i] = t_map(path.bundle, a, nodes)
            Zp[i] = t_map_derivative(path.bundle, a, nodes)
        zb = fluid_z(path.bundle, nodes)
        gb = path.bundle.sf(nodes)
        zhat = (Z - N * zb) / sq
        zhatp = (Zp + N * gb) / sq
    return ScaledPath(times=times, X=X, K=K, E=E, D=D, xhat=xhat, Z=Z, Zp=Zp, zhat=zhat,
                      zhat_prime=zhatp, r_grid=cfg.r_grid, N=N, beta=cfg.beta, seed=cfg.seed)


def run(config: SimConfig, rng: np.random.Generator | None = None) -> QueuePath:
    """Simulate one path on ``[0, horizon]``.

    Random draws happen in a fixed order (initial state, arrivals, services,
    server-selection uniforms), so a seed determines the event log exactly.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    bundle = build_bundle(config.service)
    arrival_bundle = build_bundle(config.arrival)
    state = _initial_state(config, rng, bundle, arrival_bundle)
    arrivals = _arrival_epochs(state.R, config.lam, config.horizon, arrival_bundle, rng)
    services = np.asarray(sample_service(bundle, rng, arrivals.size), dtype=float)
    unif = rng.random(state.queue_services.size + arrivals.size)
    return _assemble(config, bundle, state, arrivals, services, unif)


def run_with_primitives(N: int, arrivals, services, horizon: float, service: DistributionSpec,
                        init_ages=(), init_residuals=(), queue_services=(), beta: float = 0.0,
                        sample_times=None, r_grid: RGrid | None = None, seed: int = 0,
                        compute_z: bool = True) -> QueuePath:
    """Run the engine on given arrival epochs and service times.

    Useful for hand-traceable checks and degenerate inputs (for instance no
    arrivals at all).  ``beta`` only enters the scaling metadata.
    """
    cfg = SimConfig(N=N, beta=beta, service=service, horizon=horizon, sample_times=sample_times,
                    r_grid=r_grid or RGrid.geometric(), init="empty", seed=seed,
                    compute_z=compute_z)
    bundle = build_bundle(service)
    ages = np.asarray(init_ages, dtype=float)
    res = np.asarray(init_residuals, dtype=float)
    qs = np.asarray(queue_services, dtype=float)
    arr = np.asarray(arrivals, dtype=float)
    state = QueueState(0.0, float(arr[0]) if arr.size else math.inf, ages.size + qs.size,
                       ages, res, qs, 0, 0, 0)
    unif = np.random.default_rng(seed).random(qs.size + arr.size)
    return _assemble(cfg, bundle, state, arr, np.asarray(services, dtype=float), unif)


# ---------------------------------------------------------------------------
# derived quantities


def fluid_scale(path: QueuePath, N: int | None = None) -> dict:
    """Fluid-scaled samples ``X/N``, ``Z/N`` and ``E/N``."""
    N = path.N if N is None else N
    s = path.samples
    return {"times": s.times, "X": s.X / N, "E": s.E / N, "K": s.K / N,
            "Z": None if s.Z is None else s.Z / N}


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _job_windows(path: QueuePath, t: float):
    start = np.maximum(path.entry, 0.0)
    stop = np.minimum(path.departure, t)
    keep = stop > start
    return path.entry[keep], start[keep], stop[keep], path.departure[keep], path.service[keep]


def compensated_departure(path: QueuePath, f: Callable, t: float, rule: str = "gauss",
                          substep: float = 1.0) -> float:
    """``Q_f(t) - A_f(t)`` for a test function ``f(x, s)`` of age and time.

    ``Q_f`` sums ``f(v_j, departure_j)`` over departures in ``(0, t]`` and
    ``A_f`` integrates ``sum_j f(a_j(s), s) h(a_j(s))`` along the age flow.
    ``rule`` is ``"gauss"`` (8-point Gauss-Legendre on sub-intervals of
    length at most ``substep``) or ``"left"`` (left-endpoint rule with step
    ``substep``, first-order accurate).
    """
    bundle = path.bundle
    dmask = (path.departure > 0) & (path.departure <= t)
    Q = float(np.sum(f(path.service[dmask], path.departure[dmask]))) if dmask.any() else 0.0
    ent, a, b, _, _ = _job_windows(path, t)
    if ent.size == 0:
        return Q
    nsub = np.maximum(np.ceil((b - a) / substep).astype(np.int64), 1)
    job = np.repeat(np.arange(ent.size), nsub)
    first = np.repeat(np.cumsum(nsub) - nsub, nsub)
    k = np.arange(job.size) - first
    width = (b - a)[job] / nsub[job]
    lo = a[job] + k * width
    if rule == "gauss":
        s = lo[:, None] + 0.5 * width[:, None] * (_GL_X[None, :] + 1.0)
        w = 0.5 * width[:, None] * _GL_W[None, :]
    elif rule == "left":
        s = lo[:, None]
        w = width[:, None]
    else:
        raise ValueError(f"unknown rule {rule!r}")
    x = s - ent[job][:, None]
    A = float(np.sum(w * f(x, s) * bundle.hazard(x)))
    return Q - A


def compensated_departure_psi(path: QueuePath, u, t: float) -> np.ndarray:
    """``Q - A`` for the kernels ``(x, s) -> G-bar(x + u - s) / G-bar(x)``
    with ``u >= t``, in closed form.

    Along one job's age flow the compensator integrand is
    ``G-bar(u - entry) g(a) / G-bar(a)^2``, whose antiderivative in the age
    is ``G-bar(u - entry) / G-bar(a)``.
    """
    bundle = path.bundle
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u < t):
        raise ValueError("closed form needs u >= t")
    dmask = (path.departure > 0) & (path.departure <= t)
    out = np.zeros(u.size)
    if dmask.any():
        v, d = path.service[dmask], path.departure[dmask]
        out += bundle.survival_ratio(v[:, None], u[None, :] - d[:, None]).sum(axis=0)
    ent, a, b, _, _ = _job_windows(path, t)
    if ent.size:
        a_start, a_end = a - ent, b - ent
        c = u[None, :] - ent[:, None]
        A = (bundle.survival_ratio(a_end[:, None], c - a_end[:, None])
             - bundle.survival_ratio(a_start[:, None], c - a_start[:, None]))
        out -= A.sum(axis=0)
    return out


def check_invariants(path: QueuePath, times=None) -> dict:
    """Exact pathwise identities at every event time (or the given times).

    The in-service count is obtained by direct counting over the event log,
    independently of the counters used for X and K.
    """
    times = path.event_times() if times is None else np.asarray(times, dtype=float)
    E, K, D, X = path.counts_at(times)
    N = path.N
    order_e = np.sort(path.entry)
    order_d = np.sort(path.departure)
    busy = (np.searchsorted(order_e, times, side="right")
            - np.searchsorted(order_d, times, side="right"))
    sq = math.sqrt(N)
    xhat = (X - N) / sq
    zhat0 = (np.minimum(busy, N) - N * path.bundle.mean) / sq
    mass = K - (E - np.maximum(X - N, 0) + max(path.X0 - N, 0))
    return {
        "n_times": int(times.size),
        "non_idling": int(np.max(np.abs(busy - np.minimum(X, N)))),
        "boundary": float(np.max(np.abs(zhat0 + np.maximum(-xhat, 0.0)))),
        "mass_balance": int(np.max(np.abs(mass))),
        "K_monotone": bool(np.all(np.diff(K) >= 0)),
        "D_monotone": bool(np.all(np.diff(D) >= 0)),
    }
