"""Stationary-law estimation, exact finite-N oracles and two-sample comparisons."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .distributions import DistributionSpec, build_bundle, sample_residual, sample_service
from .kernels import h1_norm
from .parallel import parallel_map, seed_split
from .queue_sim import SimConfig, run

__all__ = [
    "UsageError",
    "InstabilityError",
    "EmpiricalLaw",
    "ComparisonReport",
    "ks_distance",
    "w1_distance",
    "compare",
    "erlang_oracle",
    "total_variation",
    "estimate_queue_stationary",
    "extract_functionals",
    "lhat_bound",
    "SweepRow",
    "convergence_sweep",
    "trend_statistic",
]


class UsageError(ValueError):
    """Inputs that cannot be meaningfully combined."""


class InstabilityError(ValueError):
    """Arrival rate at or above the service capacity."""


@dataclass
class EmpiricalLaw:
    """Sorted sample of one scalar functional."""

    sample: np.ndarray
    label: str
    replications: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_sample(cls, values, label: str, replications: int | None = None, **meta):
        v = np.sort(np.asarray(values, dtype=float).ravel())
        return cls(v, label, v.size if replications is None else int(replications), dict(meta))

    @property
    def n(self) -> int:
        return self.sample.size

    def ecdf(self, x):
        """Right-continuous empirical CDF."""
        return np.searchsorted(self.sample, np.asarray(x, dtype=float), side="right") / self.n

    def mean(self) -> float:
        return float(np.mean(self.sample))

    def var(self) -> float:
        return float(np.var(self.sample, ddof=1)) if self.n > 1 else 0.0

    def quantile(self, q):
        return np.quantile(self.sample, q)

    def bootstrap_mean_se(self, n_boot: int = 1000, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        counts = rng.multinomial(self.n, np.full(self.n, 1.0 / self.n), size=n_boot)
        means = counts @ self.sample / self.n
        return float(np.std(means, ddof=1))


def _ecdf_pair(a: np.ndarray, b: np.ndarray):
    pts = np.concatenate([a, b])
    pts.sort(kind="mergesort")
    ia = np.searchsorted(a, pts, side="right")
    ib = np.searchsorted(b, pts, side="right")
    return pts, ia, ib


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    _, ia, ib = _ecdf_pair(a, b)
    return float(np.max(np.abs(ia / a.size - ib / b.size)))


def w1_distance(a, b) -> float:
    """Wasserstein-1 distance ``int |F_a - F_b| dx`` between two samples."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    pts, ia, ib = _ecdf_pair(a, b)
    diff = np.abs(ia / a.size - ib / b.size)[:-1]
    return float(np.sum(diff * np.diff(pts)))


@dataclass
class ComparisonReport:
    label: str
    n_a: int
    n_b: int
    ks: float
    w1: float
    mean_delta: float
    var_delta: float
    ks_se: float
    w1_se: float
    ks_ci: tuple
    w1_ci: tuple
    n_boot: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ks_ci"] = list(self.ks_ci)
        d["w1_ci"] = list(self.w1_ci)
        return d


def compare(law_a: EmpiricalLaw, law_b: EmpiricalLaw, n_boot: int = 1000, level: float = 0.95,
            seed: int = 0) -> ComparisonReport:
    """KS and W1 distances with percentile-bootstrap intervals.

    Each bootstrap replicate resamples both samples independently.  Resamples
    are drawn as multinomial counts over the sorted values, so the ECDFs of
    a replicate come from cumulative sums without re-sorting.
    """
    if law_a.label != law_b.label:
        raise UsageError(f"cannot compare {law_a.label!r} with {law_b.label!r}")
    a, b = law_a.sample, law_b.sample
    na, nb = a.size, b.size
    pts, ia, ib = _ecdf_pair(a, b)
    gaps = np.diff(pts)
    fa, fb = ia / na, ib / nb
    ks = float(np.max(np.abs(fa - fb)))
    w1 = float(np.sum(np.abs(fa - fb)[:-1] * gaps))
    rng = np.random.default_rng(seed)
    ks_b = np.empty(n_boot)
    w1_b = np.empty(n_boot)
    pa = np.full(na, 1.0 / na)
    pb = np.full(nb, 1.0 / nb)
    for i in range(n_boot):
        ca = np.concatenate([[0], np.cumsum(rng.multinomial(na, pa))])
        cb = np.concatenate([[0], np.cumsum(rng.multinomial(nb, pb))])
        d = np.abs(ca[ia] / na - cb[ib] / nb)
        ks_b[i] = d.max()
        w1_b[i] = np.sum(d[:-1] * gaps)
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    return ComparisonReport(
        label=law_a.label, n_a=na, n_b=nb, ks=ks, w1=w1,
        mean_delta=float(a.mean() - b.mean()), var_delta=law_a.var() - law_b.var(),
        ks_se=float(np.std(ks_b, ddof=1)), w1_se=float(np.std(w1_b, ddof=1)),
        ks_ci=tuple(np.quantile(ks_b, [lo, hi]).tolist()),
        w1_ci=tuple(np.quantile(w1_b, [lo, hi]).tolist()), n_boot=n_boot)


# ---------------------------------------------------------------------------
# exact oracle


def erlang_oracle(N: int, lam: float, k_max: int | None = None, tail_tol: float = 1e-14
                  ) -> np.ndarray:
    """Stationary distribution of the M/M/N queue length (unit service rate).

    Computed in log space; the support is cut where the geometric tail mass
    falls below ``tail_tol`` (and never below ``10 N + 1``).
    """
    if not lam < N:
        raise InstabilityError(f"arrival rate {lam} must be below {N}")
    if lam <= 0:
        out = np.zeros(max(k_max or 1, 1))
        out[0] = 1.0
        return out
    rho = lam / N
    if k_max is None:
        extra = math.ceil(math.log(tail_tol * (1 - rho)) / math.log(rho)) if rho > 0 else 0
        k_max = max(10 * N + 1, N + extra)
    k = np.arange(k_max + 1)
    logp = np.where(k <= N,
                    k * math.log(lam) - special.gammaln(k + 1),
                    N * math.log(lam) - special.gammaln(N + 1) + (k - N) * math.log(rho))
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    n = max(p.size, q.size)
    pp = np.zeros(n)
    qq = np.zeros(n)
    pp[:p.size] = p
    qq[:q.size] = q
    return float(0.5 * np.sum(np.abs(pp - qq)))


# ---------------------------------------------------------------------------
# queue stationary sampling


def _node_index(nodes: np.ndarray, r: float) -> int:
    return int(np.argmin(np.abs(nodes - r)))


def extract_functionals(samples, row: int, names: Sequence[str]) -> dict:
    """Scalar functionals of one sampled state.

    Known names: ``X``, ``xhat``, ``xhat_plus``, ``zhat0``, ``zhat_h1`` and
    ``zhat_r=<value>`` (nearest grid node).
    """
    out = {}
    for name in names:
        if name == "X":
            out[name] = float(samples.X[row])
        elif name == "xhat":
            out[name] = float(samples.xhat[row])
        elif name == "xhat_plus":
            out[name] = max(float(samples.xhat[row]), 0.0)
        elif name == "zhat0":
            out[name] = float(samples.zhat[row, 0])
        elif name == "zhat_h1":
            out[name] = h1_norm(samples.zhat[row], samples.zhat_prime[row], samples.r_grid)
        elif name.startswith("zhat_r="):
            r = float(name.split("=", 1)[1])
            out[name] = float(samples.zhat[row, _node_index(samples.r_grid.nodes, r)])
        else:
            raise UsageError(f"unknown functional {name!r}")
    return out


def _needs_z(names) -> bool:
    return any(n.startswith("zhat") for n in names)


def _replication(index: int, config: SimConfig, burn_in: float, names: tuple) -> dict:
    cfg = replace(config, horizon=burn_in, sample_times=[burn_in],
                  seed=seed_split(config.seed, index), compute_z=_needs_z(names))
    return extract_functionals(run(cfg).samples, 0, names)


def estimate_queue_stationary(config: SimConfig, burn_in: float = 50.0, n_draws: int = 1000,
                              spacing: float | None = None, mode: str = "replications",
                              functionals: Sequence[str] = ("xhat",), threads: int | None = None
                              ) -> dict:
    """Stationary samples of the requested functionals.

    ``mode="replications"`` runs ``n_draws`` independent paths (seeds derived
    from ``config.seed``) to time ``burn_in`` and records one draw each.
    ``mode="path"`` runs one long path and records draws every ``spacing``
    time units after ``burn_in``; the lag-1 autocorrelation of each
    functional is stored in the law's metadata.
    """
    names = tuple(functionals)
    meta = {"mode": mode, "burn_in": burn_in, "N": config.N, "beta": config.beta,
            "service": config.service.to_text(), "master_seed": config.seed,
            "recommended_burn_in": 50.0}
    if mode == "replications":
        rows = parallel_map(partial(_replication, config=config, burn_in=burn_in, names=names),
                            range(n_draws), threads)
        return {nm: EmpiricalLaw.from_sample([r[nm] for r in rows], nm, n_draws, **meta)
                for nm in names}
    if mode != "path":
        raise UsageError(f"unknown mode {mode!r}")
    if spacing is None or spacing <= 0:
        raise UsageError("path mode needs a positive spacing")
    times = burn_in + spacing * np.arange(n_draws)
    cfg = replace(config, horizon=float(times[-1]), sample_times=times, compute_z=_needs_z(names))
    s = run(cfg).samples
    rows = [extract_functionals(s, i, names) for i in range(n_draws)]
    laws = {}
    for nm in names:
        v = np.array([r[nm] for r in rows])
        ac = float(np.corrcoef(v[:-1], v[1:])[0, 1]) if v.size > 2 and v.std() > 0 else 0.0
        laws[nm] = EmpiricalLaw.from_sample(v, nm, 1, spacing=spacing, lag1_autocorrelation=ac,
                                            **meta)
    return laws


# ---------------------------------------------------------------------------
# supremum bound


def _stationary_renewal(bundle, rate: float, horizon: float, n_proc: int, rng) -> np.ndarray:
    """Event epochs in ``(0, horizon]`` of ``n_proc`` independent stationary
    renewal processes with inter-event law ``bundle`` scaled to ``rate``;
    returned as one flat array."""
    first = np.asarray(sample_residual(bundle, rng, n_proc), dtype=float) / rate
    events = [first[first <= horizon]]
    last = first.copy()
    alive = last <= horizon
    while alive.any():
        idx = np.flatnonzero(alive)
        m = max(int(rate * (horizon - last[idx].min()) * 1.2) + 8, 8)
        gaps = np.asarray(sample_service(bundle, rng, idx.size * m), dtype=float).reshape(idx.size, m)
        ep = last[idx, None] + np.cumsum(gaps / rate, axis=1)
        events.append(ep[ep <= horizon])
        last[idx] = ep[:, -1]
        alive = last <= horizon
    return np.sort(np.concatenate(events))


def lhat_bound(config: SimConfig, horizon: float, replications: int,
               arrival_rate: float | None = None) -> EmpiricalLaw:
    """Samples of ``sup_{t <= T} (A(t) - sum_i D_i(t)) / sqrt(N)``.

    ``A`` is a stationary renewal process of rate ``arrival_rate`` (default
    ``N - beta sqrt(N)``) and the ``D_i`` are ``N`` independent stationary
    renewal processes of service completions.  Between events the difference
    only decreases, so the supremum is taken over ``t = 0`` and the arrival
    epochs.
    """
    N = config.N
    lam = config.lam if arrival_rate is None else float(arrival_rate)
    sb = build_bundle(config.service)
    ab = build_bundle(config.arrival)
    out = np.empty(replications)
    for i in range(replications):
        rng = np.random.default_rng(seed_split(config.seed, i))
        if lam <= 0:
            out[i] = 0.0
            continue
        arr = _stationary_renewal(ab, lam, horizon, 1, rng)
        dep = _stationary_renewal(sb, 1.0, horizon, N, rng)
        if arr.size == 0:
            out[i] = 0.0
            continue
        diff = np.arange(1, arr.size + 1) - np.searchsorted(dep, arr, side="right")
        out[i] = max(0.0, float(diff.max())) / math.sqrt(N)
    return EmpiricalLaw.from_sample(out, "lhat", replications, N=N, horizon=horizon)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    N: int
    functional: str
    report: ComparisonReport
    queue_mean: float
    queue_mean_se: float


def trend_statistic(values: Sequence[float], ses: Sequence[float], z: float = 2.0) -> dict:
    """Monotone-decrease summary of a sequence with standard errors.

    ``decreasing`` asks only for strict decrease of the point values;
    ``decreasing_beyond_noise`` asks every drop to exceed ``z`` combined
    standard errors.
    """
    v = np.asarray(values, dtype=float)
    s = np.asarray(ses, dtype=float)
    drops = v[:-1] - v[1:]
    noise = z * np.sqrt(s[:-1] ** 2 + s[1:] ** 2)
    return {"decreasing": bool(np.all(drops > 0)),
            "decreasing_beyond_noise": bool(np.all(drops > noise)),
            "drops": drops.tolist(), "noise": noise.tolist(), "z": z}


def convergence_sweep(service: DistributionSpec, beta: float, N_list: Sequence[int],
                      functionals: Sequence[str], diffusion_laws: Mapping[str, EmpiricalLaw],
                      n_draws: int = 1000, burn_in: float = 50.0, seed: int = 0,
                      arrival: DistributionSpec | None = None, n_boot: int = 1000,
                      threads: int | None = None, queue_laws: Mapping | None = None) -> dict:
    """Compare queue stationary laws at each N against diffusion laws.

    Returns ``{"rows": [...], "trend": {functional: ...} or None}``; the
    trend statistic is omitted for a single N.  Precomputed queue laws can be
    passed as ``queue_laws[N][functional]``.
    """
    rows = []
    for N in N_list:
        if queue_laws is not None and N in queue_laws:
            laws = queue_laws[N]
        else:
            kw = {} if arrival is None else {"arrival": arrival}
            cfg = SimConfig(N=int(N), beta=beta, service=service, horizon=burn_in,
                            seed=seed_split(seed, int(N)), **kw)
            laws = estimate_queue_stationary(cfg, burn_in, n_draws, functionals=functionals,
                                             threads=threads)
        for nm in functionals:
            rep = compare(laws[nm], diffusion_laws[nm], n_boot=n_boot, seed=int(N))
            rows.append(SweepRow(int(N), nm, rep, laws[nm].mean(),
                                 float(np.std(laws[nm].sample, ddof=1) / math.sqrt(laws[nm].n))))
    trend = None
    if len(N_list) > 1:
        trend = {}
        for nm in functionals:
            sel = [r for r in rows if r.functional == nm]
            trend[nm] = trend_statistic([r.report.ks for r in sel], [r.report.ks_se for r in sel])
    return {"rows": rows, "trend": trend}
