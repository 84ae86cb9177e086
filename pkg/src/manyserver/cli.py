"""Batch front end: ``manyserver <kind> --config FILE [--out DIR] ...``.

Each run writes ``results.csv``, ``report.json``, ``manifest.json`` and a
binary ``cache.npz`` into the output directory.  Everything except the
manifest (which records the wall time) is a deterministic function of the
configuration, whatever the number of worker processes.

Exit status: 0 on success, 1 if a requested check fails, 2 on a
configuration error, 3 if the run would exceed the resource limit.
"""
from __future__ import annotations

import argparse
import math
import platform
import sys
import time
from functools import partial
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io as mio
from .config import ConfigParseError, ExperimentConfig, KINDS, load_config, parse_config
from .diagnostics import identity_audit
from .diffusion import estimate_diffusion_stationary, run_diffusion
from .distributions import Family, build_bundle, verify_assumptions
from .parallel import default_threads, parallel_map, seed_split
from .queue_sim import check_invariants, run
from .stationary import (EmpiricalLaw, compare, convergence_sweep, erlang_oracle,
                         estimate_queue_stationary, total_variation)

__all__ = ["run_experiment", "seed_split", "main", "ResourceLimitError"]


class ResourceLimitError(RuntimeError):
    """Requested work exceeds ``[experiment] max_customers``."""


def _check(value, threshold, ok) -> dict:
    return {"value": value, "threshold": threshold, "pass": bool(ok)}


def _limit(cfg: ExperimentConfig, customers: float) -> None:
    cap = cfg.get_float("experiment", "max_customers", 2e8)
    if customers > cap:
        raise ResourceLimitError(f"about {customers:.3g} simulated customers requested, "
                                 f"limit is {cap:.3g} ([experiment] max_customers)")


# ---------------------------------------------------------------------------
# workers (module level so that they pickle)


def _queue_worker(index: int, cfg: ExperimentConfig) -> dict:
    seed = seed_split(cfg.seed, index)
    path = run(cfg.sim_config(seed=seed))
    s = path.samples
    rows = []
    for i, t in enumerate(s.times):
        rows.append(["queue", index, seed, t, int(s.X[i]), int(s.K[i]), int(s.E[i]), int(s.D[i]),
                     s.xhat[i], *s.zhat[i], *s.zhat_prime[i]])
    inv = check_invariants(path)
    collapse = None
    if path.bundle.spec.family is Family.EXPONENTIAL:
        ref = np.exp(-s.r_grid.nodes)[None, :] * np.minimum(s.X, path.N)[:, None]
        collapse = float(np.max(np.abs(s.Z - ref) / np.maximum(np.abs(ref), 1e-300)))
    return {"rows": rows, "invariants": inv, "collapse": collapse,
            "arrays": {f"rep{index}_xhat": s.xhat, f"rep{index}_zhat": s.zhat}}


def _diffusion_worker(index: int, cfg: ExperimentConfig) -> dict:
    seed = seed_split(cfg.seed, index)
    p = run_diffusion(cfg.diffusion_config(seed=seed))
    idx = np.rint(p.sample_times / (p.times[1] - p.times[0])).astype(int)
    rows = []
    for q, j in enumerate(idx):
        rows.append(["diffusion", index, seed, p.sample_times[q], p.X[j], p.K[j], p.E[j], None,
                     p.X[j], *p.Z[q], *p.Zp[q]])
    return {"rows": rows, "boundary": p.boundary_error, "residual": p.residual_eq1,
            "rank": p.rank, "arrays": {f"rep{index}_X": p.X, f"rep{index}_K": p.K}}


def _audit_worker(index: int, cfg: ExperimentConfig) -> dict:
    seed = seed_split(cfg.seed, index)
    path = run(cfg.sim_config(seed=seed))
    times = cfg.get_list("audit", "times")
    rep = identity_audit(path, times=times, rule=cfg.get("audit", "rule", "gauss"),
                         substep=cfg.get_float("audit", "substep", 1.0))
    diff = np.abs(rep.direct - rep.reconstructed)
    scale = max(float(np.max(np.abs(rep.direct))), 1.0)
    rows = [[index, seed, t, float(diff[i].max()), float(diff[i].max() / scale),
             float(diff[i].max() / math.sqrt(path.N))] for i, t in enumerate(rep.times)]
    return {"rows": rows, "max_rel": rep.max_rel}


# ---------------------------------------------------------------------------
# experiment kinds


def _run_simulate_queue(cfg, threads, checks):
    sc = cfg.sim_config()
    _limit(cfg, sc.lam * sc.horizon * cfg.replications)
    res = parallel_map(partial(_queue_worker, cfg=cfg), range(cfg.replications), threads)
    rows = [r for out in res for r in out["rows"]]
    inv = [out["invariants"] for out in res]
    worst = {k: max(i[k] for i in inv) for k in ("non_idling", "boundary", "mass_balance")}
    report = {"invariants": worst, "collapse": [o["collapse"] for o in res]}
    results = {}
    if "invariants" in checks:
        results["invariants"] = _check(worst, 0, all(v == 0 for v in worst.values()))
    if "collapse" in checks:
        thr = checks["collapse"] if checks["collapse"] is not None else 1e-12
        vals = [o["collapse"] for o in res]
        if any(v is None for v in vals):
            # the collapse identity only holds for exponential service
            results["collapse"] = _check(None, thr, False)
        else:
            results["collapse"] = _check(max(vals), thr, max(vals) <= thr)
    arrays = {k: v for o in res for k, v in o["arrays"].items()}
    arrays["r_nodes"] = sc.r_grid.nodes
    return mio.path_header(len(sc.r_grid)), rows, report, results, arrays


def _run_simulate_diffusion(cfg, threads, checks):
    dc = cfg.diffusion_config()
    res = parallel_map(partial(_diffusion_worker, cfg=cfg), range(cfg.replications), threads)
    rows = [r for out in res for r in out["rows"]]
    report = {"boundary_error": [o["boundary"] for o in res],
              "cms_residual": [o["residual"] for o in res], "rank": res[0]["rank"]}
    results = {}
    if "boundary" in checks:
        thr = checks["boundary"] if checks["boundary"] is not None else 5 * dc.dt
        v = max(o["boundary"] for o in res)
        results["boundary"] = _check(v, thr, v <= thr)
    if "residual" in checks:
        thr = checks["residual"] if checks["residual"] is not None else 10 * dc.dt ** 2
        v = max(o["residual"] for o in res)
        results["residual"] = _check(v, thr, v <= thr)
    arrays = {k: v for o in res for k, v in o["arrays"].items()}
    arrays["times"] = dc.times
    return mio.path_header(len(dc.r_grid)), rows, report, results, arrays


def _diffusion_law(cfg, section, label="xhat"):
    horizon = cfg.get_float(section, "diffusion_horizon", 30.0)
    dt = cfg.get_float(section, "diffusion_dt", 0.02)
    n = cfg.get_int(section, "diffusion_draws", 0)
    dc = cfg.diffusion_config(horizon=horizon, dt=dt, seed=seed_split(cfg.seed, 2 ** 40))
    law = estimate_diffusion_stationary(dc, burn_in=horizon - dt, n_draws=n)
    if label == "xhat_plus":
        law = EmpiricalLaw.from_sample(np.maximum(law.sample, 0.0), label, law.replications)
    else:
        law.label = label
    return law


def _run_stationary(cfg, threads, checks):
    sc = cfg.sim_config()
    burn = cfg.get_float("stationary", "burn_in", 50.0)
    n = cfg.get_int("stationary", "n_draws", 1000)
    mode = cfg.get("stationary", "mode", "replications")
    spacing = cfg.get_float("stationary", "spacing", None)
    names = cfg.get_list("stationary", "functionals", ["xhat"], cast=str)
    _limit(cfg, sc.lam * (burn * n if mode == "replications" else burn + n * (spacing or 0)))
    laws = estimate_queue_stationary(sc, burn, n, spacing=spacing, mode=mode, functionals=names,
                                     threads=threads)
    rows = []
    report = {"queue": {}, "comparison": {}}
    for nm in names:
        law = laws[nm]
        rows += [["queue", sc.N, nm, i, v] for i, v in enumerate(law.sample)]
        report["queue"][nm] = {"n": law.n, "mean": law.mean(), "var": law.var(),
                               "meta": law.meta}
    results = {}
    if cfg.get_int("stationary", "diffusion_draws", 0) > 0:
        for nm in names:
            if nm not in ("xhat", "xhat_plus"):
                continue
            dl = _diffusion_law(cfg, "stationary", nm)
            rows += [["diffusion", "", nm, i, v] for i, v in enumerate(dl.sample)]
            report["comparison"][nm] = compare(laws[nm], dl).to_dict()
    if "erlang_tv" in checks:
        if "X" not in laws or sc.service.family is not Family.EXPONENTIAL \
                or sc.arrival.family is not Family.EXPONENTIAL:
            raise ConfigParseError("[experiment] checks: erlang_tv needs exponential laws and "
                                   "functional X")
        p = erlang_oracle(sc.N, sc.lam)
        x = laws["X"].sample.astype(int)
        emp = np.bincount(x, minlength=p.size) / x.size
        tv = total_variation(emp, p)
        thr = checks["erlang_tv"] if checks["erlang_tv"] is not None else 0.02
        report["erlang_tv"] = tv
        results["erlang_tv"] = _check(tv, thr, tv < thr)
    return mio.SCHEMAS["stationary"], rows, report, results, {}


def _run_sweep(cfg, threads, checks):
    sc = cfg.sim_config()
    Ns = cfg.get_list("sweep", "n_list", cast=int)
    if not Ns:
        raise ConfigParseError("[sweep] n_list: missing")
    names = cfg.get_list("sweep", "functionals", ["xhat"], cast=str)
    for nm in names:
        if nm not in ("xhat", "xhat_plus"):
            raise ConfigParseError(f"[sweep] functionals: {nm!r} has no diffusion counterpart")
    n = cfg.get_int("sweep", "n_draws", 1000)
    burn = cfg.get_float("sweep", "burn_in", 50.0)
    _limit(cfg, sum(Ns) * burn * n)
    if cfg.get_int("sweep", "diffusion_draws", 0) <= 0:
        cfg.sections.setdefault("sweep", {})["diffusion_draws"] = str(n)
    dlaws = {nm: _diffusion_law(cfg, "sweep", nm) for nm in names}
    sw = convergence_sweep(sc.service, sc.beta, Ns, names, dlaws, n_draws=n, burn_in=burn,
                           seed=cfg.seed, arrival=sc.arrival,
                           n_boot=cfg.get_int("sweep", "n_boot", 1000), threads=threads)
    rows = []
    for r in sw["rows"]:
        c = r.report
        rows.append([r.N, r.functional, c.n_a, c.n_b, c.ks, c.ks_se, c.ks_ci[0], c.ks_ci[1], c.w1,
                     c.w1_se, c.w1_ci[0], c.w1_ci[1], c.mean_delta, c.var_delta, r.queue_mean,
                     r.queue_mean_se])
    report = {"trend": sw["trend"], "rows": [dict(N=r.N, functional=r.functional,
                                                  **r.report.to_dict()) for r in sw["rows"]]}
    results = {}
    if "ks_decreasing" in checks and sw["trend"] is not None:
        ok = all(t["decreasing_beyond_noise"] for t in sw["trend"].values())
        results["ks_decreasing"] = _check(sw["trend"], None, ok)
    if "final_ks" in checks:
        thr = checks["final_ks"] if checks["final_ks"] is not None else 0.05
        last = [r.report.ks for r in sw["rows"] if r.N == Ns[-1]]
        results["final_ks"] = _check(max(last), thr, max(last) < thr)
    return mio.SCHEMAS["sweep"], rows, report, results, {}


def _run_verify(cfg, threads, checks):
    bundle = build_bundle(cfg.distribution("service"))
    x_max = cfg.get_float("verify", "x_max", 100.0 * bundle.mean)
    pts = cfg.get_int("verify", "points", 4000)
    grid = np.concatenate([[0.0], np.geomspace(1e-4, x_max, pts)])
    rep = verify_assumptions(bundle, grid)
    rows = [[k, c["value"], c["threshold"], c["pass"]] for k, c in sorted(rep.clauses.items())]
    report = rep.to_dict()
    report["grid"].pop("nodes", None)
    results = {}
    if "assumptions" in checks:
        results["assumptions"] = _check(rep.passed, True, rep.passed)
    return mio.SCHEMAS["verify"], rows, report, results, {"grid": grid}


def _run_audit(cfg, threads, checks):
    sc = cfg.sim_config()
    _limit(cfg, sc.lam * sc.horizon * cfg.replications)
    res = parallel_map(partial(_audit_worker, cfg=cfg), range(cfg.replications), threads)
    rows = [r for out in res for r in out["rows"]]
    worst = max(o["max_rel"] for o in res)
    report = {"max_rel": worst}
    results = {}
    if "audit" in checks:
        thr = checks["audit"] if checks["audit"] is not None else 1e-3
        results["audit"] = _check(worst, thr, worst <= thr)
    return mio.SCHEMAS["audit"], rows, report, results, {}


_RUNNERS = {
    "simulate-queue": _run_simulate_queue,
    "simulate-diffusion": _run_simulate_diffusion,
    "stationary": _run_stationary,
    "sweep": _run_sweep,
    "verify-dist": _run_verify,
    "audit": _run_audit,
}

_DEFAULT_CHECKS = {
    "simulate-queue": {"invariants": None},
    "simulate-diffusion": {"boundary": None},
    "stationary": {},
    "sweep": {"ks_decreasing": None},
    "verify-dist": {"assumptions": None},
    "audit": {"audit": None},
}


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def run_experiment(config, out=None, kind: str | None = None, seed: int | None = None,
                   threads: int | None = None, check: bool = False) -> int:
    """Run one experiment and write its artifacts; returns the exit status."""
    start = time.perf_counter()
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    cfg = cfg.with_overrides(kind=kind, seed=seed)
    kind = cfg.kind
    if kind not in KINDS:
        raise ConfigParseError(f"[experiment] kind: unknown or missing experiment kind {kind!r}")
    threads = threads or cfg.threads or default_threads()
    out = Path(out or cfg.get("experiment", "out", "results"))
    out.mkdir(parents=True, exist_ok=True)
    checks = dict(cfg.checks)
    if check:
        for k, v in _DEFAULT_CHECKS[kind].items():
            checks.setdefault(k, v)
    header, rows, report, results, arrays = _RUNNERS[kind](cfg, threads, checks)
    mio.write_csv(out / "results.csv", header, rows)
    failed = [k for k, v in results.items() if not v["pass"]]
    mio.write_json(out / "report.json", {"kind": kind, "config_hash": cfg.hash(),
                                         "master_seed": cfg.seed, "report": report,
                                         "checks": results, "failed_checks": failed})
    mio.write_npz(out / "cache.npz", arrays)
    mio.write_json(out / "manifest.json", {
        "config": cfg.to_text(), "config_hash": cfg.hash(), "kind": kind,
        "master_seed": cfg.seed, "replications": cfg.replications,
        "seed_scheme": "splitmix64 counter mode over (master seed, replication index)",
        "threads": threads, "versions": _versions(), "csv_schema_version":
            mio.CSV_SCHEMA_VERSION, "csv_columns": header,
        "wall_time_seconds": round(time.perf_counter() - start, 3),
    })
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="manyserver", description=__doc__.splitlines()[0])
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", required=True, help="experiment file")
    parser.add_argument("--out", help="output directory (default: [experiment] out or ./results)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--threads", type=int,
                        help="worker processes (default: MANYSERVER_THREADS or 1)")
    parser.add_argument("--check", action="store_true",
                        help="also run the default checks for this kind; exit 1 on failure")
    args = parser.parse_args(argv)
    try:
        status = run_experiment(args.config, out=args.out, kind=args.kind, seed=args.seed,
                                threads=args.threads, check=args.check)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if status:
        print("one or more checks failed; see report.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
