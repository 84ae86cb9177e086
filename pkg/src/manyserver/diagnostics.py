"""Regularity diagnostics and whole-system consistency checks on simulated paths."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distributions import DistributionBundle, fluid_z
from .kernels import RGrid, ShapeError, h1_norm, h1_tail_bound, t_map
from .queue_sim import KIND_INIT_SERVICE, QueuePath, ScaledPath, compensated_departure, \
    compensated_departure_psi

__all__ = [
    "TightnessProfile",
    "tightness_profile",
    "fluid_deviation",
    "AuditReport",
    "identity_audit",
    "UsageError",
]


class UsageError(ValueError):
    """Diagnostic called on a path that lacks the required information."""


def _cum_sq(values: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid integral of ``values**2`` along the last axis."""
    sq = values ** 2
    seg = 0.5 * (sq[..., 1:] + sq[..., :-1]) * np.diff(nodes)
    return np.concatenate([np.zeros(sq.shape[:-1] + (1,)), np.cumsum(seg, axis=-1)], axis=-1)


def _at(cum: np.ndarray, nodes: np.ndarray, L: float) -> np.ndarray:
    L = min(L, nodes[-1])
    k = np.searchsorted(nodes, L, side="right") - 1
    k = min(k, nodes.size - 2)
    w = (L - nodes[k]) / (nodes[k + 1] - nodes[k])
    return (1 - w) * cum[..., k] + w * cum[..., k + 1]


@dataclass
class TightnessProfile:
    """Windowed norms of Z-hat grouped by ``(N, t)``.

    ``groups`` maps ``(N, t)`` to a dict with per-replication arrays
    ``l2`` and ``l2_prime`` (replications x ladder), ``tail`` (replications x
    ladder), ``h1`` (replications) and their quantiles.
    """

    ladder: np.ndarray
    quantile_levels: tuple
    groups: dict
    mean_square: np.ndarray
    mean_square_se: np.ndarray
    envelope: np.ndarray
    envelope_scale: float
    envelope_exceed: np.ndarray
    tail_growth: bool
    tail_bound_at_rmax: float | None
    notes: list = field(default_factory=list)

    def h1_quantile(self, q: float = 0.99) -> dict:
        return {key: float(np.quantile(g["h1"], q)) for key, g in self.groups.items()}


def tightness_profile(paths: Sequence[ScaledPath], ladder: Sequence[float],
                      bundle: DistributionBundle | None = None,
                      quantile_levels=(0.5, 0.9, 0.99)) -> TightnessProfile:
    """Windowed ``L^2(0, L)`` norms of Z-hat and Z-hat', tail norms over
    ``(L, r_max)``, H^1 norms and the pooled mean-square profile.

    The pooled ``E[Z-hat(r)^2]`` is compared with the envelope Z-bar (scaled
    by the smallest constant that dominates it); entries above the scaled
    envelope by more than three standard errors are flagged.  Tail norms
    beyond ``r_max`` are not represented on the grid; when a bundle is given,
    the analytic bound for that tail is reported alongside.
    """
    if not paths:
        raise UsageError("no paths")
    grid = paths[0].r_grid
    for p in paths:
        if p.r_grid != grid:
            raise ShapeError("all paths must share one r-grid")
        if p.zhat is None:
            raise UsageError("paths were sampled without Z")
    nodes = grid.nodes
    ladder = np.asarray(sorted(ladder), dtype=float)
    groups: dict = {}
    pooled = []
    for p in paths:
        for i, t in enumerate(p.times):
            key = (int(p.N), float(t))
            g = groups.setdefault(key, {"z": [], "zp": []})
            g["z"].append(p.zhat[i])
            g["zp"].append(p.zhat_prime[i])
            pooled.append(p.zhat[i])
    for key, g in groups.items():
        z = np.array(g.pop("z"))
        zp = np.array(g.pop("zp"))
        cz, czp = _cum_sq(z, nodes), _cum_sq(zp, nodes)
        total = cz[:, -1]
        g["l2"] = np.sqrt(np.stack([_at(cz, nodes, L) for L in ladder], axis=1))
        g["l2_prime"] = np.sqrt(np.stack([_at(czp, nodes, L) for L in ladder], axis=1))
        g["tail"] = np.sqrt(np.maximum(total[:, None] - np.stack([_at(cz, nodes, L) for L in ladder],
                                                                 axis=1), 0.0))
        g["h1"] = np.sqrt(cz[:, -1] + czp[:, -1])
        g["quantiles"] = {
            "l2": np.quantile(g["l2"], quantile_levels, axis=0),
            "tail": np.quantile(g["tail"], quantile_levels, axis=0),
            "h1": np.quantile(g["h1"], quantile_levels),
        }
        g["replications"] = z.shape[0]
    pooled = np.array(pooled)
    ms = np.mean(pooled ** 2, axis=0)
    ms_se = np.std(pooled ** 2, axis=0, ddof=1) / math.sqrt(pooled.shape[0]) if pooled.shape[0] > 1 \
        else np.zeros(nodes.size)
    notes = []
    if bundle is not None:
        env = fluid_z(bundle, nodes)
    else:
        env = np.maximum.accumulate(ms[::-1])[::-1]
        notes.append("no bundle given: envelope is the running maximum of the mean square")
    pos = env > 0
    scale = float(np.max(ms[pos] / env[pos])) if pos.any() else 0.0
    exceed = ms > env + 3 * ms_se
    tail_growth = any(bool(np.any(np.diff(np.median(g["tail"], axis=0)) > 1e-12))
                      for g in groups.values())
    tb = None
    if bundle is not None:
        zmax = float(np.max(np.abs(pooled[:, -1])))
        tb = math.sqrt(h1_tail_bound(bundle, grid, zmax))
        notes.append("tail norm at L = r_max is zero by truncation; tail_bound_at_rmax bounds "
                     "the unrepresented part")
    return TightnessProfile(ladder=ladder, quantile_levels=tuple(quantile_levels), groups=groups,
                            mean_square=ms, mean_square_se=ms_se, envelope=env,
                            envelope_scale=scale, envelope_exceed=exceed,
                            tail_growth=tail_growth, tail_bound_at_rmax=tb, notes=notes)


def fluid_deviation(paths, N: int | None = None, bundle: DistributionBundle | None = None) -> dict:
    """Per-sample-time deviations from the fluid limit.

    Accepts a :class:`QueuePath` (or a list of them) and returns arrays
    with rows indexed by path: ``x`` = ``|X/N - 1|``, ``z_l2`` = grid
    ``L^2`` distance of ``Z/N`` to Z-bar, and ``e`` = ``|E/N - lam t / N|``.
    """
    if isinstance(paths, QueuePath):
        paths = [paths]
    out = {"x": [], "z_l2": [], "e": [], "times": None}
    for p in paths:
        s = p.samples
        n = p.N if N is None else N
        b = p.bundle if bundle is None else bundle
        zb = fluid_z(b, s.r_grid.nodes)
        lam = p.config.lam
        out["times"] = s.times
        out["x"].append(np.abs(s.X / n - 1.0))
        out["e"].append(np.abs(s.E / n - lam * s.times / n))
        if s.Z is not None:
            cz = _cum_sq(s.Z / n - zb[None, :], s.r_grid.nodes)
            out["z_l2"].append(np.sqrt(cz[:, -1]))
    for k in ("x", "z_l2", "e"):
        out[k] = np.array(out[k])
    return out


@dataclass
class AuditReport:
    times: np.ndarray
    nodes: np.ndarray
    direct: np.ndarray
    reconstructed: np.ndarray
    max_abs: float
    max_rel: float
    max_abs_scaled: float
    rule: str
    substep: float
    martingale: np.ndarray

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "max_abs": self.max_abs, "max_rel": self.max_rel,
                "max_abs_scaled": self.max_abs_scaled, "rule": self.rule,
                "substep": self.substep}


def identity_audit(path: QueuePath, times: Sequence[float] | None = None, rule: str = "gauss",
                   substep: float = 1.0, grid: RGrid | None = None) -> AuditReport:
    """Rebuild ``Z_t(r)`` from the event log and compare with the direct value.

    The reconstruction is

        Z_0(t + r) - M_t(Psi_{t+r} 1) + sum_{entries in (0, t]} G-bar(t - entry + r)

    with the martingale term from :func:`compensated_departure` (quadrature
    ``rule``; ``"exact"`` uses the closed-form compensator) and the entry
    sum as a Stieltjes sum over entry epochs.  The direct value comes from
    the ages of the jobs in service at ``t``.
    """
    if path is None or getattr(path, "entry", None) is None:
        raise UsageError("identity audit needs a path with its event log")
    b = path.bundle
    nodes = (grid or path.config.r_grid).nodes
    if times is None:
        times = np.linspace(0.0, path.config.horizon, 5)
    times = np.asarray(times, dtype=float)
    init = path.kind == KIND_INIT_SERVICE
    a0 = -path.entry[init]
    direct = np.empty((times.size, nodes.size))
    recon = np.empty_like(direct)
    mart = np.empty_like(direct)
    for i, t in enumerate(times):
        direct[i] = t_map(b, path.ages_at(t), nodes)
        z0 = t_map(b, a0, t + nodes)
        ent = path.entry[(~init) & (path.entry > 0) & (path.entry <= t)]
        stieltjes = b.sf((t - ent)[:, None] + nodes[None, :]).sum(axis=0) if ent.size else 0.0
        if rule == "exact":
            m = compensated_departure_psi(path, t + nodes, t)
        else:
            m = np.array([compensated_departure(
                path, lambda x, s, u=t + r: b.survival_ratio(x, np.maximum(u - s, 0.0)), t,
                rule=rule, substep=substep) for r in nodes])
        mart[i] = m
        recon[i] = z0 - m + stieltjes
    diff = np.abs(direct - recon)
    scale = max(float(np.max(np.abs(direct))), 1.0)
    return AuditReport(times=times, nodes=nodes, direct=direct, reconstructed=recon,
                       max_abs=float(diff.max()), max_rel=float(diff.max() / scale),
                       max_abs_scaled=float(diff.max() / math.sqrt(path.N)), rule=rule,
                       substep=substep, martingale=mart)
