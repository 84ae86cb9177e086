"""Operator calculus on functions of the residual-age variable.

``phi`` transports a test function along the age flow while discounting by
the survival ratio, ``psi`` is its time-indexed version, ``t_map`` turns a
set of in-service ages into the Z-profile ``r -> sum_j G-bar(a_j + r) /
G-bar(a_j)``, and ``h1_inner`` / ``h1_norm`` evaluate the H^1 inner product
on a grid by the trapezoid rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import DistributionBundle, zbar

__all__ = [
    "RGrid",
    "AgeVector",
    "phi",
    "psi",
    "t_map",
    "t_map_derivative",
    "h1_inner",
    "h1_norm",
    "h1_tail_bound",
]


class ShapeError(ValueError):
    """Grid functions of mismatched length."""


@dataclass(frozen=True)
class RGrid:
    """Increasing nodes ``0 = r_0 < ... < r_m`` with trapezoid weights."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).copy()
        if nodes.ndim != 1 or nodes.size < 2:
            raise ShapeError("RGrid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("RGrid must start at r = 0")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("RGrid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def geometric(cls, r_max: float = 40.0, m: int = 200, first: float = 1e-3) -> "RGrid":
        """Node 0 followed by ``m`` geometrically spaced nodes in ``[first, r_max]``."""
        return cls(np.concatenate([[0.0], np.geomspace(first, r_max, m)]))

    @classmethod
    def uniform(cls, r_max: float = 40.0, m: int = 400) -> "RGrid":
        return cls(np.linspace(0.0, r_max, m + 1))

    @property
    def weights(self) -> np.ndarray:
        d = np.diff(self.nodes)
        w = np.zeros(self.nodes.size)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return w

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    def __len__(self):
        return self.nodes.size

    def __eq__(self, other):
        return isinstance(other, RGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def to_list(self) -> list:
        return self.nodes.tolist()


@dataclass(frozen=True)
class AgeVector:
    """Ages of the jobs currently in service (one entry per busy server)."""

    ages: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.ages, dtype=float).ravel().copy()
        if np.any(~np.isfinite(a)) or np.any(a < 0):
            raise ValueError("ages must be finite and nonnegative")
        a.setflags(write=False)
        object.__setattr__(self, "ages", a)

    def __len__(self):
        return self.ages.size


def _as_ages(ages) -> np.ndarray:
    return ages.ages if isinstance(ages, AgeVector) else np.asarray(ages, dtype=float).ravel()


def _as_nodes(grid) -> np.ndarray:
    return grid.nodes if isinstance(grid, RGrid) else np.asarray(grid, dtype=float)


def _apply(f, x):
    if f is None:
        return np.ones(np.shape(x))
    if callable(f):
        return np.asarray(f(x), dtype=float)
    return np.full(np.shape(x), float(f))


def phi(bundle: DistributionBundle, t, f, x):
    """``f(x + t) G-bar(x + t) / G-bar(x)``.  ``f=None`` stands for the constant 1."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return _apply(f, x + t) * bundle.survival_ratio(x, t)


def psi(bundle: DistributionBundle, t, f, x, s):
    """``phi`` evaluated at the clamped time ``(t - s)^+``."""
    return phi(bundle, np.maximum(np.asarray(t, dtype=float) - np.asarray(s, dtype=float), 0.0), f, x)


def t_map(bundle: DistributionBundle, ages, grid) -> np.ndarray:
    """Z-profile of a set of ages on the grid nodes."""
    a = _as_ages(ages)
    r = _as_nodes(grid)
    if a.size == 0:
        return np.zeros(r.size)
    out = np.zeros(r.size)
    # chunk to bound memory at large N
    for lo in range(0, a.size, 4096):
        blk = a[lo:lo + 4096]
        out += bundle.survival_ratio(blk[:, None], r[None, :]).sum(axis=0)
    return out


def t_map_derivative(bundle: DistributionBundle, ages, grid) -> np.ndarray:
    """r-derivative of :func:`t_map`: ``-sum_j g(a_j + r) / G-bar(a_j)``."""
    a = _as_ages(ages)
    r = _as_nodes(grid)
    if a.size == 0:
        return np.zeros(r.size)
    out = np.zeros(r.size)
    for lo in range(0, a.size, 4096):
        blk = a[lo:lo + 4096, None]
        x = blk + r[None, :]
        out -= (bundle.hazard(x) * bundle.survival_ratio(blk, r[None, :])).sum(axis=0)
    return out


def _trapz(y, nodes):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(nodes)))


def h1_inner(values_f, deriv_f, values_g, deriv_g, grid) -> float:
    """Trapezoid approximation of ``<f, g>_L2 + <f', g'>_L2`` on the grid."""
    nodes = _as_nodes(grid)
    arrs = [np.asarray(v, dtype=float) for v in (values_f, deriv_f, values_g, deriv_g)]
    if any(a.shape != nodes.shape for a in arrs):
        raise ShapeError("all grid functions must have one value per node")
    vf, df, vg, dg = arrs
    return _trapz(vf * vg + df * dg, nodes)


def h1_norm(values, deriv, grid) -> float:
    return float(np.sqrt(max(h1_inner(values, deriv, values, deriv, grid), 0.0)))


def h1_tail_bound(bundle: DistributionBundle, grid, z_at_rmax: float) -> float:
    """Bound on the squared H^1 mass beyond ``r_max`` of a profile that is
    dominated there by ``|z(r_max)| Z-bar(r) / Z-bar(r_max)``.

    The value part uses the Z-bar envelope directly; the derivative part
    uses ``|Z'| <= H Z-bar``-type domination of G-bar by Z-bar in the tail.
    """
    nodes = _as_nodes(grid)
    rmax = float(nodes[-1])
    zr = float(zbar(bundle, rmax))
    if zr <= 0.0 or z_at_rmax == 0.0:
        return 0.0
    far = np.concatenate([np.geomspace(rmax, max(100.0 * rmax, rmax + 1e3), 400)])
    env = zbar(bundle, far) / zr
    gb = bundle.sf(far) / zr
    val = _trapz(env ** 2, far) + _trapz(gb ** 2, far)
    return float(z_at_rmax ** 2 * val)
