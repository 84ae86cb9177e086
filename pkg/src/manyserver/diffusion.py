"""Simulation of the limiting diffusion model.

The model is driven by a Brownian motion ``B`` (arrival fluctuations) and a
space-time Gaussian white noise ``M`` on ``[0, inf) x [0, T]`` with intensity
``g(x) dx dt`` (departure fluctuations).  Given the drivers, the pair
``(K, X)`` solves the centered many-server equations

    x(t) ^ 0 = zeta(t) + kappa(t) - int_0^t g(t - s) kappa(s) ds
    kappa(t) = eta(t) - x(t)^+ + x0^+

with ``eta = sigma B - beta t`` and ``zeta(t) = z0(t) - H_t(1)``, where
``H_t(f)`` integrates the kernel ``(x, s) -> f(x + t - s) G-bar(x + t - s) /
G-bar(x)`` against ``M``.  The profile ``Z_t`` and its derivative are then
assembled from ``K`` and further white-noise integrals.

Discretization
--------------
Time is a uniform grid of step ``dt``.  The age axis is cut into cells of
equal ``g``-measure and every kernel is evaluated at the ``g``-barycenter of
its cell and at the time midpoint of its step.  All kernels that the model
needs are smooth functions of the cell position for each lag, so they live
(to ``rank_tol``) in a low-dimensional subspace of the cell space.  The
drivers keep only the noise projected on an orthonormal basis of that
subspace; since the cell noise is i.i.d. Gaussian, the projected noise is
again i.i.d. Gaussian and can be drawn directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
from scipy import fft as sfft
from scipy import interpolate, linalg, special

from .distributions import DistributionBundle, DistributionSpec, Family, build_bundle, fluid_z
from .kernels import RGrid

__all__ = [
    "StepSizeError",
    "DiffusionConfig",
    "CellGrid",
    "GaussianDrivers",
    "CmsInput",
    "CmsSolution",
    "DiffusionPath",
    "make_cells",
    "simulate_drivers",
    "mm_integral",
    "solve_cms",
    "cms_residuals",
    "picard_oracle",
    "run_diffusion",
    "simulate_x_batch",
    "estimate_diffusion_stationary",
    "scalar_oracle_paths",
    "scalar_stationary_cdf",
    "scalar_stationary_sample",
]


class StepSizeError(ValueError):
    """Time step too large for the exact scalar solve of the CMS step."""


@dataclass(frozen=True)
class DiffusionConfig:
    """Parameters of one diffusion simulation.

    ``z0`` and ``z0p`` are the initial profile and its derivative on
    ``r_grid``; when omitted the profile ``(x0 ^ 0) Z-bar`` is used, which
    satisfies the boundary condition and, for exponential service, is the
    profile under which the model reduces to a scalar diffusion.
    """

    service: DistributionSpec
    beta: float = 1.0
    sigma: float = 1.0
    horizon: float = 10.0
    dt: float = 0.01
    r_grid: RGrid = field(default_factory=RGrid.geometric)
    n_cells: int = 256
    x0: float = 0.0
    z0: Sequence[float] | None = None
    z0p: Sequence[float] | None = None
    sample_times: Sequence[float] | None = None
    seed: int = 0
    retain_field: bool = False
    rank_tol: float = 1e-10

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        if self.z0 is not None:
            z0 = np.asarray(self.z0, dtype=float)
            if z0.shape != self.r_grid.nodes.shape:
                raise ValueError("z0 must have one value per r-grid node")
            if abs(z0[0] - min(self.x0, 0.0)) > 1e-12:
                raise ValueError("initial condition violates z0(0) = x0 ^ 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def initial_profile(self, bundle: DistributionBundle):
        nodes = self.r_grid.nodes
        if self.z0 is None:
            m = min(self.x0, 0.0)
            return m * fluid_z(bundle, nodes), -m * bundle.sf(nodes)
        z0 = np.asarray(self.z0, dtype=float)
        if self.z0p is None:
            z0p = np.gradient(z0, nodes)
        else:
            z0p = np.asarray(self.z0p, dtype=float)
        return z0, z0p


@dataclass(frozen=True)
class CellGrid:
    """Equal-measure cells of the age axis under the density g."""

    edges: np.ndarray
    centers: np.ndarray
    measure: np.ndarray

    @property
    def n(self) -> int:
        return self.centers.size


def make_cells(bundle: DistributionBundle, n_cells: int = 256) -> CellGrid:
    """Cells ``[q_{i-1}, q_i)`` with ``G(q_i) = i / n`` and their
    ``g``-barycenters ``n int_cell x g(x) dx``."""
    n = int(n_cells)
    inner = bundle.isf(1.0 - np.arange(1, n) / n)
    edges = np.concatenate([[0.0], inner, [np.inf]])
    a, b = edges[:-1], edges[1:]
    last = np.isinf(b)
    bf = np.where(last, 0.0, b)
    ga, gb = bundle.sf(a), np.where(last, 0.0, bundle.sf(bf))
    ta = bundle.integrated_tail(a)
    tb = np.where(last, 0.0, bundle.integrated_tail(bf))
    bgb = bf * gb
    first_moment = a * ga - bgb + ta - tb
    measure = ga - gb
    centers = first_moment / measure
    centers = np.clip(centers, a, b)
    return CellGrid(edges=edges, centers=centers, measure=measure)


def _kernel_one(bundle, centers, L):
    """Cells x lags matrix of ``G-bar(c + L) / G-bar(c)``."""
    return bundle.survival_ratio(centers[:, None], np.asarray(L, dtype=float)[None, :])


def _kernel_h(bundle, centers, L):
    """Cells x lags matrix of ``g(c + L) / G-bar(c)``."""
    L = np.asarray(L, dtype=float)[None, :]
    c = centers[:, None]
    return bundle.hazard(c + L) * bundle.survival_ratio(c, L)


@dataclass
class KernelBasis:
    """Orthonormal basis of the span of all model kernels over the cells,
    plus spline tables of the kernel coordinates as functions of the lag."""

    U: np.ndarray
    L: np.ndarray
    coef_one: np.ndarray
    coef_h: np.ndarray
    reconstruction_error: float

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def coords(self, which: str, L) -> np.ndarray:
        """Kernel coordinates (rank x len(L)) at arbitrary lags by cubic interpolation."""
        table = self.coef_one if which == "one" else self.coef_h
        spline = interpolate.CubicSpline(self.L, table, axis=1)
        return spline(np.asarray(L, dtype=float))


_BASIS_CACHE: dict = {}


def kernel_basis(bundle: DistributionBundle, cells: CellGrid, dt: float, L_max: float,
                 rank_tol: float = 1e-10) -> KernelBasis:
    key = (bundle.spec.to_text(), cells.n, dt, L_max, rank_tol)
    hit = _BASIS_CACHE.get(key)
    if hit is not None:
        return hit
    # lag table on a half-step lattice so that the step midpoints are nodes
    L = np.arange(int(math.ceil(L_max / (0.5 * dt))) + 3) * (0.5 * dt)
    w = np.sqrt(cells.measure)
    K1 = _kernel_one(bundle, cells.centers, L)
    Kh = _kernel_h(bundle, cells.centers, L)
    # weight by sqrt(measure); cells have equal measure, so this only sets the scale
    stacked = np.concatenate([K1, Kh], axis=1) * w[:, None]
    Us, sv, _ = linalg.svd(stacked, full_matrices=False, check_finite=False)
    keep = sv > rank_tol * sv[0]
    U = np.ascontiguousarray(Us[:, keep])
    # undo the weighting inside the basis: coordinates refer to raw kernels
    c1 = U.T @ K1
    ch = U.T @ Kh
    err = float(max(np.max(np.abs(U @ c1 - K1)), np.max(np.abs(U @ ch - Kh))))
    basis = KernelBasis(U=U, L=L, coef_one=c1, coef_h=ch, reconstruction_error=err)
    if len(_BASIS_CACHE) > 16:
        _BASIS_CACHE.clear()
    _BASIS_CACHE[key] = basis
    return basis


@dataclass
class GaussianDrivers:
    """Brownian path, projected white noise and the derived ``H`` paths.

    ``P[p, k]`` is the noise of time step ``k`` projected on basis vector
    ``p``; each entry is ``N(0, dt / n_cells)``.  ``W`` (cells x steps) is
    kept only when the configuration asks for the full field.
    """

    times: np.ndarray
    dt: float
    B: np.ndarray
    E: np.ndarray
    cells: CellGrid
    basis: KernelBasis
    P: np.ndarray
    W: np.ndarray | None
    H1: np.ndarray
    Hh: np.ndarray


def _causal_conv(kern: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """``out[..., j] = sum_{k <= j} sum_p kern[p, j - k] noise[..., p, k]``."""
    n = noise.shape[-1]
    m = sfft.next_fast_len(2 * n)
    fk = sfft.rfft(kern[:, :n], m, axis=-1)
    fn = sfft.rfft(noise, m, axis=-1)
    return sfft.irfft((fk * fn).sum(axis=-2), m, axis=-1)[..., :n]


def _midpoint_coords(basis: KernelBasis, n: int):
    # step midpoints sit on odd nodes of the half-step lag lattice
    idx = 2 * np.arange(n) + 1
    return basis.coef_one[:, idx], basis.coef_h[:, idx]


def _l_max(config: DiffusionConfig) -> float:
    return config.horizon + config.r_grid.r_max + config.dt


def simulate_drivers(config: DiffusionConfig, rng: np.random.Generator | None = None,
                     bundle: DistributionBundle | None = None, batch: int | None = None):
    """Draw ``B`` and the white noise, and compute ``H_t(1)`` and ``H_t(h)``
    on the time grid.  With ``batch`` set, arrays gain a leading batch axis
    and the full field is never retained."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    bundle = bundle or build_bundle(config.service)
    cells = make_cells(bundle, config.n_cells)
    basis = kernel_basis(bundle, cells, config.dt, _l_max(config), config.rank_tol)
    n, dt = config.n_steps, config.dt
    times = config.times
    shape = () if batch is None else (batch,)
    dB = rng.standard_normal(shape + (n,)) * math.sqrt(dt)
    B = np.concatenate([np.zeros(shape + (1,)), np.cumsum(dB, axis=-1)], axis=-1)
    E = config.sigma * B - config.beta * times
    sd = math.sqrt(dt / cells.n)
    W = None
    if config.retain_field and batch is None:
        W = rng.standard_normal((cells.n, n)) * sd
        P = basis.U.T @ W
    else:
        P = rng.standard_normal(shape + (basis.rank, n)) * sd
    k1, kh = _midpoint_coords(basis, n)
    zeros = np.zeros(shape + (1,))
    H1 = np.concatenate([zeros, _causal_conv(k1, P)], axis=-1)
    Hh = np.concatenate([zeros, _causal_conv(kh, P)], axis=-1)
    return GaussianDrivers(times=times, dt=dt, B=B, E=E, cells=cells, basis=basis, P=P, W=W,
                           H1=H1, Hh=Hh)


def mm_integral(drivers: GaussianDrivers, phi: Callable, t: float) -> float:
    """``sum_{i, k: t_k <= t} phi(c_i, s_k) W(i, k)`` for a kernel
    ``phi(x, s)`` of age and time.

    Needs the retained field, unless ``phi`` lies in the span of the kernel
    basis, in which case the projected noise gives the same value.
    """
    T = drivers.times[-1]
    if t < 0 or t > T + 1e-9 * max(1.0, T):
        raise ValueError(f"t={t} outside the simulated time grid [0, {T}]")
    k = int(np.floor(t / drivers.dt + 1e-9))
    if k == 0:
        return 0.0
    s = (np.arange(k) + 0.5) * drivers.dt
    vals = np.asarray(phi(drivers.cells.centers[:, None], s[None, :]), dtype=float)
    vals = np.broadcast_to(vals, (drivers.cells.n, k))
    if drivers.W is not None:
        return float(np.sum(vals * drivers.W[:, :k]))
    return float(np.sum((drivers.basis.U.T @ vals) * drivers.P[..., :k]))


# ---------------------------------------------------------------------------
# CMS solver


@dataclass
class CmsInput:
    eta: np.ndarray
    zeta: np.ndarray
    x0: float | np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        x0 = np.asarray(self.x0, dtype=float)
        if self.eta.shape != self.zeta.shape:
            raise ValueError("eta and zeta must share a time grid")
        if np.any(np.abs(self.eta[..., 0]) > 1e-12):
            raise ValueError("eta(0) must be 0")
        if np.any(np.abs(self.zeta[..., 0] - np.minimum(x0, 0.0)) > 1e-12):
            raise ValueError("zeta(0) must equal x0 ^ 0")


@dataclass
class CmsSolution:
    kappa: np.ndarray
    x: np.ndarray
    residual_eq1: float | None = None
    residual_eq2: float | None = None


@numba.njit(cache=True)
def _cms_forward(zeta, eta, x0p, gl, dt):
    nb, n1 = zeta.shape
    a = 0.5 * dt * gl[0]
    kap = np.zeros((nb, n1))
    x = np.empty((nb, n1))
    for b in range(nb):
        x[b, 0] = zeta[b, 0] + eta[b, 0] + x0p[b]
        for k in range(1, n1):
            c = 0.0
            for l in range(1, k):
                c += gl[k - l] * kap[b, l]
            c *= dt
            rhs = zeta[b, k] + eta[b, k] + x0p[b] - c - a * (eta[b, k] + x0p[b])
            if rhs <= 0.0:
                xk = rhs
            else:
                xk = rhs / (1.0 - a)
            x[b, k] = xk
            kap[b, k] = eta[b, k] - (xk if xk > 0.0 else 0.0) + x0p[b]
    return kap, x


def solve_cms(inp: CmsInput, bundle: DistributionBundle, dt: float,
              residuals: bool = True) -> CmsSolution:
    """Forward trapezoid stepping with an exact case split on the sign of x.

    Eliminating kappa turns the pair of equations into
    ``x = zeta + eta + x0^+ - g * kappa``.  The trapezoid rule puts weight
    ``dt/2`` on the current node, so ``x_k = b + a x_k^+`` with
    ``a = g(0) dt / 2``; for ``a < 1`` this has the unique solution
    ``b`` (if ``b <= 0``) or ``b / (1 - a)``.
    """
    g0 = float(bundle.pdf(np.array(0.0)))
    if not 0.5 * dt * g0 < 1.0:
        raise StepSizeError(f"g(0) dt / 2 = {0.5 * dt * g0:g} must be < 1")
    zeta = np.atleast_2d(inp.zeta)
    eta = np.atleast_2d(inp.eta)
    x0p = np.broadcast_to(np.maximum(np.asarray(inp.x0, dtype=float), 0.0), zeta.shape[:1]).copy()
    n1 = zeta.shape[1]
    gl = np.asarray(bundle.pdf(np.arange(n1) * dt), dtype=float)
    kap, x = _cms_forward(zeta, eta, x0p, gl, dt)
    if inp.zeta.ndim == 1:
        kap, x = kap[0], x[0]
    sol = CmsSolution(kappa=kap, x=x)
    if residuals:
        r1, r2 = cms_residuals(inp, sol, bundle, dt)
        sol.residual_eq1, sol.residual_eq2 = r1, r2
    return sol


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _pl_weights(bundle: DistributionBundle, dt: float, n: int):
    """For lags m = 1..n: ``I0_m = int g`` and ``A_m = int g(u)(m dt - u)/dt``
    over ``u in [(m-1) dt, m dt]``."""
    m = np.arange(1, n + 1)
    lo, hi = (m - 1) * dt, m * dt
    I0 = bundle.sf(lo) - bundle.sf(hi)
    u = lo[:, None] + 0.5 * dt * (_GL_X[None, :] + 1.0)
    A = 0.5 * dt * np.sum(_GL_W[None, :] * bundle.pdf(u) * (hi[:, None] - u) / dt, axis=1)
    return I0, A


@numba.njit(cache=True)
def _pl_conv(kap, I0, A):
    nb, n1 = kap.shape
    out = np.zeros((nb, n1))
    for b in range(nb):
        for k in range(1, n1):
            s = 0.0
            for m in range(1, k + 1):
                s += kap[b, k - m] * (I0[m - 1] - A[m - 1]) + kap[b, k - m + 1] * A[m - 1]
            out[b, k] = s
    return out


def cms_residuals(inp: CmsInput, sol: CmsSolution, bundle: DistributionBundle, dt: float):
    """Sup-norm residuals of both equations, with the convolution evaluated
    exactly for the piecewise-linear interpolant of kappa."""
    kap = np.atleast_2d(sol.kappa)
    x = np.atleast_2d(sol.x)
    zeta = np.atleast_2d(inp.zeta)
    eta = np.atleast_2d(inp.eta)
    x0p = np.maximum(np.asarray(inp.x0, dtype=float), 0.0)
    x0p = np.broadcast_to(x0p, zeta.shape[:1])[:, None]
    I0, A = _pl_weights(bundle, dt, kap.shape[1] - 1)
    conv = _pl_conv(kap, I0, A)
    r1 = np.minimum(x, 0.0) - (zeta + kap - conv)
    r2 = kap - (eta - np.maximum(x, 0.0) + x0p)
    return float(np.max(np.abs(r1))), float(np.max(np.abs(r2)))


def _trap_conv(g_vals, y, dt):
    """Full trapezoid ``int_0^{t_k} g(t_k - s) y(s) ds`` on every node, by FFT."""
    n1 = y.size
    m = sfft.next_fast_len(2 * n1)
    full = sfft.irfft(sfft.rfft(g_vals, m) * sfft.rfft(y, m), m)[:n1]
    # remove half of the two end-point contributions
    corr = 0.5 * (g_vals * y[0] + g_vals[0] * y)
    out = dt * (full - corr)
    out[0] = 0.0
    return out


def picard_oracle(eta: Callable, zeta: Callable, x0: float, bundle: DistributionBundle,
                  dt: float, horizon: float, refine: int = 10, tol: float = 1e-14,
                  max_iter: int = 20000):
    """Fixed-point iteration ``x <- zeta + eta + x0^+ - g * (eta - x^+ + x0^+)``
    on a grid ``refine`` times finer than ``dt``.

    Returns the fine solution restricted to the coarse nodes.  On ``[0, T]``
    the map is a sup-norm contraction with constant ``G(T) < 1``.
    """
    h = dt / refine
    n = int(round(horizon / h))
    t = np.arange(n + 1) * h
    e = np.asarray(eta(t), dtype=float)
    z = np.asarray(zeta(t), dtype=float)
    x0p = max(x0, 0.0)
    gv = np.asarray(bundle.pdf(t), dtype=float)
    x = z + e + x0p
    for it in range(max_iter):
        kap = e - np.maximum(x, 0.0) + x0p
        new = z + e + x0p - _trap_conv(gv, kap, h)
        diff = float(np.max(np.abs(new - x)))
        x = new
        if diff < tol:
            break
    kap = e - np.maximum(x, 0.0) + x0p
    return CmsSolution(kappa=kap[::refine], x=x[::refine])


# ---------------------------------------------------------------------------
# full model


@dataclass
class DiffusionPath:
    times: np.ndarray
    X: np.ndarray
    K: np.ndarray
    E: np.ndarray
    H1: np.ndarray
    sample_times: np.ndarray
    Z: np.ndarray
    Zp: np.ndarray
    r_grid: RGrid
    residual_eq1: float | None
    residual_eq2: float | None
    boundary_error: float
    rank: int
    kernel_error: float
    drivers: GaussianDrivers | None = None


def _extend_profile(bundle, r_grid: RGrid, z0, z0p):
    """``z0`` and ``z0'`` as functions on ``[0, inf)``: cubic Hermite on the
    grid, proportional Z-bar tail beyond ``r_max``."""
    nodes = r_grid.nodes
    spline = interpolate.CubicHermiteSpline(nodes, z0, z0p)
    rmax = nodes[-1]
    zr = float(fluid_z(bundle, np.array([rmax]))[0])
    scale = z0[-1] / zr if zr > 0 else 0.0

    def f(r):
        r = np.asarray(r, dtype=float)
        inside = r <= rmax
        out = np.empty(r.shape)
        out[inside] = spline(r[inside])
        if (~inside).any():
            out[~inside] = scale * bundle.integrated_tail(r[~inside])
        return out

    def fp(r):
        r = np.asarray(r, dtype=float)
        inside = r <= rmax
        out = np.empty(r.shape)
        out[inside] = spline(r[inside], 1)
        if (~inside).any():
            out[~inside] = -scale * bundle.sf(r[~inside])
        return out

    return f, fp


def _sample_indices(config: DiffusionConfig) -> np.ndarray:
    if config.sample_times is None:
        st = np.linspace(0.0, config.horizon, 11)
    else:
        st = np.asarray(config.sample_times, dtype=float)
    idx = np.rint(st / config.dt).astype(int)
    if np.any(idx < 0) or np.any(idx > config.n_steps):
        raise ValueError("sample times outside [0, horizon]")
    return idx


def _trap_weights(j: int, dt: float) -> np.ndarray:
    w = np.full(j + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    if j == 0:
        w[:] = 0.0
    return w


def run_diffusion(config: DiffusionConfig, rng: np.random.Generator | None = None,
                  keep_drivers: bool = False) -> DiffusionPath:
    """Drivers, CMS solve and assembly of ``Z`` and ``Z'`` at the sample times."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    bundle = build_bundle(config.service)
    drv = simulate_drivers(config, rng, bundle)
    z0, z0p = config.initial_profile(bundle)
    zf, zfp = _extend_profile(bundle, config.r_grid, z0, z0p)
    t = config.times
    zeta = zf(t) - drv.H1
    zeta[0] = min(config.x0, 0.0)
    sol = solve_cms(CmsInput(drv.E, zeta, config.x0), bundle, config.dt)
    K, X = sol.kappa, sol.x

    nodes = config.r_grid.nodes
    idx = _sample_indices(config)
    Z = np.empty((idx.size, nodes.size))
    Zp = np.empty_like(Z)
    dt = config.dt
    gb_r, g_r = bundle.sf(nodes), bundle.pdf(nodes)
    for q, j in enumerate(idx):
        tj = j * dt
        # white-noise terms: lags (j - k + 1/2) dt + r for steps k = 1..j
        if j > 0:
            lag = (j - np.arange(1, j + 1) + 0.5) * dt
            Lmat = lag[:, None] + nodes[None, :]
            c1 = drv.basis.coords("one", Lmat.ravel()).reshape(-1, j, nodes.size)
            ch = drv.basis.coords("h", Lmat.ravel()).reshape(-1, j, nodes.size)
            Pj = drv.P[:, :j]
            m1 = np.einsum("pkr,pk->r", c1, Pj)
            mh = np.einsum("pkr,pk->r", ch, Pj)
            w = _trap_weights(j, dt)
            u = t[: j + 1]
            arg = tj - u[:, None] + nodes[None, :]
            conv_g = w @ (bundle.pdf(arg) * K[: j + 1, None])
            conv_gp = w @ (bundle.dpdf(arg) * K[: j + 1, None])
        else:
            m1 = mh = conv_g = conv_gp = np.zeros(nodes.size)
        Z[q] = zf(tj + nodes) - m1 + gb_r * K[j] - conv_g
        Zp[q] = zfp(tj + nodes) + mh - K[j] * g_r - conv_gp
    bnd = float(np.max(np.abs(Z[:, 0] - np.minimum(X[idx], 0.0)))) if idx.size else 0.0
    return DiffusionPath(times=t, X=X, K=K, E=drv.E, H1=drv.H1, sample_times=idx * dt, Z=Z, Zp=Zp,
                         r_grid=config.r_grid, residual_eq1=sol.residual_eq1,
                         residual_eq2=sol.residual_eq2, boundary_error=bnd,
                         rank=drv.basis.rank, kernel_error=drv.basis.reconstruction_error,
                         drivers=drv if keep_drivers else None)


def simulate_x_batch(config: DiffusionConfig, n_paths: int, rng: np.random.Generator,
                     batch: int = 256) -> np.ndarray:
    """``X`` on the time grid for ``n_paths`` independent replications
    (rows), without assembling ``Z``."""
    bundle = build_bundle(config.service)
    z0, z0p = config.initial_profile(bundle)
    zf, _ = _extend_profile(bundle, config.r_grid, z0, z0p)
    z_t = zf(config.times)
    z_t[0] = min(config.x0, 0.0)
    out = np.empty((n_paths, config.n_steps + 1))
    done = 0
    while done < n_paths:
        b = min(batch, n_paths - done)
        drv = simulate_drivers(config, rng, bundle, batch=b)
        zeta = z_t[None, :] - drv.H1
        zeta[:, 0] = min(config.x0, 0.0)
        sol = solve_cms(CmsInput(drv.E, zeta, np.full(b, config.x0)), bundle, config.dt,
                        residuals=False)
        out[done:done + b] = sol.x
        done += b
    return out


def estimate_diffusion_stationary(config: DiffusionConfig, burn_in: float, n_draws: int,
                                  spacing: float | None = None, rng=None, batch: int = 256):
    """Stationary sample of ``X``.

    Each replication runs to ``config.horizon`` (which must exceed
    ``burn_in``); with ``spacing`` set, every replication contributes the
    values at ``burn_in, burn_in + spacing, ...`` instead of only the last
    one.
    """
    from .stationary import EmpiricalLaw

    if not config.horizon > burn_in:
        raise ValueError("horizon must exceed burn_in")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if spacing is None:
        cols = np.array([config.n_steps])
    else:
        cols = np.rint(np.arange(burn_in, config.horizon + 1e-9, spacing) / config.dt).astype(int)
    n_paths = int(math.ceil(n_draws / cols.size))
    X = simulate_x_batch(config, n_paths, rng, batch)
    sample = X[:, cols].ravel()[:n_draws]
    return EmpiricalLaw.from_sample(sample, label="xhat", replications=n_paths)


# ---------------------------------------------------------------------------
# scalar reduction for exponential service


def scalar_oracle_paths(beta: float, sigma: float, x0: float, horizon: float, dt: float,
                        n_paths: int, rng: np.random.Generator, times=None) -> np.ndarray:
    """Euler-Maruyama for ``dX = (-beta - X ^ 0) dt + sqrt(1 + sigma^2) dW``.

    Returns the values at ``times`` (default: the horizon only) as an
    array of shape ``(n_paths, len(times))``.
    """
    times = np.atleast_1d(horizon if times is None else np.asarray(times, dtype=float))
    n = int(round(horizon / dt))
    marks = {int(round(t / dt)): i for i, t in enumerate(times)}
    out = np.empty((n_paths, times.size))
    vol = math.sqrt((1.0 + sigma ** 2) * dt)
    x = np.full(n_paths, float(x0))
    if 0 in marks:
        out[:, marks[0]] = x
    for k in range(1, n + 1):
        x = x + (-beta - np.minimum(x, 0.0)) * dt + vol * rng.standard_normal(n_paths)
        if k in marks:
            out[:, marks[k]] = x
    return out


def _scalar_pieces(beta, sigma):
    v = 1.0 + sigma ** 2
    # x >= 0: exp(-2 beta x / v);  x < 0: exp(-(x + beta)^2 / v + beta^2 / v)
    pos = v / (2.0 * beta)
    s = math.sqrt(v / 2.0)
    neg = math.exp(beta ** 2 / v) * math.sqrt(math.pi * v) * special.ndtr(beta / s)
    return v, pos, neg, s


def scalar_stationary_cdf(x, beta: float = 1.0, sigma: float = 1.0):
    """Stationary CDF of the scalar diffusion (exponential service)."""
    x = np.asarray(x, dtype=float)
    v, pos, neg, s = _scalar_pieces(beta, sigma)
    total = pos + neg
    c = math.exp(beta ** 2 / v) * math.sqrt(math.pi * v)
    left = c * special.ndtr((np.minimum(x, 0.0) + beta) / s) / total
    right = (neg + pos * (1.0 - np.exp(-2.0 * beta * np.maximum(x, 0.0) / v))) / total
    return np.where(x < 0, left, right)


def scalar_stationary_sample(n: int, rng: np.random.Generator, beta: float = 1.0,
                             sigma: float = 1.0) -> np.ndarray:
    """Exact draws from the scalar stationary law by inversion."""
    v, pos, neg, s = _scalar_pieces(beta, sigma)
    total = pos + neg
    u = rng.random(n)
    p_neg = neg / total
    c = math.exp(beta ** 2 / v) * math.sqrt(math.pi * v)
    with np.errstate(divide="ignore", invalid="ignore"):
        xl = s * special.ndtri(np.clip(u * total / c, 1e-300, 1.0)) - beta
        xr = -v / (2.0 * beta) * np.log1p(-(u * total - neg) / pos)
    return np.where(u < p_neg, np.minimum(xl, 0.0), np.maximum(xr, 0.0))
