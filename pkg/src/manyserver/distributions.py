"""Service and inter-arrival distribution families.

Each family is wrapped in a :class:`DistributionBundle` that exposes the
survival function ``sf`` (G-bar), the density ``pdf`` (g) and its first two
derivatives, the hazard rate ``hazard`` (h = g / G-bar), the ratio
``hazard2`` (h2 = g' / G-bar), the integrated tail ``x -> int_x^inf G-bar``
and inverse-CDF style samplers.  Bundles are immutable after construction.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

import numpy as np
from scipy import integrate, linalg, special

__all__ = [
    "Family",
    "DistributionSpec",
    "DistributionBundle",
    "AssumptionReport",
    "ParameterError",
    "NormalizationError",
    "build_bundle",
    "verify_assumptions",
    "sample_service",
    "sample_residual",
    "zbar",
    "fluid_z",
]

_SQRT_2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ParameterError(ValueError):
    """A distribution parameter lies outside the family's domain."""


class NormalizationError(ValueError):
    """A unit-mean version of the requested law does not exist."""


class Family(str, Enum):
    EXPONENTIAL = "Exponential"
    LOMAX = "Lomax"
    LOGNORMAL = "LogNormal"
    GAMMA = "Gamma"
    PHASE_TYPE = "PhaseType"
    EMPIRICAL = "EmpiricalRenewal"

    @classmethod
    def from_name(cls, name: str) -> "Family":
        key = name.strip().lower().replace("_", "").replace("-", "")
        for fam in cls:
            if fam.value.lower() == key:
                return fam
        aliases = {"exp": cls.EXPONENTIAL, "pareto": cls.LOMAX, "ph": cls.PHASE_TYPE,
                   "phasetype": cls.PHASE_TYPE, "empirical": cls.EMPIRICAL}
        if key in aliases:
            return aliases[key]
        raise ParameterError(f"unknown distribution family {name!r}")


_PARAM_ALIASES = {
    "lambda": "lam", "scale": "lam", "shape": "alpha", "a": "alpha",
    "beta": "rate", "b": "rate", "subgenerator": "S", "s": "S",
}


def _parse_value(text: str) -> Any:
    text = text.strip()
    if ";" in text:
        return [[float(v) for v in row.split(",") if v.strip()] for row in text.split(";") if row.strip()]
    if "," in text:
        return [float(v) for v in text.split(",") if v.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return float(text)
    except ValueError:
        return text


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple, np.ndarray)):
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 2:
            return ";".join(",".join(repr(float(v)) for v in row) for row in arr)
        return ",".join(repr(float(v)) for v in arr)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class DistributionSpec:
    """Family name plus named parameters.

    ``normalize_mean`` rescales the law to unit mean.  With
    ``enforce_assumptions`` the constructor rejects parameters for which the
    smoothness/moment conditions fail (Lomax needs ``alpha > 3``, Gamma needs
    ``alpha >= 3``).
    """

    family: Family
    params: Mapping[str, Any] = field(default_factory=dict)
    normalize_mean: bool = True
    enforce_assumptions: bool = False

    def __post_init__(self):
        if not isinstance(self.family, Family):
            object.__setattr__(self, "family", Family.from_name(str(self.family)))
        params = {}
        for key, val in dict(self.params).items():
            key = _PARAM_ALIASES.get(key, key) if key not in ("S",) else key
            params[key] = val
        object.__setattr__(self, "params", params)

    @classmethod
    def parse(cls, text: str) -> "DistributionSpec":
        """Parse ``"Lomax alpha=4 normalize_mean=true"`` or a multi-line
        block with a ``family = ...`` line and ``key = value`` lines."""
        tokens = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(re.findall(r"[^\s=]+\s*=\s*[^\s]+|[^\s=]+", line))
        if not tokens:
            raise ParameterError("empty distribution spec")
        family = None
        params: dict[str, Any] = {}
        normalize, enforce = True, False
        for tok in tokens:
            if "=" not in tok:
                if family is not None:
                    raise ParameterError(f"unexpected token {tok!r} in distribution spec")
                family = tok
                continue
            key, val = (s.strip() for s in tok.split("=", 1))
            if key == "family":
                family = val
            elif key == "normalize_mean":
                normalize = bool(_parse_value(val))
            elif key == "enforce_assumptions":
                enforce = bool(_parse_value(val))
            else:
                params[key] = _parse_value(val)
        if family is None:
            raise ParameterError("distribution spec has no family")
        return cls(Family.from_name(family), params, normalize, enforce)

    def to_text(self) -> str:
        parts = [self.family.value]
        for key in sorted(self.params):
            parts.append(f"{key}={_format_value(self.params[key])}")
        parts.append(f"normalize_mean={_format_value(self.normalize_mean)}")
        if self.enforce_assumptions:
            parts.append("enforce_assumptions=true")
        return " ".join(parts)

    def to_dict(self) -> dict:
        params = {}
        for k, v in self.params.items():
            params[k] = np.asarray(v).tolist() if isinstance(v, (list, tuple, np.ndarray)) else v
        return {"family": self.family.value, "params": params,
                "normalize_mean": self.normalize_mean,
                "enforce_assumptions": self.enforce_assumptions}


def _need(spec: DistributionSpec, *names: str) -> list:
    out = []
    for name in names:
        if name not in spec.params:
            raise ParameterError(f"{spec.family.value}: missing parameter {name!r}")
        out.append(spec.params[name])
    return out


class DistributionBundle:
    """Evaluators and samplers for one law on ``[0, inf)``.

    Subclasses implement the analytic pieces.  The generic fallbacks here
    (numeric inverse survival function, quadrature for the integrated tail)
    are only used where a family has no closed form.
    """

    spec: DistributionSpec
    mean: float
    H: float
    H2: float

    # -- evaluators ---------------------------------------------------------
    def sf(self, x):
        raise NotImplementedError

    def logsf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.sf(x))

    def cdf(self, x):
        return 1.0 - self.sf(x)

    def pdf(self, x):
        raise NotImplementedError

    def dpdf(self, x):
        raise NotImplementedError

    def d2pdf(self, x):
        raise NotImplementedError

    def hazard(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.asarray(self.pdf(x)) / np.asarray(self.sf(x))

    def hazard2(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.asarray(self.dpdf(x)) / np.asarray(self.sf(x))

    def survival_ratio(self, x, t):
        """``G-bar(x + t) / G-bar(x)``, the probability that a job of age
        ``x`` is still in service ``t`` time units later."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        with np.errstate(invalid="ignore"):
            out = np.exp(self.logsf(x + t) - self.logsf(x))
        return np.where(t == 0.0, 1.0, np.nan_to_num(out, nan=0.0))

    def integrated_tail(self, x):
        """``int_x^inf G-bar(u) du``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([integrate.quad(self.sf, xi, np.inf, limit=200)[0] for xi in x.ravel()])
        return out.reshape(x.shape)

    def isf(self, u):
        """Inverse survival function: the ``x`` with ``G-bar(x) = u``."""
        u = np.asarray(u, dtype=float)
        logu = np.log(np.clip(u, 1e-300, 1.0))
        lo = np.zeros_like(logu)
        hi = np.full_like(logu, max(self.mean, 1.0))
        for _ in range(200):
            grow = self.logsf(hi) > logu
            if not grow.any():
                break
            hi = np.where(grow, hi * 2.0, hi)
        x = lo.copy()
        for _ in range(200):
            f = self.logsf(x) - logu
            lo = np.where(f > 0, x, lo)
            hi = np.where(f <= 0, x, hi)
            h = np.maximum(self.hazard(x), 1e-300)
            step = x + f / h
            bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
            new = np.where(bad, 0.5 * (lo + hi), step)
            if np.all(np.abs(new - x) <= 1e-14 * np.maximum(1.0, x)):
                x = new
                break
            x = new
        return x

    def _sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.isf(rng.random(size))

    def __repr__(self):
        return f"{type(self).__name__}({self.spec.to_text()})"


class ExponentialBundle(DistributionBundle):
    def __init__(self, spec: DistributionSpec):
        rate = float(spec.params.get("rate", 1.0))
        if not rate > 0:
            raise ParameterError("Exponential: rate must be positive")
        if spec.normalize_mean:
            rate = 1.0
        self.spec = spec
        self.rate = rate
        self.mean = 1.0 / rate
        self.H = rate
        self.H2 = rate * rate

    def sf(self, x):
        return np.exp(-self.rate * np.maximum(x, 0.0))

    def logsf(self, x):
        return -self.rate * np.maximum(np.asarray(x, dtype=float), 0.0)

    def pdf(self, x):
        return self.rate * self.sf(x)

    def dpdf(self, x):
        return -self.rate ** 2 * self.sf(x)

    def d2pdf(self, x):
        return self.rate ** 3 * self.sf(x)

    def hazard(self, x):
        return np.full(np.shape(x), self.rate)

    def hazard2(self, x):
        return np.full(np.shape(x), -self.rate ** 2)

    def survival_ratio(self, x, t):
        return np.exp(-self.rate * np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))[1])

    def integrated_tail(self, x):
        return self.sf(x) / self.rate

    def isf(self, u):
        return -np.log(u) / self.rate

    def _sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size)


class LomaxBundle(DistributionBundle):
    """``G-bar(x) = (1 + x/lam)^(-alpha)``."""

    def __init__(self, spec: DistributionSpec):
        alpha, = _need(spec, "alpha")
        alpha = float(alpha)
        if not alpha > 0:
            raise ParameterError("Lomax: shape alpha must be positive")
        if spec.enforce_assumptions and not alpha > 3:
            raise ParameterError("Lomax: finite (3+eps) moment requires shape alpha > 3")
        if spec.normalize_mean:
            if not alpha > 1:
                raise NormalizationError("Lomax: mean is infinite for alpha <= 1")
            lam = alpha - 1.0
        else:
            lam = float(spec.params.get("lam", 1.0))
            if not lam > 0:
                raise ParameterError("Lomax: scale lam must be positive")
        self.spec = spec
        self.alpha, self.lam = alpha, lam
        self.mean = lam / (alpha - 1.0) if alpha > 1 else math.inf
        self.H = alpha / lam
        self.H2 = alpha * (alpha + 1.0) / lam ** 2

    def _y(self, x):
        return 1.0 + np.maximum(np.asarray(x, dtype=float), 0.0) / self.lam

    def sf(self, x):
        return self._y(x) ** (-self.alpha)

    def logsf(self, x):
        return -self.alpha * np.log1p(np.maximum(np.asarray(x, dtype=float), 0.0) / self.lam)

    def pdf(self, x):
        return self.alpha / self.lam * self._y(x) ** (-self.alpha - 1.0)

    def dpdf(self, x):
        a, l = self.alpha, self.lam
        return -a * (a + 1.0) / l ** 2 * self._y(x) ** (-a - 2.0)

    def d2pdf(self, x):
        a, l = self.alpha, self.lam
        return a * (a + 1.0) * (a + 2.0) / l ** 3 * self._y(x) ** (-a - 3.0)

    def hazard(self, x):
        return self.alpha / self.lam / self._y(x)

    def hazard2(self, x):
        return -self.alpha * (self.alpha + 1.0) / self.lam ** 2 / self._y(x) ** 2

    def survival_ratio(self, x, t):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return ((self.lam + x) / (self.lam + x + t)) ** self.alpha

    def integrated_tail(self, x):
        if self.alpha <= 1:
            return np.full(np.shape(x), np.inf)
        return self.lam / (self.alpha - 1.0) * self._y(x) ** (1.0 - self.alpha)

    def isf(self, u):
        return self.lam * (np.asarray(u, dtype=float) ** (-1.0 / self.alpha) - 1.0)


class LogNormalBundle(DistributionBundle):
    """Log-normal law; the hazard goes through ``erfcx`` so that it stays
    finite where G-bar and g both underflow."""

    def __init__(self, spec: DistributionSpec):
        sigma, = _need(spec, "sigma")
        sigma = float(sigma)
        if not sigma > 0:
            raise ParameterError("LogNormal: sigma must be positive")
        mu = -0.5 * sigma ** 2 if spec.normalize_mean else float(spec.params.get("mu", 0.0))
        self.spec = spec
        self.mu, self.sigma = mu, sigma
        self.mean = 1.0 if spec.normalize_mean else math.exp(mu + 0.5 * sigma ** 2)
        grid = np.concatenate([[0.0], np.geomspace(1e-8, 200.0 * self.mean, 20000)])
        self.H = float(np.max(self.hazard(grid)))
        self.H2 = float(np.max(np.abs(self.hazard2(grid))))

    def _w(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(np.where(x > 0, x, 0.0)) - self.mu

    def sf(self, x):
        return special.ndtr(-self._w(x) / self.sigma)

    def logsf(self, x):
        return special.log_ndtr(-self._w(x) / self.sigma)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        w = self._w(x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = np.exp(-0.5 * (w / self.sigma) ** 2) / (x * self.sigma * math.sqrt(2 * math.pi))
        return np.where(x > 0, out, 0.0)

    def dpdf(self, x):
        x = np.asarray(x, dtype=float)
        w = self._w(x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = -self.pdf(x) * (w + self.sigma ** 2) / (x * self.sigma ** 2)
        return np.where(x > 0, out, 0.0)

    def d2pdf(self, x):
        x = np.asarray(x, dtype=float)
        w, s2 = self._w(x), self.sigma ** 2
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = self.pdf(x) * (w ** 2 + 3 * s2 * w + 2 * s2 ** 2 - s2) / (x ** 2 * s2 ** 2)
        return np.where(x > 0, out, 0.0)

    def hazard(self, x):
        x = np.asarray(x, dtype=float)
        z = self._w(x) / self.sigma
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _SQRT_2_OVER_PI / (x * self.sigma * special.erfcx(z / _SQRT_2))
        return np.where(x > 0, np.nan_to_num(out, nan=0.0, posinf=0.0), 0.0)

    def hazard2(self, x):
        x = np.asarray(x, dtype=float)
        w = self._w(x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = -self.hazard(x) * (w + self.sigma ** 2) / (x * self.sigma ** 2)
        return np.where(x > 0, np.nan_to_num(out, nan=0.0), 0.0)

    def integrated_tail(self, x):
        # E[(V - x)^+] = m Phi(d1) - x Phi(d2); the erfcx form avoids the
        # cancellation between the two terms far in the tail
        x = np.asarray(x, dtype=float)
        s = self.sigma
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            d1 = (self.mu + s * s - np.log(x)) / s
            d2 = d1 - s
            direct = self.mean * special.ndtr(d1) - x * special.ndtr(d2)
            phi2 = np.exp(-0.5 * d2 ** 2) / math.sqrt(2 * math.pi)
            mills = x * phi2 * math.sqrt(math.pi / 2) * (
                special.erfcx(-d1 / _SQRT_2) - special.erfcx(-d2 / _SQRT_2))
        out = np.where(d2 > -5.0, direct, mills)
        return np.where(x > 0, out, self.mean)

    def isf(self, u):
        return np.exp(self.mu - self.sigma * special.ndtri(np.asarray(u, dtype=float)))


def _gamma_tail_series(alpha: float, y, terms: int = 25):
    """Asymptotic series S(y) with Gamma(alpha, y) ~ y^(alpha-1) e^(-y) S(y)."""
    y = np.asarray(y, dtype=float)
    total = np.ones_like(y)
    term = np.ones_like(y)
    for k in range(1, terms):
        term = term * (alpha - k) / y
        total = total + term
        if alpha - k == 0:
            break
    return total


class GammaBundle(DistributionBundle):
    """Gamma law with shape ``alpha`` and rate ``rate``."""

    _ASYMPTOTIC = 200.0

    def __init__(self, spec: DistributionSpec):
        alpha, = _need(spec, "alpha")
        alpha = float(alpha)
        if not alpha > 0:
            raise ParameterError("Gamma: shape alpha must be positive")
        if spec.enforce_assumptions and not alpha >= 3:
            raise ParameterError("Gamma: bounded g'' requires shape alpha >= 3")
        rate = alpha if spec.normalize_mean else float(spec.params.get("rate", 1.0))
        if not rate > 0:
            raise ParameterError("Gamma: rate must be positive")
        self.spec = spec
        self.alpha, self.rate = alpha, rate
        self.mean = alpha / rate
        self._lognorm = alpha * math.log(rate) - special.gammaln(alpha)
        grid = np.linspace(0.0, 100.0 * self.mean, 20001)
        self.H = float(max(np.max(self.hazard(grid)), rate))
        self.H2 = float(max(np.max(np.abs(self.hazard2(grid))), rate ** 2))

    def _x(self, x):
        return np.maximum(np.asarray(x, dtype=float), 0.0)

    def sf(self, x):
        return special.gammaincc(self.alpha, self.rate * self._x(x))

    def logsf(self, x):
        y = self.rate * self._x(x)
        direct = special.gammaincc(self.alpha, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            asym = ((self.alpha - 1) * np.log(y) - y - special.gammaln(self.alpha)
                    + np.log(_gamma_tail_series(self.alpha, np.maximum(y, 1.0))))
            return np.where(y < self._ASYMPTOTIC, np.log(direct), asym)

    def _kernel(self, x):
        # x^(alpha-1) e^(-rate x) times the normalising constant, in log space
        x = self._x(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(self._lognorm + (self.alpha - 1) * np.log(x) - self.rate * x)

    def pdf(self, x):
        x = self._x(x)
        out = self._kernel(x)
        if self.alpha == 1:
            out = np.where(x == 0, self.rate, out)
        return out

    def dpdf(self, x):
        x = self._x(x)
        a, b = self.alpha, self.rate
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self._kernel(x) * ((a - 1) / x - b)
        at0 = -b * b if a == 1 else (b * b if a == 2 else (0.0 if a > 2 else np.inf))
        return np.where(x == 0, at0, out)

    def d2pdf(self, x):
        x = self._x(x)
        a, b = self.alpha, self.rate
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self._kernel(x) * ((a - 1) * (a - 2) / x ** 2 - 2 * b * (a - 1) / x + b * b)
        if a == 1:
            at0 = b ** 3
        elif a == 2:
            at0 = -2 * b ** 3
        elif a == 3:
            at0 = b ** 3
        elif a > 3:
            at0 = 0.0
        else:
            at0 = np.inf
        return np.where(x == 0, at0, out)

    def hazard(self, x):
        x = self._x(x)
        y = self.rate * x
        with np.errstate(divide="ignore", invalid="ignore"):
            direct = self.pdf(x) / self.sf(x)
            asym = self.rate / _gamma_tail_series(self.alpha, np.maximum(y, 1.0))
        return np.where(y < self._ASYMPTOTIC, direct, asym)

    def hazard2(self, x):
        x = self._x(x)
        y = self.rate * x
        with np.errstate(divide="ignore", invalid="ignore"):
            direct = self.dpdf(x) / self.sf(x)
            asym = self.hazard(x) * ((self.alpha - 1) / x - self.rate)
        return np.where(y < self._ASYMPTOTIC, direct, asym)

    def integrated_tail(self, x):
        x = self._x(x)
        a, b = self.alpha, self.rate
        y = b * x
        q = special.gammaincc(a, y)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
            logp = (a - 1) * np.log(y) - y - special.gammaln(a)
            direct = ((a - y) * q + y * np.exp(logp)) / b
            s = _gamma_tail_series(a, np.maximum(y, 1.0))
            # a S - y (S - 1), with y (S - 1) summed term by term
            ys1 = np.zeros_like(y)
            term = np.ones_like(y)
            for k in range(1, 25):
                term = term * (a - k) / np.maximum(y, 1.0)
                ys1 = ys1 + term * np.maximum(y, 1.0)
                if a - k == 0:
                    break
            asym = np.exp(logp) * (a * s - ys1) / b
        return np.where(q > 1e-280, direct, asym)

    def isf(self, u):
        return special.gammainccinv(self.alpha, np.asarray(u, dtype=float)) / self.rate

    def _sample(self, rng, size):
        return rng.gamma(self.alpha, 1.0 / self.rate, size)


class PhaseTypeBundle(DistributionBundle):
    """Absorption time of a finite CTMC with initial law ``alpha`` and
    subgenerator ``S``; G-bar(x) = alpha exp(xS) 1."""

    def __init__(self, spec: DistributionSpec):
        alpha, S = _need(spec, "alpha", "S")
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        S = np.atleast_2d(np.asarray(S, dtype=float))
        m = alpha.size
        if S.shape != (m, m):
            raise ParameterError("PhaseType: S must be square with the size of alpha")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-12:
            raise ParameterError("PhaseType: alpha must be a probability vector (no atom at zero)")
        eig = np.linalg.eigvals(S)
        if not np.all(eig.real < 0):
            raise ParameterError("PhaseType: subgenerator eigenvalues must have negative real part")
        off = S - np.diag(np.diag(S))
        exit_rates = -S.sum(axis=1)
        if np.any(off < 0) or np.any(exit_rates < -1e-12):
            raise ParameterError("PhaseType: S must have nonnegative off-diagonal entries and row sums <= 0")
        mean = float(-alpha @ np.linalg.solve(S, np.ones(m)))
        if spec.normalize_mean:
            S = S * mean
            mean = 1.0
        self.spec = spec
        self.alpha, self.S = alpha, S
        self.exit = -S.sum(axis=1)
        self.m = m
        self.mean = mean
        self._shift = float(-np.max(np.linalg.eigvals(S).real))
        self._Sshift = S + self._shift * np.eye(m)
        self._one = np.ones(m)
        grid = np.linspace(0.0, 60.0 * self.mean, 3001)
        p = self._p(grid)
        ps = p.sum(axis=1)
        self.H = float(max(np.max(p @ self.exit / ps), 0.0))
        nu = -(S @ S) @ self._one
        self.H2 = float(np.max(np.abs(p @ nu / ps)))

    def _p(self, x):
        """Row vectors alpha exp(x (S + shift I)) for each x (scaled by e^(shift x))."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        flat = x.ravel()
        mats = linalg.expm(flat[:, None, None] * self._Sshift[None, :, :])
        return np.einsum("i,kij->kj", self.alpha, mats).reshape(x.shape + (self.m,))

    def _scaled(self, x, vec):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return self._p(x) @ vec * np.exp(-self._shift * x)

    def sf(self, x):
        return self._scaled(x, self._one)

    def logsf(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        with np.errstate(divide="ignore"):
            return np.log(self._p(x) @ self._one) - self._shift * x

    def pdf(self, x):
        return self._scaled(x, self.exit)

    def dpdf(self, x):
        return self._scaled(x, -(self.S @ self.S) @ self._one)

    def d2pdf(self, x):
        return self._scaled(x, -(self.S @ self.S @ self.S) @ self._one)

    def hazard(self, x):
        p = self._p(x)
        return (p @ self.exit) / (p @ self._one)

    def hazard2(self, x):
        p = self._p(x)
        return (p @ (-(self.S @ self.S) @ self._one)) / (p @ self._one)

    def integrated_tail(self, x):
        w = -np.linalg.solve(self.S, self._one)
        return self._scaled(x, w)

    def _sample(self, rng, size):
        n = int(np.prod(size)) if size is not None else 1
        phase = rng.choice(self.m, size=n, p=self.alpha)
        out = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        rates = -np.diag(self.S)
        jump = np.zeros((self.m, self.m + 1))
        jump[:, : self.m] = self.S - np.diag(np.diag(self.S))
        jump[:, self.m] = self.exit
        jump /= rates[:, None]
        cum = np.cumsum(jump, axis=1)
        while alive.any():
            idx = np.flatnonzero(alive)
            ph = phase[idx]
            out[idx] += rng.exponential(1.0, idx.size) / rates[ph]
            u = rng.random(idx.size)
            nxt = (u[:, None] > cum[ph]).sum(axis=1)
            nxt = np.minimum(nxt, self.m)
            done = nxt == self.m
            alive[idx[done]] = False
            phase[idx[~done]] = nxt[~done]
        return out if size is not None else out[0]


class EmpiricalRenewalBundle(DistributionBundle):
    """Piecewise-linear CDF through the sorted sample, starting at 0.

    Meant for inter-arrival laws given by data; its density is piecewise
    constant, so it does not satisfy the service-time smoothness conditions.
    """

    def __init__(self, spec: DistributionSpec):
        values = spec.params.get("values")
        if values is None and "file" in spec.params:
            values = np.loadtxt(str(spec.params["file"]), dtype=float).ravel()
        if values is None:
            raise ParameterError("EmpiricalRenewal: needs values=... or file=...")
        v = np.unique(np.asarray(values, dtype=float))
        if v.size < 1 or np.any(v <= 0):
            raise ParameterError("EmpiricalRenewal: values must be positive")
        n = v.size
        knots = np.concatenate([[0.0], v])
        probs = np.linspace(0.0, 1.0, n + 1)
        mean = float(np.sum(np.diff(probs) * 0.5 * (knots[1:] + knots[:-1])))
        if spec.normalize_mean:
            knots = knots / mean
            mean = 1.0
        self.spec = spec
        self.knots, self.surv = knots, 1.0 - probs
        self.mean = mean
        seg = np.diff(knots)
        self._dens = np.diff(probs) / seg
        # int_{knot_k}^{inf} sf, from the trapezoid on each linear piece
        pieces = 0.5 * (self.surv[1:] + self.surv[:-1]) * seg
        self._tail = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
        self.H = math.inf
        self.H2 = 0.0

    def sf(self, x):
        return np.interp(x, self.knots, self.surv, left=1.0, right=0.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        k = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self._dens.size - 1)
        return np.where((x >= 0) & (x < self.knots[-1]), self._dens[k], 0.0)

    def dpdf(self, x):
        return np.zeros(np.shape(x))

    def d2pdf(self, x):
        return np.zeros(np.shape(x))

    def integrated_tail(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.knots[-1])
        k = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self._dens.size - 1)
        s_x = self.sf(x)
        partial = 0.5 * (s_x + self.surv[k + 1]) * (self.knots[k + 1] - x)
        return partial + self._tail[k + 1]

    def isf(self, u):
        return np.interp(-np.asarray(u, dtype=float), -self.surv, self.knots)


_BUILDERS = {
    Family.EXPONENTIAL: ExponentialBundle,
    Family.LOMAX: LomaxBundle,
    Family.LOGNORMAL: LogNormalBundle,
    Family.GAMMA: GammaBundle,
    Family.PHASE_TYPE: PhaseTypeBundle,
    Family.EMPIRICAL: EmpiricalRenewalBundle,
}


def build_bundle(spec: DistributionSpec | str) -> DistributionBundle:
    """Construct the evaluators and samplers for ``spec``.

    Raises :class:`ParameterError` for parameters outside the family's
    domain and :class:`NormalizationError` when ``normalize_mean`` is set but
    the law has no finite mean.
    """
    if isinstance(spec, str):
        spec = DistributionSpec.parse(spec)
    return _BUILDERS[spec.family](spec)


def sample_service(bundle: DistributionBundle, rng: np.random.Generator, size=None):
    """Draw service (or renewal) times with law G."""
    out = bundle._sample(rng, size)
    return float(out) if size is None else np.asarray(out, dtype=float)


def _invert_integrated_tail(bundle: DistributionBundle, target):
    # Solve int_x^inf G-bar = target.  The left side is convex and
    # decreasing, so Newton steps never overshoot to the right; bisection
    # covers steps that leave the bracket.
    target = np.asarray(target, dtype=float)
    lo = np.zeros_like(target)
    hi = np.full_like(target, max(bundle.mean, 1.0))
    for _ in range(400):
        grow = bundle.integrated_tail(hi) > target
        if not grow.any():
            break
        hi = np.where(grow, hi * 2.0, hi)
    x = lo.copy()
    for _ in range(300):
        f = bundle.integrated_tail(x) - target
        lo = np.where(f >= 0, x, lo)
        hi = np.where(f < 0, x, hi)
        slope = bundle.sf(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x + f / slope
        bad = ~np.isfinite(step) | (step < lo) | (step > hi)
        new = np.where(bad, 0.5 * (lo + hi), step)
        if np.all(np.abs(new - x) <= 1e-13 * np.maximum(1.0, x)):
            return new
        x = new
    return x


def sample_residual(bundle: DistributionBundle, rng: np.random.Generator, size=None):
    """Draw from the equilibrium (residual) law with density G-bar / mean."""
    u = rng.random(size)
    x = _invert_integrated_tail(bundle, (1.0 - np.asarray(u)) * bundle.mean)
    return float(x) if size is None else x


def _cutoff(bundle: DistributionBundle, level: float = 1e-12) -> float:
    return float(bundle.isf(np.array(level)))


def zbar(bundle: DistributionBundle, r) -> np.ndarray | float:
    """``int_r^inf G-bar(x) dx`` by adaptive Gauss-Kronrod quadrature.

    The integral is split on a geometric ladder up to the point where
    G-bar drops below 1e-12; the remainder comes from the family's
    integrated tail.
    """
    scalar = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    xcut = _cutoff(bundle)
    out = np.empty(r.shape)
    for i, ri in enumerate(r.ravel()):
        if ri >= xcut:
            out.flat[i] = float(bundle.integrated_tail(np.array(ri)))
            continue
        edges = [ri]
        step = max(bundle.mean, 1e-3) * 0.5
        while edges[-1] + step < xcut:
            edges.append(edges[-1] + step)
            step *= 2.0
        edges.append(xcut)
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(lambda u: float(bundle.sf(u)), a, b,
                                    epsabs=1e-13, epsrel=1e-12, limit=200)
            total += val
        out.flat[i] = total + float(bundle.integrated_tail(np.array(xcut)))
    return float(out[0]) if scalar else out


_FLUID_CACHE: dict = {}


def fluid_z(bundle: DistributionBundle, nodes) -> np.ndarray:
    """Fluid profile Z-bar on ``nodes``; the value at r = 0 is the mean exactly."""
    nodes = np.asarray(nodes, dtype=float)
    key = (id(bundle), nodes.tobytes())
    hit = _FLUID_CACHE.get(key)
    if hit is not None and hit[0] is bundle:
        return hit[1]
    vals = zbar(bundle, nodes)
    vals = np.where(nodes == 0.0, bundle.mean, vals)
    if len(_FLUID_CACHE) > 64:
        _FLUID_CACHE.clear()
    _FLUID_CACHE[key] = (bundle, vals)
    return vals


@dataclass
class AssumptionReport:
    """Numerical check of the smoothness and moment conditions on a grid."""

    family: str
    grid: list
    tolerances: dict
    sup_h: float
    sup_abs_h2: float
    sup_abs_gpp: float
    mean: float
    sf_tail_exponent: float
    gpp_tail_exponent: float
    clauses: dict
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.clauses.values())

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("family", "tolerances", "sup_h", "sup_abs_h2",
                                           "sup_abs_gpp", "mean", "sf_tail_exponent",
                                           "gpp_tail_exponent", "clauses", "notes")}
        d["grid"] = {"n": len(self.grid), "min": self.grid[0], "max": self.grid[-1],
                     "nodes": self.grid}
        d["passed"] = self.passed
        return d

    def to_json(self, **kw) -> str:
        def _clean(o):
            if isinstance(o, float) and not math.isfinite(o):
                return str(o)
            if isinstance(o, dict):
                return {k: _clean(v) for k, v in o.items()}
            if isinstance(o, list):
                return [_clean(v) for v in o]
            return o
        return json.dumps(_clean(self.to_dict()), sort_keys=True, **kw)


DEFAULT_TOLERANCES = {
    "mean": 1e-8,
    "bound": 1e6,          # largest value accepted as "bounded" on a finite grid
    "moment_exponent": 3.0,  # G-bar must decay faster than x^-3
    "gpp_exponent": 2.0,     # g'' must decay faster than x^-2
    "exponent_margin": 0.0,
}


def _tail_exponent(x, y) -> float:
    """Least-squares slope of -log|y| against log x over the last decade."""
    x = np.asarray(x, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    sel = (x >= x[-1] / 10.0) & (x > 0)
    xs, ys = x[sel], y[sel]
    if np.all(ys == 0):
        return math.inf
    if np.any(ys == 0) or np.any(~np.isfinite(ys)):
        keep = (ys > 0) & np.isfinite(ys)
        if keep.sum() < 2:
            return math.inf
        xs, ys = xs[keep], ys[keep]
    slope = np.polyfit(np.log(xs), np.log(ys), 1)[0]
    return float(-slope)


def verify_assumptions(bundle: DistributionBundle, grid=None, tolerances: Mapping | None = None
                       ) -> AssumptionReport:
    """Check boundedness of h and h2, unit mean, the (3+eps) moment via the
    tail exponent of G-bar, and boundedness and decay of g''.  Failures are
    reported, never raised."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    if grid is None:
        grid = np.concatenate([[0.0], np.geomspace(1e-4, 100.0 * bundle.mean, 4000)])
    grid = np.asarray(grid, dtype=float)
    notes = []
    if grid[-1] < 50.0 * bundle.mean:
        notes.append("grid shorter than 50 mean-units; tail exponents are unreliable")

    with np.errstate(all="ignore"):
        h = np.asarray(bundle.hazard(grid), dtype=float)
        h2 = np.asarray(bundle.hazard2(grid), dtype=float)
        gpp = np.asarray(bundle.d2pdf(grid), dtype=float)
        g = np.asarray(bundle.pdf(grid), dtype=float)
        logsf = np.asarray(bundle.logsf(grid), dtype=float)

    def _sup(v):
        return float(np.max(np.abs(v))) if np.all(np.isfinite(v)) else math.inf

    sup_h, sup_h2, sup_gpp = _sup(h), _sup(h2), _sup(gpp)
    sel = grid >= grid[-1] / 10.0
    if np.all(np.isfinite(logsf[sel])) and sel.sum() >= 2:
        slope = np.polyfit(np.log(grid[sel]), logsf[sel], 1)[0]
        sf_exp = float(-slope)
        if logsf[-1] < -700:
            sf_exp = math.inf
    else:
        sf_exp = math.inf if np.all(logsf[sel] == -np.inf) else _tail_exponent(grid, np.exp(logsf))
    gpp_exp = _tail_exponent(grid, gpp)

    clauses = {
        "unit_mean": {
            "value": bundle.mean, "threshold": tol["mean"],
            "pass": bool(abs(bundle.mean - 1.0) <= tol["mean"] and np.all(np.isfinite(g))),
        },
        "hazard_bounded": {
            "value": sup_h, "threshold": tol["bound"], "pass": bool(sup_h <= tol["bound"]),
        },
        "hazard_derivative_bounded": {
            "value": sup_h2, "threshold": tol["bound"], "pass": bool(sup_h2 <= tol["bound"]),
        },
        "moment_3_plus_eps": {
            "value": sf_exp, "threshold": tol["moment_exponent"] + tol["exponent_margin"],
            "pass": bool(sf_exp > tol["moment_exponent"] + tol["exponent_margin"]),
        },
        "gpp_bounded": {
            "value": sup_gpp, "threshold": tol["bound"], "pass": bool(sup_gpp <= tol["bound"]),
        },
        "gpp_decay": {
            "value": gpp_exp, "threshold": tol["gpp_exponent"] + tol["exponent_margin"],
            "pass": bool(gpp_exp > tol["gpp_exponent"] + tol["exponent_margin"]),
        },
    }
    notes.append("full-support condition on the inter-arrival law is recorded, not enforced")
    return AssumptionReport(
        family=bundle.spec.family.value, grid=grid.tolist(), tolerances=tol,
        sup_h=sup_h, sup_abs_h2=sup_h2, sup_abs_gpp=sup_gpp, mean=float(bundle.mean),
        sf_tail_exponent=sf_exp, gpp_tail_exponent=gpp_exp, clauses=clauses, notes=notes,
    )
