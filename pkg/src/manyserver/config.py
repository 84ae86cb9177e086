"""Plain-text experiment configuration.

An experiment file is INI-style::

    [experiment]
    kind = simulate-queue
    seed = 20240611
    replications = 4

    [queue]
    N = 100
    beta = 1.0
    horizon = 20
    sample_times = linspace 0 20 41

    [service]
    family = Lomax
    alpha = 4

Every value is kept as text in the parsed object so that the canonical
rendering (and therefore the configuration hash) does not depend on how
numbers were typed.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionConfig
from .distributions import DistributionSpec, Family, ParameterError
from .kernels import RGrid
from .queue_sim import SimConfig

__all__ = ["ConfigParseError", "ExperimentConfig", "KINDS", "parse_config", "load_config"]

KINDS = ("simulate-queue", "simulate-diffusion", "stationary", "sweep", "verify-dist", "audit")

_SECTIONS = {
    "experiment": {"kind", "seed", "replications", "threads", "out", "checks", "max_customers"},
    "queue": {"n", "beta", "horizon", "sample_times", "init"},
    "service": None,
    "arrival": None,
    "rgrid": {"r_max", "m", "first", "nodes"},
    "diffusion": {"horizon", "dt", "n_cells", "sigma", "beta", "x0", "sample_times", "rank_tol"},
    "stationary": {"burn_in", "n_draws", "mode", "spacing", "functionals", "diffusion_draws",
                   "diffusion_horizon", "diffusion_dt"},
    "sweep": {"n_list", "functionals", "n_draws", "burn_in", "diffusion_draws",
              "diffusion_horizon", "diffusion_dt", "n_boot"},
    "verify": {"x_max", "points"},
    "audit": {"times", "rule", "substep"},
}


class ConfigParseError(ValueError):
    """Malformed experiment file; the message names the line and field."""


def _line_index(text: str) -> dict:
    idx = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            idx[(section, None)] = no
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            idx[(section, m.group(1).strip().lower())] = no
    return idx


@dataclass
class ExperimentConfig:
    """Parsed experiment; ``sections`` holds the raw text values."""

    sections: dict
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    # -- generic access -----------------------------------------------------
    def _err(self, section, key, msg):
        line = self.lines.get((section, key)) or self.lines.get((section, None))
        where = f"line {line}, " if line else ""
        return ConfigParseError(f"{where}[{section}] {key}: {msg}")

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def get_float(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise self._err(section, key, f"expected a number, got {v!r}") from None

    def get_int(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            f = float(v)
        except ValueError:
            raise self._err(section, key, f"expected an integer, got {v!r}") from None
        if f != int(f):
            raise self._err(section, key, f"expected an integer, got {v!r}")
        return int(f)

    def get_list(self, section, key, default=None, cast=float):
        v = self.get(section, key)
        if v is None:
            return default
        v = v.strip()
        try:
            if v.startswith("linspace"):
                _, a, b, n = v.split()
                return np.linspace(float(a), float(b), int(n)).tolist()
            return [cast(x) for x in re.split(r"[,\s]+", v) if x]
        except ValueError:
            raise self._err(section, key, f"cannot parse list {v!r}") from None

    # -- typed views --------------------------------------------------------
    @property
    def kind(self) -> str:
        return self.get("experiment", "kind", "")

    @property
    def seed(self) -> int:
        return self.get_int("experiment", "seed", 0)

    @property
    def replications(self) -> int:
        return self.get_int("experiment", "replications", 1)

    @property
    def threads(self) -> int | None:
        return self.get_int("experiment", "threads", None)

    @property
    def checks(self) -> dict:
        """``checks = name, name:threshold`` -> ``{name: threshold or None}``."""
        raw = self.get("experiment", "checks")
        out = {}
        if raw:
            for item in re.split(r"[,\s]+", raw.strip()):
                if not item:
                    continue
                name, _, val = item.partition(":")
                try:
                    out[name] = float(val) if val else None
                except ValueError:
                    raise self._err("experiment", "checks", f"bad threshold in {item!r}") from None
        return out

    def distribution(self, section: str) -> DistributionSpec:
        sec = self.sections.get(section)
        if sec is None:
            if section == "arrival":
                return DistributionSpec(Family.EXPONENTIAL)
            raise self._err(section, None, "section missing")
        if "family" not in sec:
            raise self._err(section, "family", "missing")
        text = " ".join([sec["family"]] + [f"{k}={v.replace(' ', '')}" for k, v in sec.items()
                                           if k != "family"])
        try:
            spec = DistributionSpec.parse(text)
            from .distributions import build_bundle
            build_bundle(spec)
        except ParameterError as exc:
            raise self._err(section, "family", str(exc)) from None
        return spec

    def r_grid(self) -> RGrid:
        nodes = self.get_list("rgrid", "nodes")
        if nodes is not None:
            try:
                return RGrid(np.asarray(nodes))
            except ValueError as exc:
                raise self._err("rgrid", "nodes", str(exc)) from None
        return RGrid.geometric(self.get_float("rgrid", "r_max", 40.0),
                               self.get_int("rgrid", "m", 200),
                               self.get_float("rgrid", "first", 1e-3))

    def sim_config(self, seed: int | None = None, **over) -> SimConfig:
        for k in ("n", "beta", "horizon"):
            if self.get("queue", k) is None and k not in over:
                raise self._err("queue", k, "missing")
        kw = dict(N=self.get_int("queue", "n"), beta=self.get_float("queue", "beta"),
                  horizon=self.get_float("queue", "horizon"), service=self.distribution("service"),
                  arrival=self.distribution("arrival"),
                  sample_times=self.get_list("queue", "sample_times"),
                  r_grid=self.r_grid(), init=self.get("queue", "init", "star"),
                  seed=self.seed if seed is None else seed)
        kw.update(over)
        try:
            return SimConfig(**kw)
        except ValueError as exc:
            raise self._err("queue", None, str(exc)) from None

    def diffusion_config(self, seed: int | None = None, **over) -> DiffusionConfig:
        arr = self.distribution("arrival")
        sigma_default = 1.0
        if arr.family is not Family.EXPONENTIAL:
            from .distributions import build_bundle
            # the arrival noise scale is the coefficient of variation of the unit-mean law
            sigma_default = float(np.sqrt(max(_second_moment(build_bundle(arr)) - 1.0, 0.0)))
        kw = dict(service=self.distribution("service"),
                  beta=self.get_float("diffusion", "beta", self.get_float("queue", "beta", 1.0)),
                  sigma=self.get_float("diffusion", "sigma", sigma_default),
                  horizon=self.get_float("diffusion", "horizon", 10.0),
                  dt=self.get_float("diffusion", "dt", 0.01),
                  n_cells=self.get_int("diffusion", "n_cells", 256),
                  x0=self.get_float("diffusion", "x0", 0.0),
                  sample_times=self.get_list("diffusion", "sample_times"),
                  r_grid=self.r_grid(), rank_tol=self.get_float("diffusion", "rank_tol", 1e-10),
                  seed=self.seed if seed is None else seed)
        kw.update(over)
        try:
            return DiffusionConfig(**kw)
        except ValueError as exc:
            raise self._err("diffusion", None, str(exc)) from None

    # -- serialization ------------------------------------------------------
    def to_text(self) -> str:
        """Canonical rendering: sections and keys sorted, values stripped."""
        out = []
        for sec in sorted(self.sections):
            out.append(f"[{sec}]")
            for k in sorted(self.sections[sec]):
                out.append(f"{k} = {self.sections[sec][k]}")
            out.append("")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {s: dict(sorted(v.items())) for s, v in sorted(self.sections.items())}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, **exp) -> "ExperimentConfig":
        secs = {s: dict(v) for s, v in self.sections.items()}
        for k, v in exp.items():
            if v is not None:
                secs.setdefault("experiment", {})[k] = str(v)
        return ExperimentConfig(secs, self.lines)


def _second_moment(bundle) -> float:
    # E[V^2] = 2 int_0^inf x G-bar(x) dx = 2 int_0^inf Z-bar(r) dr
    from scipy import integrate
    val, _ = integrate.quad(lambda r: float(bundle.integrated_tail(np.array(r))), 0, np.inf,
                            limit=200)
    return 2.0 * val


def parse_config(text: str) -> ExperimentConfig:
    """Parse an experiment file, reporting the line and field of any error."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f"line {line}: " if line else ""
        raise ConfigParseError(f"{where}{exc.message if hasattr(exc, 'message') else exc}") from None
    lines = _line_index(text)
    sections = {}
    for sec in cp.sections():
        name = sec.strip().lower()
        allowed = _SECTIONS.get(name, "unknown")
        if allowed == "unknown":
            raise ConfigParseError(f"line {lines.get((name, None), '?')}: unknown section [{sec}]")
        vals = {}
        for k, v in cp.items(sec):
            k = k.strip().lower()
            if allowed is not None and k not in allowed:
                raise ConfigParseError(f"line {lines.get((name, k), '?')}, [{name}] {k}: unknown field")
            vals[k] = " ".join(v.split())
        sections[name] = vals
    cfg = ExperimentConfig(sections, lines)
    kind = cfg.kind
    if kind and kind not in KINDS:
        raise cfg._err("experiment", "kind", f"unknown experiment kind {kind!r}")
    for sec in ("service", "arrival"):
        if sec in sections:
            cfg.distribution(sec)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
