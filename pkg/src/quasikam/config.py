"""TOML run configuration: schema, validation and the canonical hash.

Every section and key is listed in SCHEMA with its type and default; keys not
in the schema are rejected.  ``None`` defaults mark optional keys.
"""

import hashlib
import json
import math
import sys
from dataclasses import dataclass
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .kam_engine import ScaleSchedule, make_schedule
from .lattice_algebra import SimpleRegion
from .model import ModelSpec
from .torus_model import GOLDEN, ShiftSystem, TorusPoint

__all__ = ["ConfigError", "SCHEMA", "RunConfig", "load_config", "parse_config", "config_hash"]


class ConfigError(ValueError):
    pass


_SITES = "sites"      # list of integer lists
_FLOATS = "floats"
_INTS = "ints"
_STRS = "strs"
_MATRIX = "matrix"    # list of float lists

SCHEMA: Dict[str, Dict[str, tuple]] = {
    "lattice": {"d": (int, 1), "lower": (_INTS, [-32]), "upper": (_INTS, [31]),
                "metric": (str, "sup")},
    "torus": {"nu": (int, 1), "frequencies": (_MATRIX, [[GOLDEN]]), "A": (int, 2),
              "C_A": (int, 4), "omega": (_FLOATS, [0.0])},
    "hull": {"decay_b": (float, 1.0), "n_max": (int, 12), "master_seed": (int, 42),
             "constant_theta": (float, None)},
    "operator": {"eps": (float, 1e-3)},
    "schedule": {"L0": (int, 4), "q": (float, 1.5), "c_trunc": (float, 0.25),
                 "max_steps": (int, 8), "upsilon": (float, 0.1), "stop_tol": (float, 1e-12),
                 "eps": (float, None), "m": (float, None), "max_resamples": (int, 0),
                 "require": (_STRS, ["K2", "K3", "K4", "K6", "K7", "K9_lam", "K9_phi"])},
    "oracle": {"cap": (int, 4096), "rate_fraction": (float, 0.8), "shift_t": (float, 0.37)},
    "spacing": {"trials": (int, 2000), "s_factors": (_FLOATS, [1, 2, 4, 8, 16, 32]),
                "L": (int, 4), "min_r2": (float, 0.95)},
    "wegner": {"trials": (int, 1000), "center": (float, None), "widths": (_FLOATS, None),
               "sites": (_SITES, None), "min_r2": (float, 0.95)},
    "minami": {"sites": (_SITES, [[-8], [8]]), "trials": (int, 4000),
               "ratios": (_FLOATS, [1.0, 0.5, 0.25, 0.125]), "centers": (_FLOATS, None),
               "base_widths": (_FLOATS, None), "intervals": (_MATRIX, None),
               "pilot": (int, 500), "min_cells": (int, 14), "max_failure_rate": (float, 0.01)},
    "derivatives": {"z": (_INTS, [0]), "h": (float, 1e-6), "safety": (float, 10.0),
                    "J": (int, 4), "x_grid": (_INTS, [1, 4, 8, 12, 16, 24]),
                    "support_step": (int, 2), "support_site": (_INTS, [0]),
                    "jacobian_sites": (_SITES, [[-4], [4]]), "jacobian_h_factor": (float, 1e-5),
                    "covering_grid": (int, 32), "covering_scale": (float, 0.05),
                    "higher_orders": (_INTS, [1, 2, 3]),
                    "fd": (bool, True), "base_lemma": (bool, True), "induction_lemma": (bool, True),
                    "remote_decay": (bool, True), "covariance": (bool, True),
                    "stochastic_support": (bool, True), "jacobian": (bool, True),
                    "covering": (bool, True), "higher": (bool, False)},
}


def _check(where: str, kind, value):
    def fail(what):
        raise ConfigError(f"{where}: expected {what}, got {value!r}")

    def num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    if kind is bool:
        if not isinstance(value, bool):
            fail("a boolean")
        return value
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            fail("an integer")
        return value
    if kind is float:
        if not num(value) or not math.isfinite(value):
            fail("a finite number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            fail("a string")
        return value
    if not isinstance(value, list):
        fail("a list")
    if kind == _FLOATS:
        if not all(num(v) for v in value):
            fail("a list of numbers")
        return [float(v) for v in value]
    if kind == _INTS:
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            fail("a list of integers")
        return list(value)
    if kind == _STRS:
        if not all(isinstance(v, str) for v in value):
            fail("a list of strings")
        return list(value)
    if kind == _SITES:
        if not all(isinstance(r, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                               for v in r) for r in value):
            fail("a list of integer lists")
        return [list(r) for r in value]
    if kind == _MATRIX:
        if not all(isinstance(r, list) and all(num(v) for v in r) for r in value):
            fail("a list of number lists")
        return [[float(v) for v in r] for r in value]
    raise AssertionError(kind)


def _normalize(raw: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    out = {}
    for name in raw:
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    for name, fields in SCHEMA.items():
        given = raw.get(name, {})
        for key in given:
            if key not in fields:
                raise ConfigError(f"{name}.{key}: unknown key")
        sec = {}
        for key, (kind, default) in fields.items():
            if key in given:
                sec[key] = _check(f"{name}.{key}", kind, given[key])
            elif default is not None:
                sec[key] = _check(f"{name}.{key}", kind, default)
            else:
                sec[key] = None
        out[name] = sec
    return out


def config_hash(cfg: Dict[str, Any]) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration plus the model and schedule it describes."""
    data: Dict[str, Dict[str, Any]]
    model: ModelSpec
    schedule: ScaleSchedule

    @property
    def hash(self) -> str:
        return config_hash(self.data)

    def section(self, name: str) -> Dict[str, Any]:
        return self.data[name]

    def with_seed(self, seed: int) -> "RunConfig":
        data = json.loads(json.dumps(self.data))
        data["hull"]["master_seed"] = int(seed)
        return _build(data)


def _build(data) -> RunConfig:
    lat, tor, hull, op, sch = (data[k] for k in ("lattice", "torus", "hull", "operator", "schedule"))
    d = lat["d"]
    if len(lat["lower"]) != d or len(lat["upper"]) != d:
        raise ConfigError("lattice.lower/upper: need d entries each")
    if any(a > b for a, b in zip(lat["lower"], lat["upper"])):
        raise ConfigError("lattice: lower must not exceed upper")
    if lat["metric"] not in ("sup", "l1"):
        raise ConfigError("lattice.metric: expected 'sup' or 'l1'")
    if tor["nu"] < 1:
        raise ConfigError("torus.nu: must be positive")
    if len(tor["omega"]) != tor["nu"]:
        raise ConfigError("torus.omega: need nu coordinates")
    if not 0 <= hull["master_seed"] < 2 ** 64:
        raise ConfigError("hull.master_seed: must be an unsigned 64-bit integer")
    if hull["n_max"] < 0:
        raise ConfigError("hull.n_max: must be non-negative")
    ct = hull["constant_theta"]
    if ct is not None and not 0.0 <= ct <= 1.0:
        raise ConfigError("hull.constant_theta: must lie in [0, 1]")
    eps = op["eps"]
    if eps < 0:
        raise ConfigError("operator.eps: must be non-negative")
    sched_eps = sch["eps"] if sch["eps"] is not None else eps
    if not 0.0 < sched_eps < 1.0:
        raise ConfigError("schedule.eps: needed in (0, 1) when operator.eps is 0 or >= 1")
    try:
        system = ShiftSystem(nu=tor["nu"], d=d, freqs=tuple(tuple(f) for f in tor["frequencies"]),
                             upa_A=tor["A"], upa_CA=tor["C_A"])
        omega = TorusPoint(tuple(tor["omega"]))
        region = SimpleRegion(tuple(lat["lower"]), tuple(lat["upper"]), metric=lat["metric"])
        schedule = make_schedule(L0=sch["L0"], q=sch["q"], eps=sched_eps, decay_b=hull["decay_b"],
                                 c_trunc=sch["c_trunc"], max_steps=sch["max_steps"], m=sch["m"],
                                 upsilon=sch["upsilon"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = ModelSpec(region=region, system=system, omega=omega, eps=eps,
                      master_seed=hull["master_seed"], n_max=hull["n_max"],
                      decay_b=hull["decay_b"], constant_theta=ct)
    return RunConfig(data, model, schedule)


def parse_config(raw: Dict[str, Any], seed: Optional[int] = None) -> RunConfig:
    data = _normalize(raw)
    if seed is not None:
        data["hull"]["master_seed"] = int(seed)
    return _build(data)


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    """Read a TOML file (or use every default when ``path`` is None)."""
    if path is None:
        return parse_config({}, seed)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, seed)
