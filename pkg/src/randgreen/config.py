"""Experiment configuration: TOML parsing, validation with line diagnostics,
canonical serialization and hashing.

Complex numbers are strings ``"a+bi"`` and maps use the affine shorthand
``"z^2+c"``.  Every numeric field is range-checked before any computation.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from typing import Any, Dict, Optional

import tomli
import tomli_w

from .ensemble import CoefficientBall, Dirac, Ensemble, FiniteMixture
from .errors import ConfigError
from .proj import LIFTS, PointP1, parse_map
from .transfer import (Observable, coboundary, default_panel, linear_combination,
                       observable_from_spec)

COMMANDS = ("green-eval", "potential-grid", "measure-sample", "equidist-test",
            "markov-sample", "stationarity-test", "decay", "gordin", "correlation",
            "clt-skew", "clt-markov", "holder-probe", "tail-check")

INT, FLOAT, STR, BOOL, LIST = "int", "float", "str", "bool", "list"

# field: (type, default, lo, hi); lo/hi inclusive, None = unbounded
_SCHEMA: Dict[str, Dict[str, tuple]] = {
    "sequence": {"seed": (INT, None, 0, 2 ** 63 - 1), "n": (INT, 64, 1, 10 ** 6)},
    "green-eval": {"points": (LIST, ["0.5+0.5i", "2", "inf"], None, None),
                   "n": (INT, 30, 0, 2000), "lift": (STR, "normalized", None, None)},
    "potential-grid": {"chart": (STR, "z", None, None), "resolution": (INT, 256, 3, 4096),
                       "n": (INT, 25, 0, 2000), "half_width": (FLOAT, 1.5, 1e-6, 1e6),
                       "lift": (STR, "normalized", None, None)},
    "measure-sample": {"depth": (INT, 12, 0, 10 ** 5), "count": (INT, 10000, 1, 10 ** 8),
                       "start": (STR, "", None, None)},
    "equidist-test": {"resolution": (INT, 512, 16, 4096), "n": (INT, 25, 1, 2000),
                      "samples": (INT, 20000, 10, 10 ** 8), "depth": (INT, 25, 1, 10 ** 5),
                      "half_width": (FLOAT, 1.5, 1.3, 1e3),
                      "tolerance": (FLOAT, 0.03, 0.0, None)},
    "markov-sample": {"length": (INT, 1000, 0, 10 ** 8), "start": (STR, "", None, None),
                      "burn_in": (INT, 100, 0, 10 ** 8)},
    "stationarity-test": {"chains": (INT, 100, 2, 10 ** 7), "length": (INT, 2000, 2, 10 ** 8),
                          "burn_in": (INT, 200, 0, 10 ** 8), "samples": (INT, 256, 2, 10 ** 6),
                          "k_se": (FLOAT, 3.0, 0.0, None)},
    "decay": {"observable": (None, "re_xy", None, None), "n_list": (LIST, list(range(2, 11)),
                                                                    None, None),
              "samples": (INT, 4000, 10, 10 ** 7), "n_pre": (INT, 25, 1, 10 ** 4),
              "mode": (STR, "auto", None, None), "mc_samples": (INT, 64, 2, 10 ** 6)},
    "gordin": {"observable": (None, "re_xy", None, None), "J": (INT, 8, 0, 64),
               "paths": (INT, 512, 2, 10 ** 6), "mode": (STR, "auto", None, None),
               "nu_chains": (INT, 200, 2, 10 ** 7), "nu_length": (INT, 300, 2, 10 ** 8),
               "nu_burn_in": (INT, 200, 0, 10 ** 8), "tail_tol": (FLOAT, 0.05, 0.0, None)},
    "correlation": {"phi": (None, "re_xy", None, None), "psi": (None, "re_xy", None, None),
                    "n_list": (LIST, list(range(0, 9)), None, None),
                    "chains": (INT, 10000, 10, 10 ** 8), "n_pre": (INT, 25, 1, 10 ** 4)},
    "clt-skew": {"observable": (None, "re_xy", None, None), "n": (INT, 1000, 1, 10 ** 7),
                 "chains": (INT, 10000, 10, 10 ** 8), "J": (INT, 8, 0, 64),
                 "paths": (INT, 512, 2, 10 ** 6), "n_pre": (INT, 25, 1, 10 ** 4),
                 "sigma2": (FLOAT, None, 0.0, None)},
    "clt-markov": {"observable": (None, "re_xy", None, None), "n": (INT, 1000, 1, 10 ** 7),
                   "chains": (INT, 10000, 10, 10 ** 8), "J": (INT, 8, 0, 64),
                   "paths": (INT, 512, 2, 10 ** 6), "burn_in": (INT, 200, 0, 10 ** 7),
                   "sigma2": (FLOAT, None, 0.0, None)},
    "holder-probe": {"region": (LIST, [-1.5, 1.5, -1.5, 1.5], None, None),
                     "scales": (LIST, [1e-2, 3e-3, 1e-3, 3e-4], None, None),
                     "pairs": (INT, 200, 1, 10 ** 7), "n": (INT, 30, 1, 2000),
                     "chart": (STR, "z", None, None), "lift": (STR, "normalized", None, None)},
    "tail-check": {"epsilon": (FLOAT, 0.1, 1e-12, None), "n": (INT, 50, 1, 10 ** 7)},
}

_ENSEMBLE_KEYS = {
    "dirac": {"type", "map"},
    "mixture": {"type", "maps", "weights"},
    "ball": {"type", "base", "radius", "floor", "reject", "max_reject_fraction",
             "max_attempts"},
}
_TOP_KEYS = {"seed", "ensemble", "observables"} | set(_SCHEMA)


def parse_complex(text) -> complex:
    """``"a+bi"`` (also ``"2"``, ``"-i"``, ``"0.5i"``) to a Python complex."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return complex(text)
    s = str(text).replace(" ", "")
    if not s:
        raise ValueError("empty complex literal")
    s = re.sub(r"(?<![\deE.])([+-]?)i$", r"\g<1>1i", s) if s.endswith("i") else s
    s = re.sub(r"^i$", "1i", s)
    return complex(s.replace("i", "j"))


def parse_point(text) -> PointP1:
    if isinstance(text, str) and text.strip().lower() in ("inf", "infinity"):
        return PointP1.infinity()
    return PointP1.from_affine(parse_complex(text))


def _line_of(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    """1-based line of ``key`` inside ``[section]`` (or of the section header)."""
    lines = text.splitlines()
    in_sec = section is None
    header = re.compile(r"^\s*\[+\s*([^\]]+?)\s*\]+")
    for i, line in enumerate(lines, 1):
        m = header.match(line)
        if m:
            name = m.group(1).strip().strip('"')
            in_sec = section is not None and (name == section or name.startswith(section + "."))
            if in_sec and key is None:
                return i
            continue
        if in_sec and key is not None and re.match(rf"^\s*\"?{re.escape(key)}\"?\s*=", line):
            return i
    return None


@dataclass
class ExperimentConfig:
    data: dict
    text: str = ""

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def canonical(self) -> str:
        return tomli_w.dumps(_sorted(self.data))

    @property
    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return ExperimentConfig(d, self.text)

    def ensemble(self) -> Ensemble:
        return build_ensemble(self.data["ensemble"])

    def panel(self):
        return build_panel(self.data.get("observables", {}), self.ensemble())

    def observable(self, ref) -> Observable:
        return build_observable(ref, self.ensemble())


def _sorted(x):
    if isinstance(x, dict):
        return {k: _sorted(x[k]) for k in sorted(x)}
    if isinstance(x, list):
        return [_sorted(v) for v in x]
    return x


def build_ensemble(block: dict) -> Ensemble:
    t = block["type"]
    if t == "dirac":
        return Dirac(parse_map(block["map"]))
    if t == "mixture":
        maps = [parse_map(m) for m in block["maps"]]
        w = block.get("weights")
        return FiniteMixture(tuple(maps), tuple(w)) if w else FiniteMixture.uniform(maps)
    return CoefficientBall(parse_map(block["base"]), float(block["radius"]),
                           floor=float(block.get("floor", 1e-6)),
                           reject=bool(block.get("reject", True)),
                           max_reject_fraction=float(block.get("max_reject_fraction", 0.5)),
                           max_attempts=int(block.get("max_attempts", 10000)))


def build_observable(ref, e: Optional[Ensemble] = None) -> Observable:
    """Observable from a panel name (e.g. ``"re_xy"``, ``"re_xy^2"``) or a spec table."""
    if isinstance(ref, str):
        for psi in default_panel():
            if psi.name == ref:
                return psi
        m = re.fullmatch(r"(\w+)\^2", ref)
        if m:
            return observable_from_spec({"type": "moment", "which": m.group(1), "power": 2})
        if ref.startswith("const"):
            return observable_from_spec({"type": "constant",
                                         "value": float(ref[6:-1] or 0)})
        return observable_from_spec({"type": "moment", "which": ref})
    t = ref.get("type")
    if t == "combination":
        return linear_combination([(float(term.get("coef", 1.0)),
                                    build_observable(term.get("observable", term), e))
                                   for term in ref["terms"]])
    if t == "coboundary":
        if e is None:
            raise ValueError("coboundary observable needs an ensemble")
        return coboundary(e, build_observable(ref["g0"], e))
    return observable_from_spec(ref)


def build_panel(block: dict, e: Optional[Ensemble] = None):
    panel = default_panel() if block.get("panel", "default") == "default" else []
    panel += [build_observable(x, e) for x in block.get("extra", [])]
    return panel


def _check_scalar(kind, value, lo, hi, section, key, text):
    def fail(msg):
        raise ConfigError(msg, f"{section}.{key}", _line_of(text, section, key))

    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, int):
            fail(f"expected an integer, got {value!r}")
    elif kind == FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            fail("value must be finite")
    elif kind == STR and not isinstance(value, str):
        fail(f"expected a string, got {value!r}")
    elif kind == BOOL and not isinstance(value, bool):
        fail(f"expected true/false, got {value!r}")
    elif kind == LIST and not isinstance(value, list):
        fail(f"expected an array, got {value!r}")
    if kind in (INT, FLOAT):
        if lo is not None and value < lo:
            fail(f"value {value} below minimum {lo}")
        if hi is not None and value > hi:
            fail(f"value {value} above maximum {hi}")
    return value


def _validate_ensemble(block, text):
    sec = "ensemble"
    if not isinstance(block, dict):
        raise ConfigError("missing [ensemble] table", sec, _line_of(text, sec, None))
    t = block.get("type")
    if t not in _ENSEMBLE_KEYS:
        raise ConfigError(f"ensemble type must be one of {sorted(_ENSEMBLE_KEYS)}",
                          f"{sec}.type", _line_of(text, sec, "type") or _line_of(text, sec, None))
    for k in block:
        if k not in _ENSEMBLE_KEYS[t]:
            raise ConfigError(f"unknown key for {t} ensemble", f"{sec}.{k}", _line_of(text, sec, k))

    def need(k):
        if k not in block:
            raise ConfigError(f"{t} ensemble requires {k!r}", f"{sec}.{k}",
                              _line_of(text, sec, None))
        return block[k]

    def map_ok(k, s):
        if not isinstance(s, str):
            raise ConfigError("maps are strings such as \"z^2-1\"", f"{sec}.{k}",
                              _line_of(text, sec, k))
        try:
            f = parse_map(s)
        except (ValueError, SyntaxError, TypeError) as exc:
            raise ConfigError(str(exc), f"{sec}.{k}", _line_of(text, sec, k)) from None
        return f

    if t == "dirac":
        map_ok("map", need("map"))
    elif t == "mixture":
        maps = need("maps")
        if not isinstance(maps, list) or not maps:
            raise ConfigError("maps must be a nonempty array", f"{sec}.maps",
                              _line_of(text, sec, "maps"))
        fs = [map_ok("maps", m) for m in maps]
        if len({f.d for f in fs}) != 1:
            raise ConfigError("all maps must share one degree", f"{sec}.maps",
                              _line_of(text, sec, "maps"))
        if "weights" in block:
            w = block["weights"]
            if not isinstance(w, list) or len(w) != len(maps):
                raise ConfigError("weights must be an array matching maps", f"{sec}.weights",
                                  _line_of(text, sec, "weights"))
            for x in w:
                _check_scalar(FLOAT, x, 0.0, 1.0, sec, "weights", text)
            if any(x <= 0 for x in w) or abs(sum(w) - 1) > 1e-12:
                raise ConfigError("weights must be positive and sum to 1", f"{sec}.weights",
                                  _line_of(text, sec, "weights"))
    else:
        map_ok("base", need("base"))
        _check_scalar(FLOAT, need("radius"), 0.0, 10.0, sec, "radius", text)
        if "floor" in block:
            _check_scalar(FLOAT, block["floor"], 0.0, 1.0, sec, "floor", text)
        if "reject" in block:
            _check_scalar(BOOL, block["reject"], None, None, sec, "reject", text)
        if "max_reject_fraction" in block:
            _check_scalar(FLOAT, block["max_reject_fraction"], 0.0, 1.0, sec,
                          "max_reject_fraction", text)
        if "max_attempts" in block:
            _check_scalar(INT, block["max_attempts"], 1, 10 ** 9, sec, "max_attempts", text)
    try:
        build_ensemble(block)
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(str(exc), sec, _line_of(text, sec, None)) from None
    return dict(block)


def _validate_observable(ref, section, key, text, e):
    try:
        build_observable(ref, e)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad observable: {exc}", f"{section}.{key}",
                          _line_of(text, section, key)) from None
    return ref


def _validate_list(section, key, value, text):
    def fail(msg):
        raise ConfigError(msg, f"{section}.{key}", _line_of(text, section, key))

    if key == "n_list":
        if not value or any(isinstance(v, bool) or not isinstance(v, int) or v < 0
                            for v in value):
            fail("n_list must be a nonempty array of non-negative integers")
    elif key == "points":
        if not value:
            fail("points must be nonempty")
        for v in value:
            try:
                parse_point(v)
            except (ValueError, TypeError):
                fail(f"cannot parse point {v!r}")
    elif key == "region":
        if len(value) != 4 or not all(isinstance(v, (int, float)) for v in value) \
                or value[0] >= value[1] or value[2] >= value[3]:
            fail("region must be [x0, x1, y0, y1] with x0 < x1, y0 < y1")
    elif key == "scales":
        if not value or not all(isinstance(v, (int, float)) and 0 < v < 1 for v in value):
            fail("scales must be numbers in (0, 1)")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; unspecified fields of present sections get defaults."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", None, int(m.group(1)) if m else None) from None
    for k in raw:
        if k not in _TOP_KEYS:
            raise ConfigError("unknown section or key", k, _line_of(text, k, None)
                              or _line_of(text, None, k))
    data: Dict[str, Any] = {}
    seed = raw.get("seed", 0)
    data["seed"] = _check_scalar(INT, seed, 0, 2 ** 63 - 1, None, "seed", text) \
        if "seed" in raw else 0
    data["ensemble"] = _validate_ensemble(raw.get("ensemble"), text)
    e = build_ensemble(data["ensemble"])
    obs = raw.get("observables", {})
    if not isinstance(obs, dict):
        raise ConfigError("observables must be a table", "observables",
                          _line_of(text, "observables", None))
    for k in obs:
        if k not in ("panel", "extra"):
            raise ConfigError("unknown key", f"observables.{k}", _line_of(text, "observables", k))
    if obs.get("panel", "default") not in ("default", "none"):
        raise ConfigError("panel must be \"default\" or \"none\"", "observables.panel",
                          _line_of(text, "observables", "panel"))
    for x in obs.get("extra", []):
        _validate_observable(x, "observables", "extra", text, e)
    data["observables"] = {"panel": obs.get("panel", "default"), "extra": obs.get("extra", [])}
    for sec, schema in _SCHEMA.items():
        block = raw.get(sec)
        if block is None:
            continue
        if not isinstance(block, dict):
            raise ConfigError("expected a table", sec, _line_of(text, None, sec))
        out = {}
        for k, v in block.items():
            if k not in schema:
                raise ConfigError("unknown key", f"{sec}.{k}", _line_of(text, sec, k))
        for k, (kind, default, lo, hi) in schema.items():
            if k not in block:
                if default is not None:
                    out[k] = copy.deepcopy(default)
                continue
            v = block[k]
            if kind is None:
                out[k] = _validate_observable(v, sec, k, text, e)
                continue
            v = _check_scalar(kind, v, lo, hi, sec, k, text)
            if kind == LIST:
                _validate_list(sec, k, v, text)
            out[k] = v
        for k in ("lift",):
            if k in out and out[k] not in LIFTS:
                raise ConfigError(f"lift must be one of {LIFTS}", f"{sec}.{k}",
                                  _line_of(text, sec, k))
        if "chart" in out and out["chart"] not in ("z", "w"):
            raise ConfigError("chart must be \"z\" or \"w\"", f"{sec}.chart",
                              _line_of(text, sec, "chart"))
        if "mode" in out and out["mode"] not in ("auto", "exact", "monte_carlo"):
            raise ConfigError("mode must be auto, exact or monte_carlo", f"{sec}.mode",
                              _line_of(text, sec, "mode"))
        if sec == "stationarity-test" and out["burn_in"] >= out["length"]:
            raise ConfigError("burn_in must be below length", f"{sec}.burn_in",
                              _line_of(text, sec, "burn_in"))
        if "start" in out and out["start"]:
            try:
                parse_point(out["start"])
            except (ValueError, TypeError):
                raise ConfigError(f"cannot parse point {out['start']!r}", f"{sec}.start",
                                  _line_of(text, sec, "start")) from None
        data[sec] = out
    return ExperimentConfig(data, text)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)
