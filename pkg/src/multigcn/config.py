"""Experiment configuration: a flat ``key = value`` file with units and sweep lists.

Example::

    # 4x4 torus, bandwidth sweep
    nodes = 16
    network_bandwidth = [150, 300, 600, 800] GB/s
    agg_buffer = 1 MB
    models = OPPE, TMM+SREM

A bracketed list turns a key into a sweep axis; the experiment runs the
cartesian product of all axes for every model. Byte units are binary
(1 KB = 1024 B) and one cycle is one nanosecond.
"""

from __future__ import annotations

import configparser
import hashlib
import itertools
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Mapping

from .engine import Model
from .errors import ConfigError
from .partition import is_power_of_two

LANES = 128

_BANDWIDTH = {"gb/s": 1, "b/cycle": 1, "tb/s": 1000, "mb/s": Fraction(1, 1000)}
BYTE_UNITS = {"b": 1, "kb": 1 << 10, "kib": 1 << 10, "mb": 1 << 20, "mib": 1 << 20, "gb": 1 << 30, "gib": 1 << 30}
_CYCLES = {"cycles": 1, "cycle": 1, "ns": 1, "us": 1000}
_OPS = {"gops": 1, "ops/cycle": 1, "tops": 1000}
_NONE = {"": 1}


@dataclass(frozen=True)
class _Key:
    default: object
    kind: str  # int | float | str | fraction | optint | models
    units: Mapping[str, object] = field(default_factory=lambda: _NONE)
    unit: str = ""
    sweep: bool = False
    check: Callable[[object], bool] | None = None
    hint: str = ""


def _pos(v) -> bool:
    return v > 0


KEYS: dict[str, _Key] = {
    "graph": _Key("rmat", "str", hint="'rmat' or an edge-list path"),
    "graph_format": _Key("text", "str", check=lambda v: v in ("text", "binary"), hint="text or binary"),
    "vertex_scale": _Key(12, "int", sweep=True, check=lambda v: 1 <= v <= 30, hint="1..30"),
    "avg_degree": _Key(32, "int", check=_pos, hint="positive"),
    "rmat_probs": _Key("0.57,0.19,0.19,0.05", "str"),
    "models": _Key(tuple(m.value for m in Model), "models"),
    "nodes": _Key(16, "int", sweep=True, check=lambda v: is_power_of_two(v) and v <= 1024,
                  hint="a power of two up to 1024"),
    "network_bandwidth": _Key(600, "float", _BANDWIDTH, "GB/s", True, _pos, "positive"),
    "dram_bandwidth": _Key(256, "float", _BANDWIDTH, "GB/s", True, _pos, "positive"),
    "link_latency": _Key(500, "int", _CYCLES, "cycles", True, lambda v: v >= 0, "non-negative"),
    "peak_ops": _Key(2048, "int", _OPS, "GOPS", True, lambda v: v > 0 and v % (2 * LANES) == 0,
                     f"a positive multiple of {2 * LANES}"),
    "routing_buffer": _Key(3 << 19, "int", BYTE_UNITS, "B", True, _pos, "positive"),
    "agg_buffer": _Key(1 << 20, "int", BYTE_UNITS, "B", True, _pos, "positive"),
    "dram_latency": _Key(100, "int", _CYCLES, "cycles", False, lambda v: v >= 0, "non-negative"),
    "rounds_override": _Key(None, "optint", sweep=True, check=lambda v: v is None or v >= 1, hint=">= 1"),
    "feature_len": _Key(512, "int", sweep=True, check=_pos, hint="positive"),
    "feature_len_out": _Key(128, "int", check=_pos, hint="positive"),
    "layers": _Key(1, "int", check=_pos, hint="positive"),
    "alpha": _Key(0.75, "float", check=lambda v: 0 < v <= 1, hint="in (0, 1]"),
    "max_packet_neighbors": _Key(1024, "int", check=_pos, hint="positive"),
    "repetitions": _Key(1, "int", check=_pos, hint="positive"),
    "sample_fraction": _Key(Fraction(1), "fraction", check=lambda v: 0 < v <= 1, hint="in (0, 1]"),
    "seed": _Key(0, "int", check=lambda v: 0 <= v < 1 << 64, hint="a u64"),
    "output": _Key("results.csv", "str"),
}

ALIASES = {"num_nodes": "nodes", "model": "models", "rmat_scale": "vertex_scale", "feature_len_in": "feature_len"}

SWEEP_AXES = tuple(k for k, spec in KEYS.items() if spec.sweep)


@dataclass(frozen=True)
class ExperimentSpec:
    values: dict

    def __getattr__(self, name: str):
        values = self.__dict__.get("values")
        if values is None or name not in values:
            raise AttributeError(name)
        return values[name]

    @property
    def axes(self) -> list[str]:
        return [k for k in SWEEP_AXES if len(self.values[k]) > 1]

    def points(self) -> Iterator[dict]:
        """Cartesian product of sweep axes; each point maps every axis to one value."""
        fixed = {k: v for k, v in self.values.items() if k not in SWEEP_AXES}
        for combo in itertools.product(*(self.values[k] for k in SWEEP_AXES)):
            yield {**fixed, **dict(zip(SWEEP_AXES, combo))}

    def num_runs(self) -> int:
        n = len(self.values["models"]) * self.values["repetitions"]
        for k in SWEEP_AXES:
            n *= len(self.values[k])
        return n

    def to_text(self) -> str:
        lines = []
        for k, spec in KEYS.items():
            v = self.values[k]
            if spec.kind == "models":
                lines.append(f"{k} = {', '.join(v)}")
            elif spec.sweep:
                body = ", ".join(_show(x) for x in v)
                text = f"[{body}]" if len(v) > 1 else body
                lines.append(f"{k} = {text} {spec.unit}".rstrip())
            else:
                lines.append(f"{k} = {_show(v)} {spec.unit}".rstrip())
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def with_values(self, **changes) -> ExperimentSpec:
        vals = dict(self.values)
        for k, v in changes.items():
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}", key=k)
            vals[k] = tuple(v) if KEYS[k].sweep and isinstance(v, (list, tuple)) else v
        return ExperimentSpec(vals)


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


_NUM_UNIT = re.compile(r"^\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?(?:/[0-9]+)?)\s*([A-Za-z/]*)\s*$")


def _number(key: str, raw: str, spec: _Key, unit_override: str | None) -> object:
    raw = raw.strip()
    if spec.kind == "optint" and raw.lower() in ("none", ""):
        return None
    m = _NUM_UNIT.match(raw)
    if not m:
        raise ConfigError(f"cannot parse {raw!r} as a number", key=key)
    num, unit = m.group(1), (m.group(2) or unit_override or "").lower()
    if unit and unit not in spec.units:
        raise ConfigError(f"unknown unit {unit!r} (expected one of {', '.join(u for u in spec.units if u)})",
                          key=key)
    scale = spec.units.get(unit, 1) if unit else 1
    try:
        value = Fraction(num) * Fraction(scale)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse {raw!r} as a number", key=key) from None
    if spec.kind in ("int", "optint"):
        if value.denominator != 1:
            raise ConfigError(f"{raw!r} is not a whole number", key=key)
        return int(value)
    if spec.kind == "fraction":
        return value
    return float(value)


def _split_list(key: str, raw: str) -> tuple[list[str], str | None]:
    raw = raw.strip()
    if not raw.startswith("["):
        return [raw], None
    close = raw.find("]")
    if close < 0:
        raise ConfigError("unterminated sweep list", key=key)
    items = [s.strip() for s in raw[1:close].split(",")]
    if not items or any(not s for s in items):
        raise ConfigError("empty entry in sweep list", key=key)
    return items, raw[close + 1:].strip() or None


def _convert(key: str, raw: str):
    spec = KEYS[key]
    if spec.kind == "models":
        names = [s for s in re.split(r"[,\s]+", raw.strip().strip("[]")) if s]
        if not names:
            raise ConfigError("no models listed", key=key)
        return tuple(Model.parse(n).value for n in names)
    if spec.kind == "str":
        value = raw.strip()
        if spec.check and not spec.check(value):
            raise ConfigError(f"invalid value {value!r}: expected {spec.hint}", key=key)
        return value
    items, unit = _split_list(key, raw)
    if len(items) > 1 and not spec.sweep:
        raise ConfigError("this key cannot be swept", key=key)
    values = tuple(_number(key, it, spec, unit) for it in items)
    for v in values:
        if spec.check and not spec.check(v):
            raise ConfigError(f"value {_show(v)} out of range: expected {spec.hint}", key=key)
    return values if spec.sweep else values[0]


def defaults() -> dict:
    return {k: ((spec.default,) if spec.sweep else spec.default) for k, spec in KEYS.items()}


def parse_config(text: str, env: Mapping[str, str] | None = None) -> ExperimentSpec:
    """Parse configuration text; unset keys take the default system parameters."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       comment_prefixes=("#", ";"), delimiters=("=",))
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("key given twice", key=exc.option) from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc.message.splitlines()[0]}") from None
    values = defaults()
    for raw_key, raw in parser.items("experiment"):
        key = ALIASES.get(raw_key, raw_key)
        if key not in KEYS:
            raise ConfigError(f"unknown key {raw_key!r}", key=raw_key)
        values[key] = _convert(key, raw)
    _check_probs(values["rmat_probs"])
    env = os.environ if env is None else env
    if env.get("MULTIGCN_SEED"):
        try:
            seed = int(env["MULTIGCN_SEED"])
        except ValueError:
            raise ConfigError("MULTIGCN_SEED must be an integer", key="seed") from None
        if not KEYS["seed"].check(seed):
            raise ConfigError("MULTIGCN_SEED out of range", key="seed")
        values["seed"] = seed
    return ExperimentSpec(values)


def load_config(path: str, env: Mapping[str, str] | None = None) -> ExperimentSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), env)


def rmat_probs(text: str) -> tuple[float, float, float, float]:
    return _check_probs(text)


def _check_probs(text: str) -> tuple[float, float, float, float]:
    try:
        probs = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse {text!r}", key="rmat_probs") from None
    if len(probs) != 4 or any(p < 0 for p in probs):
        raise ConfigError("expected four non-negative probabilities", key="rmat_probs")
    return probs  # graph.generate_rmat checks the sum
