"""Per-command run configuration.

Config files are INI-style ``key = value`` text with one section per command::

    [adapt]
    checkpoint = runs/pre/pretrained.ckpt
    method = glt
    rank-ratio = 0.0625
    gate-init = 0.6

Every key is typed and range-checked when the file is read; unknown keys are
an error.  ``resolve`` returns the fully defaulted mapping and ``dumps``
writes it back in the same format, so an echoed config re-runs identically.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .backbone import STAGES, TOY_PLAN
from .errors import ConfigError
from .harness.methods import ALIASES, METHODS

REQUIRED = object()


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, ints, floats, stages
    default: Any = REQUIRED
    check: Callable[[Any], str | None] | None = None


def _positive(v):
    return None if v > 0 else "must be > 0"


def _non_negative(v):
    return None if v >= 0 else "must be >= 0"


def _unit_open(v):
    return None if 0.0 < v < 1.0 else "must lie strictly in (0, 1)"


def _ratio(v):
    return None if 0.0 < v <= 1.0 else "must lie in (0, 1]"


def _unit_closed(v):
    return None if 0.0 <= v <= 1.0 else "must lie in [0, 1]"


def _size(v):
    return None if v >= 32 and v % 32 == 0 else "must be a positive multiple of 32"


def _plan(v):
    if len(v) != len(STAGES) or min(v) < 1:
        return f"needs {len(STAGES)} positive channel counts"
    return None


def _split(v):
    if len(v) != 3 or min(v) < 0 or abs(sum(v) - 1.0) > 1e-9:
        return "needs three non-negative fractions summing to 1"
    return None


def _each(check):
    def run(values):
        if not values:
            return "must not be empty"
        for x in values:
            msg = check(x)
            if msg:
                return f"entry {x}: {msg}"
        return None

    return run


def _method(v):
    return None if v in METHODS or v in ALIASES else f"unknown method; expected one of {sorted(METHODS)}"


_SEED = Key("int", 1000, _non_negative)
_OUT = Key("str")
_TRAIN = {
    "seed": _SEED,
    "batch-size": Key("int", 2, _positive),
    "weight-decay": Key("float", 1e-5, _non_negative),
    "input-size": Key("int", 32, _size),
    "output-dir": _OUT,
}
_DATA = {
    "dataset": Key("str", ""),
    "difficulty": Key("float", 0.15, _unit_closed),
}
_ADAPT = {
    **_TRAIN,
    **_DATA,
    "checkpoint": Key("str"),
    "epochs": Key("int", 20, _non_negative),
    "lr": Key("float", 1e-3, _positive),
    "method": Key("str", "glt", _method),
    "stages": Key("stages", ()),
    "rank-ratio": Key("float", 0.0625, _ratio),
    "gate-init": Key("float", 0.6, _unit_open),
    "lora-rank": Key("int", 4, _positive),
    "n-subjects": Key("int", 307, lambda v: None if v >= 10 else "must be >= 10"),
    "split": Key("floats", (0.3, 0.3, 0.4), _split),
    "data-seed": Key("int", 11, _non_negative),
    "channel-plan": Key("ints", ()),
}

SCHEMA: dict[str, dict[str, Key]] = {
    "gen-data": {
        "seed": Key("int", 11, _non_negative),
        "n-subjects": Key("int", 307, lambda v: None if v >= 10 else "must be >= 10"),
        "split": Key("floats", (0.3, 0.3, 0.4), _split),
        "difficulty": Key("float", 0.15, _unit_closed),
        "input-size": Key("int", 32, _size),
        "output-dir": _OUT,
    },
    "pretrain": {
        **_TRAIN,
        "dataset": Key("str", ""),
        "epochs": Key("int", 8, _non_negative),
        "lr": Key("float", 1e-3, _positive),
        "weight-decay": Key("float", 2e-5, _non_negative),
        "channel-plan": Key("ints", TOY_PLAN, _plan),
        "n-volumes": Key("int", 40, lambda v: None if v >= 10 else "must be >= 10"),
        "val-fraction": Key("float", 0.3, _unit_open),
        "difficulty": Key("float", 0.0, _unit_closed),
        "data-seed": Key("int", 7, _non_negative),
    },
    "adapt": _ADAPT,
    "sweep": {
        **_ADAPT,
        "ratios": Key("floats", (0.125, 0.0625, 0.03125), _each(_ratio)),
        "gates": Key("floats", (0.2, 0.4, 0.6, 0.8), _each(_unit_open)),
    },
    "diagnose": {
        "model": Key("str"),
        "base": Key("str"),
        "output-dir": Key("str", ""),
    },
}


def _parse(kind: str, text: str):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "str":
        return text
    items = [t for t in text.replace(",", " ").split()]
    if kind == "ints":
        return tuple(int(t) for t in items)
    if kind == "floats":
        return tuple(float(t) for t in items)
    if kind == "stages":
        bad = [t for t in items if t not in STAGES]
        if bad:
            raise ValueError(f"unknown stage(s) {bad}; expected names from {list(STAGES)}")
        return tuple(items)
    raise AssertionError(kind)


def _format(kind: str, value) -> str:
    if kind in ("ints", "floats", "stages"):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if kind == "float":
        return repr(value)
    return str(value)


def read_file(path, command: str) -> dict[str, str]:
    """Raw strings from ``[command]`` of an INI file (other sections ignored)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    return dict(parser[command]) if parser.has_section(command) else {}


def resolve(command: str, raw: dict[str, str]) -> dict[str, Any]:
    """Typed, validated, fully defaulted config for ``command``."""
    if command not in SCHEMA:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMA[command]
    unknown = sorted(k for k in raw if k not in schema)
    if unknown:
        raise ConfigError(f"unknown key(s) for [{command}]: {', '.join(unknown)}")
    out = {}
    for name, key in schema.items():
        if name not in raw or raw[name] is None:
            if key.default is REQUIRED:
                raise ConfigError(f"missing required key '{name}' for [{command}]")
            out[name] = key.default
            continue
        try:
            value = _parse(key.kind, str(raw[name]))
        except ValueError as exc:
            raise ConfigError(f"bad value for '{name}': {raw[name]!r} ({exc})") from None
        msg = key.check(value) if key.check else None
        if msg:
            raise ConfigError(f"bad value for '{name}': {raw[name]!r} {msg}")
        out[name] = value
    return out


def dumps(command: str, cfg: dict[str, Any]) -> str:
    schema = SCHEMA[command]
    lines = [f"[{command}]"]
    lines += [f"{name} = {_format(schema[name].kind, cfg[name])}" for name in schema]
    return "\n".join(lines) + "\n"


def write(path, command: str, cfg: dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(dumps(command, cfg))
    return path
