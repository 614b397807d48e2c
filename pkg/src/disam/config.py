"""Flat ``key = value`` run configuration.

Keys are the field names of NetworkConfig, LossWeights and TrainSchedule
(``seed`` feeds both the network and the schedule).  Blank lines and ``#``
comments are ignored.  Precedence: defaults < config file < command line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import FlagConflict, InvalidConfig, ValidationError
from .losses import LossWeights
from .network import NetworkConfig
from .trainer import TrainSchedule

SECTIONS = {"network": NetworkConfig, "weights": LossWeights, "schedule": TrainSchedule}


def _field_types():
    out = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            out.setdefault(f.name, []).append((section, f))
    return out


FIELDS = _field_types()


def _convert(default, text):
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.split(","))
    if isinstance(default, bool):
        flag = text.strip().lower()
        if flag not in ("1", "true", "yes", "0", "false", "no"):
            raise ValueError(text)
        return flag in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into a ``{key: raw string}`` dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValidationError(f"{source}:{lineno}: expected key = value")
        if key not in FIELDS:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise FlagConflict(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    weights: LossWeights
    schedule: TrainSchedule

    def items(self):
        seen = set()
        for section in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                if k in seen:
                    continue
                seen.add(k)
                if isinstance(v, (tuple, list)):
                    v = ",".join(repr(float(x)) for x in v)
                yield k, v

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def build_run_config(file_values=None, overrides=None) -> RunConfig:
    """Merge defaults, config-file values and flag overrides (all raw strings or values)."""
    merged = dict(file_values or {})
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    kwargs = {s: {} for s in SECTIONS}
    for key, raw in merged.items():
        if key not in FIELDS:
            raise ValidationError(f"unknown configuration key {key!r}")
        for section, f in FIELDS[key]:
            default = f.default
            try:
                kwargs[section][key] = _convert(default, raw) if isinstance(raw, str) else raw
            except ValueError:
                raise ValidationError(f"bad value for {key}: {raw!r}") from None
    try:
        return RunConfig(**{s: SECTIONS[s](**kwargs[s]) for s in SECTIONS})
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None


def load_run_config(path=None, overrides=None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    return build_run_config(values, overrides)
