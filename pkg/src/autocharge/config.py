"""Sectioned key/value configuration files.

The format is INI as read by :mod:`configparser`: one section per
subsystem, keys matching the corresponding settings dataclass fields
(see docs/config.md for the full schema).  Values are converted using
the type of each field's default; unknown sections or keys are usage
errors rather than silent typos.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .control import (OpenSettings, PerceptionSettings, ProbeSettings,
                      ServoSettings)
from .errors import InvalidConfigError, UsageError
from .policy import InsertSettings, TrainSettings
from .simworld import SceneConfig


@dataclass
class BenchSettings:
    methods: tuple = ("random", "spiral", "proposed")
    trials: int = 100
    offset: float = 0.005
    handoff: bool = False          # run the servo stage before 'proposed' trials
    handoff_offset: float = 0.5    # pre-servo position envelope, m

    def __post_init__(self):
        for m in self.methods:
            if m not in ("random", "spiral", "proposed"):
                raise UsageError(f"unknown benchmark method '{m}'")
        if self.trials < 1:
            raise UsageError("bench trials must be >= 1")


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    perception: PerceptionSettings = field(default_factory=PerceptionSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    opening: OpenSettings = field(default_factory=OpenSettings)
    servo: ServoSettings = field(default_factory=ServoSettings)
    insert: InsertSettings = field(default_factory=InsertSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)


_SECTION_TYPES = {
    "scene": SceneConfig,
    "perception": PerceptionSettings,
    "attempt": ProbeSettings,
    "open": OpenSettings,
    "servo": ServoSettings,
    "insert": InsertSettings,
    "train": TrainSettings,
    "bench": BenchSettings,
}

_PI_KEYS = {"pi_kp": "kp", "pi_ki": "ki", "pi_clamp": "integral_clamp",
            "pi_setpoint": "setpoint"}


def _convert(raw: str, example):
    if isinstance(example, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got '{raw}'")
    if isinstance(example, int):
        return int(raw)
    if isinstance(example, float):
        return float(raw)
    if isinstance(example, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if example and isinstance(example[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    if example is None:
        return float(raw)
    return raw


def _apply_section(obj, section: configparser.SectionProxy, section_name: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    pi_updates = {}
    for key, raw in section.items():
        if section_name == "insert" and key in _PI_KEYS:
            pi_updates[_PI_KEYS[key]] = float(raw)
            continue
        if key not in known:
            raise UsageError(f"unknown key '{key}' in section [{section_name}]")
        current = getattr(obj, key)
        try:
            updates[key] = _convert(raw, current)
        except (ValueError, UsageError) as exc:
            raise UsageError(f"[{section_name}] {key}: {exc}") from exc
    try:
        obj = replace(obj, **updates)
        if pi_updates:
            obj = replace(obj, pi=replace(obj.pi, **pi_updates))
    except (InvalidConfigError, UsageError, ValueError) as exc:
        raise UsageError(f"invalid [{section_name}] settings: {exc}") from exc
    return obj


def load_config(path: str | None = None) -> RunConfig:
    """Defaults, optionally overridden by an INI file."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    for section_name in parser.sections():
        if section_name not in _SECTION_TYPES:
            raise UsageError(f"unknown config section [{section_name}]")
        attr = {"attempt": "probe", "open": "opening"}.get(section_name, section_name)
        setattr(cfg, attr, _apply_section(getattr(cfg, attr),
                                          parser[section_name], section_name))
    # training episodes reuse the insertion settings
    cfg.train = replace(cfg.train, insert=cfg.insert)
    return cfg
