"""INI experiment configuration.

Three sections, all optional, unknown keys rejected:

    [experiment]  scenarios, methods, speeds, seeds, outdir, workers
    [planner]     any numeric field of PlannerConfig, plus method scales
    [episode]     max_ticks, sensor_range, v_cap, r_coll, safety

Lists are comma separated.  Missing sections and keys fall back to the
library defaults, so an empty file is a valid configuration.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from apcm.controller import METHODS, PlannerConfig
from apcm.scenario import FAMILIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSettings:
    max_ticks: int = 600
    sensor_range: float = 30.0
    v_cap: float = 10.0
    r_coll: float = 1.0
    safety: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple = ("single_car",)
    methods: tuple = ("proposed", "higgins", "andersen", "none", "nominal")
    speeds: tuple = (7.5,)
    seeds: tuple = (0, 1, 2)
    outdir: str = "results"
    workers: int | None = None
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    episode: EpisodeSettings = field(default_factory=EpisodeSettings)


def _split(raw: str) -> list:
    return [item.strip() for item in raw.split(",") if item.strip()]


_PLANNER_FIELDS = {
    f.name: f.type for f in dataclasses.fields(PlannerConfig)
    if f.name not in ("q", "qf", "r", "vehicle", "method")
}


def _parse_planner(section) -> PlannerConfig:
    overrides = {}
    for key in section:
        if key not in _PLANNER_FIELDS:
            raise ConfigError(f"unknown [planner] key {key!r}")
        try:
            if key in ("horizon", "samples"):
                overrides[key] = int(section[key])
            else:
                overrides[key] = float(section[key])
        except ValueError as exc:
            raise ConfigError(f"bad [planner] value for {key!r}") from exc
    return replace(PlannerConfig(), **overrides)


def _parse_episode(section) -> EpisodeSettings:
    known = {f.name for f in dataclasses.fields(EpisodeSettings)}
    overrides = {}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown [episode] key {key!r}")
        try:
            if key == "max_ticks":
                overrides[key] = int(section[key])
            elif key == "safety":
                overrides[key] = section.getboolean(key)
            else:
                overrides[key] = float(section[key])
        except ValueError as exc:
            raise ConfigError(f"bad [episode] value for {key!r}") from exc
    return EpisodeSettings(**overrides)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    known_sections = {"experiment", "planner", "episode"}
    extra = set(parser.sections()) - known_sections
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")

    kwargs = {}
    if parser.has_section("experiment"):
        sec = parser["experiment"]
        known = {"scenarios", "methods", "speeds", "seeds", "outdir", "workers"}
        unknown = set(sec) - known
        if unknown:
            raise ConfigError(f"unknown [experiment] keys: {sorted(unknown)}")
        try:
            if "scenarios" in sec:
                kwargs["scenarios"] = tuple(_split(sec["scenarios"]))
            if "methods" in sec:
                kwargs["methods"] = tuple(_split(sec["methods"]))
            if "speeds" in sec:
                kwargs["speeds"] = tuple(float(v) for v in _split(sec["speeds"]))
            if "seeds" in sec:
                kwargs["seeds"] = tuple(int(v) for v in _split(sec["seeds"]))
            if "outdir" in sec:
                kwargs["outdir"] = sec["outdir"]
            if "workers" in sec:
                kwargs["workers"] = int(sec["workers"])
        except ValueError as exc:
            raise ConfigError(f"bad [experiment] value: {exc}") from exc
    if parser.has_section("planner"):
        kwargs["planner"] = _parse_planner(parser["planner"])
    if parser.has_section("episode"):
        kwargs["episode"] = _parse_episode(parser["episode"])

    cfg = ExperimentConfig(**kwargs)
    for name in cfg.scenarios:
        if name not in FAMILIES:
            raise ConfigError(f"unknown scenario {name!r}, pick from {FAMILIES}")
    for name in cfg.methods:
        if name not in METHODS:
            raise ConfigError(f"unknown method {name!r}, pick from {METHODS}")
    if not cfg.speeds or not cfg.seeds:
        raise ConfigError("speeds and seeds must be non-empty")
    if any(v <= 0 for v in cfg.speeds):
        raise ConfigError("speeds must be positive")
    return cfg
