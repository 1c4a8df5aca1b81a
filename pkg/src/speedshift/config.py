"""Experiment configuration: a sectioned ``key = value`` text file.

Every section maps onto a dataclass; keys not declared there are fatal, so a
typo can never be silently ignored.  Values are parsed according to the type
of the field's default.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .closedloop import PipelineConfig, SearchConfig
from .expert import ExpertParams
from .learner import TrainConfig
from .sensing import SensorConfig
from .vehicle import VehicleParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrackSection:
    seed: int = 0
    length: float = 17.0
    width: float = 0.75


@dataclass(frozen=True)
class SensorSection:
    ray_count: int = 32
    fov_deg: float = 160.0
    max_range: float = 3.0
    capture_hz: float = 20.0
    noise_sigma: float = 0.005
    blur_per_speed: float = 0.0

    def build(self, stack_size: int = 1) -> SensorConfig:
        return SensorConfig(self.ray_count, math.radians(self.fov_deg), self.max_range,
                            self.capture_hz, self.noise_sigma, stack_size, self.blur_per_speed)


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    single_hidden: tuple[int, ...] = (64, 32)
    single_norm: bool = False
    single_dropout: float = 0.2
    multi_hidden: tuple[int, ...] = (128, 64)
    multi_norm: bool = True
    multi_dropout: float = 0.2

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(self.lr, self.weight_decay, self.batch_size, self.max_epochs,
                           self.patience, seed, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class PipelineSection:
    base_compute_ms: float = 24.0
    replace_on_crash: bool = True
    pipelined: bool = False
    jitter_ms: float = 0.0

    def build(self, speed: float = 1.0, added_delay_ms: float = 0.0,
              capture_hz: float = 20.0) -> PipelineConfig:
        return PipelineConfig(self.base_compute_ms, added_delay_ms, capture_hz, speed,
                              self.replace_on_crash, self.pipelined, self.jitter_ms)


@dataclass(frozen=True)
class StudySection:
    """Speed-study protocol."""

    slow_speed: float = 0.70
    fast_speed: float = 1.14
    duration_s: float = 1000.0
    clean_window_s: float = 5.0
    folds: int = 5
    periods: int = 10
    onpolicy_laps: int = 10


@dataclass(frozen=True)
class SweepSection:
    """Delay-study protocol."""

    speed: float = 2.04
    speed_jitter: float = 0.05
    duration_s: float = 2250.0
    split: str = "block"
    shifts: tuple[int, ...] = (-100, -50, 0, 50, 100, 150, 200)
    delays: tuple[int, ...] = (0, 25, 50, 75, 100)
    # (shift, delay) pairs evaluated in addition to the grid
    extra_cells: tuple[int, ...] = (0, 176, 200, 176)
    v_min: float = 0.2
    v_max: float = 3.0
    coarse_step: float = 0.05
    resolution: float = 0.01
    probe_laps: int = 5
    confirm_laps: int = 25
    confirm_seeds: int = 3

    def build_search(self) -> SearchConfig:
        return SearchConfig(self.v_min, self.v_max, self.coarse_step, self.resolution,
                            self.probe_laps, self.confirm_laps, self.confirm_seeds)

    def extra_pairs(self) -> list[tuple[int, int]]:
        if len(self.extra_cells) % 2:
            raise ConfigError("sweep.extra_cells must list (shift, delay) pairs")
        it = iter(self.extra_cells)
        return list(zip(it, it))


@dataclass(frozen=True)
class OodSection:
    k: int = 5
    metrics: tuple[str, ...] = ("euclidean", "cosine")
    max_reference: int = 4000
    max_query: int = 1000


@dataclass(frozen=True)
class GlobalSection:
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    global_: GlobalSection = field(default_factory=GlobalSection)
    track: TrackSection = field(default_factory=TrackSection)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    sensor: SensorSection = field(default_factory=SensorSection)
    expert: ExpertParams = field(default_factory=lambda: ExpertParams(base_lookahead=0.05))
    train: TrainSection = field(default_factory=TrainSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    study: StudySection = field(default_factory=StudySection)
    sweep: SweepSection = field(default_factory=SweepSection)
    ood: OodSection = field(default_factory=OodSection)

    @property
    def seed(self) -> int:
        return self.global_.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, global_=replace(self.global_, seed=int(seed)))


SECTIONS = {f.name.rstrip("_"): f.name for f in fields(ExperimentConfig)}


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(",", " ").split() if t]
            proto = default[0] if default else 0
            return tuple(_parse_value(t, proto, where) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        attr = SECTIONS[section]
        current = getattr(cfg, attr)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            values[key] = _parse_value(raw, known[key], f"{source}: [{section}] {key}")
        try:
            updates[attr] = replace(current, **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: [{section}]: {exc}") from None
    return replace(cfg, **updates)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads_config(text, str(path))


def dumps_config(cfg: ExperimentConfig) -> str:
    out = []
    for name, attr in SECTIONS.items():
        section = getattr(cfg, attr)
        out.append(f"[{name}]")
        for f in fields(section):
            out.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def sensor_for(cfg: ExperimentConfig, stack_size: int = 1) -> SensorConfig:
    return cfg.sensor.build(stack_size)
