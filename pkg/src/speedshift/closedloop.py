"""On-policy evaluation: deployment with compute delay, cross-speed tables,
fastest-safe-lap search and the delay x label-shift sweep."""

from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .sensing import SensorConfig
from .simulation import Driver, RunResult, simulate
from .track import Track
from .vehicle import VehicleParams

UNBOUNDED = math.inf
STANDARD_DELAYS_MS = (0, 25, 50, 75, 100)


@dataclass(frozen=True)
class PipelineConfig:
    base_compute_ms: float = 24.0
    added_delay_ms: float = 0.0
    capture_hz: float = 20.0
    speed_setpoint: float = 1.0
    replace_on_crash: bool = True
    pipelined: bool = False
    jitter_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.total_compute_ms < 0:
            raise ValueError("total compute delay must be non-negative")
        if self.speed_setpoint <= 0:
            raise ValueError("speed_setpoint must be positive")

    @property
    def total_compute_ms(self) -> float:
        return self.base_compute_ms + self.added_delay_ms

    @property
    def decision_period(self) -> float:
        """Seconds between decisions in the sequential pipeline."""
        if self.pipelined:
            return 1.0 / self.capture_hz
        return max(1.0 / self.capture_hz, self.total_compute_ms / 1000.0)

    def with_(self, **kw) -> "PipelineConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class LapReport:
    laps_attempted: int
    laps_completed: int
    infractions: int
    infraction_sites: list[tuple[float, str, str | None]]
    lap_times: list[float]
    lap_clean: list[bool]
    mean_spatial_belatedness: float
    sim_time: float
    decisions: int = 0
    trace: list[dict] = field(default_factory=list)

    @property
    def successful_lap_times(self) -> list[float]:
        return [t for t, ok in zip(self.lap_times, self.lap_clean) if ok]

    def wall_counts(self, turn_only: bool = True) -> dict[str, int]:
        counts = {"inside": 0, "outside": 0}
        for _, wall, turn in self.infraction_sites:
            if turn_only and turn is None:
                continue
            counts[wall] = counts.get(wall, 0) + 1
        return counts


def _check_dims(policy, sensor: SensorConfig) -> None:
    spec = getattr(policy, "spec", None)
    if spec is None:
        return
    expected = sensor.ray_count * spec.stack_size
    if spec.input_dim != expected:
        raise ValueError(f"policy expects {spec.input_dim} inputs, sensor gives {expected}")


def _sensor_for(policy, sensor: SensorConfig) -> SensorConfig:
    from dataclasses import replace

    k = getattr(policy, "stack_size", 1)
    return sensor if sensor.stack_size == k else replace(sensor, stack_size=k)


def report_from(result: RunResult, trace: bool = False) -> LapReport:
    sites = [(i.s, i.wall, i.turn_direction) for i in result.infractions]
    if result.decisions:
        belated = float(np.mean([d.delay * d.speed for d in result.decisions]))
    else:
        belated = 0.0
    rows = []
    if trace:
        for c in result.captures:
            rows.append({"t": c.t, "x": c.x, "y": c.y, "heading": c.heading, "s": c.s,
                         "speed": c.speed, "steer_cmd": c.command, "steer_actual": c.steer_actual,
                         "frame_age_ms": c.frame_age_ms})
    return LapReport(result.laps_attempted, result.laps_completed, len(result.infractions), sites,
                     list(result.lap_times), list(result.lap_clean), belated, result.sim_time,
                     len(result.decisions), rows)


def run_laps(track: Track, vehicle: VehicleParams, policy: Driver, pipeline: PipelineConfig,
             n_laps: int, seed: int, sensor: SensorConfig | None = None,
             stop_on_infraction: bool = False, trace: bool = False) -> LapReport:
    """Deploy ``policy`` for ``n_laps`` laps behind the configured compute pipeline."""
    if n_laps < 1:
        raise ValueError("n_laps must be at least 1")
    sensor = _sensor_for(policy, sensor or SensorConfig(capture_hz=pipeline.capture_hz))
    _check_dims(policy, sensor)
    res = simulate(track, vehicle, policy, sensor, speed=pipeline.speed_setpoint, n_laps=n_laps,
                   seed=seed, compute_ms=pipeline.total_compute_ms,
                   stop_on_infraction=stop_on_infraction or not pipeline.replace_on_crash,
                   replace_on_crash=pipeline.replace_on_crash, record=trace,
                   pipelined=pipeline.pipelined, jitter_ms=pipeline.jitter_ms)
    return report_from(res, trace)


def write_trace(report: LapReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in report.trace:
            fh.write(json.dumps(row) + "\n")


# --- cross-speed evaluation ----------------------------------------------

@dataclass
class CrossSpeedCell:
    model: str
    trained_speed: str
    deploy_speed: str
    infractions: int
    laps: int
    inside: int
    outside: int
    seed: int
    model_hash: str = ""

    @property
    def per_10_laps(self) -> float:
        return 10.0 * self.infractions / max(self.laps, 1)


def cross_speed_eval(track: Track, vehicle: VehicleParams, policies: dict[tuple[str, str], Driver],
                     speeds: dict[str, float], pipeline: PipelineConfig, seed: int,
                     n_laps: int = 10, sensor: SensorConfig | None = None) -> list[CrossSpeedCell]:
    """Infractions of every (architecture, trained speed) policy at every deployment speed.

    ``policies`` maps (architecture, trained-speed name) to a policy;
    ``speeds`` maps speed names to setpoints.
    """
    cells = []
    for (arch, trained), policy in sorted(policies.items()):
        for name, v in speeds.items():
            rep = run_laps(track, vehicle, policy, pipeline.with_(speed_setpoint=v), n_laps, seed,
                           sensor)
            walls = rep.wall_counts()
            cells.append(CrossSpeedCell(arch, trained, name, rep.infractions, n_laps,
                                        walls["inside"], walls["outside"], seed,
                                        getattr(policy, "content_hash", lambda: "")()))
    return cells


def write_crossspeed_csv(cells: list[CrossSpeedCell], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "trained_speed", "deploy_speed", "seed", "laps", "infractions",
                    "inside", "outside", "model_hash"])
        for c in cells:
            w.writerow([c.model, c.trained_speed, c.deploy_speed, c.seed, c.laps, c.infractions,
                        c.inside, c.outside, c.model_hash])


# --- fastest safe lap -----------------------------------------------------

@dataclass(frozen=True)
class SafeLap:
    speed: float
    lap_time: float

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lap_time)


NO_SAFE_LAP = SafeLap(0.0, UNBOUNDED)


@dataclass(frozen=True)
class SearchConfig:
    v_min: float = 0.2
    v_max: float = 3.0
    coarse_step: float = 0.05
    resolution: float = 0.01
    probe_laps: int = 5
    confirm_laps: int = 25
    confirm_seeds: int = 3
    max_confirm_infractions: int = 1


def fastest_safe_lap(track: Track, vehicle: VehicleParams, policy: Driver,
                     pipeline: PipelineConfig, seed: int, search: SearchConfig = SearchConfig(),
                     sensor: SensorConfig | None = None) -> SafeLap:
    """Highest setpoint the policy sustains, with its mean successful lap time.

    Probes ascend in ``coarse_step`` increments until a probe run records an
    infraction, then bisect down to ``resolution``.  The candidate must pass
    ``confirm_laps`` laps with at most ``max_confirm_infractions`` infractions
    (median over ``confirm_seeds`` seeds); otherwise the search steps down by
    the coarse step and confirms again.
    """
    def probe(v: float) -> bool:
        rep = run_laps(track, vehicle, policy, pipeline.with_(speed_setpoint=v), search.probe_laps,
                       seed, sensor, stop_on_infraction=True)
        return rep.infractions == 0

    n_coarse = int(math.floor((search.v_max - search.v_min) / search.coarse_step + 1e-9))
    last_safe, first_fail = None, None
    for i in range(n_coarse + 1):
        v = round(search.v_min + i * search.coarse_step, 9)
        if probe(v):
            last_safe = v
        else:
            first_fail = v
            break
    if last_safe is None:
        return NO_SAFE_LAP
    if first_fail is not None:
        lo, hi = last_safe, first_fail
        while hi - lo > search.resolution + 1e-9:
            mid = round((lo + hi) / 2.0, 9)
            if probe(mid):
                lo = mid
            else:
                hi = mid
        last_safe = lo

    candidate = last_safe
    while candidate >= search.v_min - 1e-9:
        reports = [run_laps(track, vehicle, policy, pipeline.with_(speed_setpoint=candidate),
                            search.confirm_laps, seed + 1000 * (j + 1), sensor)
                   for j in range(search.confirm_seeds)]
        if statistics.median(r.infractions for r in reports) <= search.max_confirm_infractions:
            laps = [t for r in reports for t in r.successful_lap_times]
            if laps:
                return SafeLap(candidate, float(np.mean(laps)))
        candidate = round(candidate - search.coarse_step, 9)
    return NO_SAFE_LAP


# --- delay x shift sweep --------------------------------------------------

@dataclass(frozen=True)
class SweepCell:
    shift_ms: int
    added_delay_ms: int
    fastest_safe_lap_s: float
    speed: float
    passes_task: bool
    model_hash: str = ""


@dataclass
class SweepReport:
    cells: list[SweepCell]
    threshold_s: float
    base_compute_ms: float

    def cell(self, shift_ms: int, added_delay_ms: int) -> SweepCell:
        for c in self.cells:
            if c.shift_ms == shift_ms and c.added_delay_ms == added_delay_ms:
                return c
        raise KeyError((shift_ms, added_delay_ms))

    def shifts(self) -> list[int]:
        return sorted({c.shift_ms for c in self.cells})

    def delays(self) -> list[int]:
        return sorted({c.added_delay_ms for c in self.cells})


def _sweep_job(args):
    track, vehicle, policy, pipeline, seed, search, sensor, shift, delay = args
    res = fastest_safe_lap(track, vehicle, policy, pipeline.with_(added_delay_ms=delay), seed,
                           search, sensor)
    return shift, delay, res, policy.content_hash() if hasattr(policy, "content_hash") else ""


def run_sweep(track: Track, vehicle: VehicleParams, models: dict[int, Driver],
              delays: list[int], pipeline: PipelineConfig, threshold_s: float, seed: int,
              search: SearchConfig = SearchConfig(), sensor: SensorConfig | None = None,
              jobs: int = 1, extra_cells: list[tuple[int, int]] = ()) -> SweepReport:
    """Fastest safe lap for every (shift model, added delay) pair.

    A cell passes the task when its lap time is within ``threshold_s``.
    ``extra_cells`` adds (shift, delay) pairs outside the grid.
    """
    pairs = [(s, d) for s in sorted(models) for d in delays]
    pairs += [p for p in extra_cells if p not in pairs]
    args = [(track, vehicle, models[s], pipeline, seed, search, sensor, s, d) for s, d in pairs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, args))
    else:
        results = [_sweep_job(a) for a in args]
    cells = [SweepCell(s, d, r.lap_time, r.speed, bool(r.bounded and r.lap_time <= threshold_s), h)
             for s, d, r, h in results]
    return SweepReport(cells, threshold_s, pipeline.base_compute_ms)


def write_sweep_csv(report: SweepReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["shift_ms", "added_delay_ms", "total_compute_ms", "fastest_lap_s", "speed",
                    "passes_task", "model_hash"])
        for c in sorted(report.cells, key=lambda c: (c.shift_ms, c.added_delay_ms)):
            lap = "inf" if not math.isfinite(c.fastest_safe_lap_s) else f"{c.fastest_safe_lap_s:.4f}"
            w.writerow([c.shift_ms, c.added_delay_ms, f"{report.base_compute_ms + c.added_delay_ms:g}",
                        lap, f"{c.speed:.4f}", int(c.passes_task), c.model_hash])


def read_sweep_csv(path: str | Path, threshold_s: float = math.nan,
                   base_compute_ms: float = 24.0) -> SweepReport:
    cells = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cells.append(SweepCell(int(row["shift_ms"]), int(row["added_delay_ms"]),
                                   float(row["fastest_lap_s"]), float(row["speed"]),
                                   row["passes_task"] == "1", row.get("model_hash", "")))
    return SweepReport(cells, threshold_s, base_compute_ms)


class ThresholdPolicy:
    """Expert that deliberately steers into the wall above a speed: a search oracle."""

    stack_size = 1

    def __init__(self, inner: Driver, max_speed: float):
        self.inner = inner
        self.max_speed = max_speed

    def act(self, observation, pose) -> float:
        if pose.speed > self.max_speed + 1e-9:
            return 1.0
        return self.inner.act(observation, pose)


def constant_policy(value: float) -> Callable:
    class _Const:
        stack_size = 1

        def act(self, observation, pose) -> float:
            return value

    return _Const()
