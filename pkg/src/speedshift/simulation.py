"""Fixed-step closed-loop driving engine.

One loop serves both data collection (expert acting on every fresh frame)
and deployment (a policy behind a sequential compute pipeline).  Time is
kept in integer microseconds so event ordering never depends on float drift.

Pipeline semantics (sequential, the default): the driver takes the most
recent frame, holds its output for ``compute_ms``, actuates, then immediately
takes the most recent frame again, waiting for a new one if it has already
used the newest.  The decision period is therefore
``max(1 / capture_hz, compute)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .sensing import FrameBuffer, Observation, SensorConfig, capture
from .track import Track, collides, lap_progress, locate
from .vehicle import DEFAULT_DT, VehicleParams, VehicleState, set_steering, step

US = 1_000_000


class DriverStop(RuntimeError):
    """Raised by a driver to end the run early; the message is kept as the stop reason."""


class Driver(Protocol):
    stack_size: int

    def act(self, observation: Observation, pose: VehicleState) -> float: ...


@dataclass
class Decision:
    frame_time: float
    actuation_time: float
    command: float
    speed: float

    @property
    def delay(self) -> float:
        return self.actuation_time - self.frame_time


@dataclass
class Infraction:
    t: float
    s: float
    wall: str
    side: str
    turn_direction: str | None


@dataclass
class CaptureRecord:
    t: float
    frame: np.ndarray
    command: float | None
    speed: float
    lap: int
    s: float
    x: float
    y: float
    heading: float
    steer_actual: float
    perturbed: bool
    frame_age_ms: float | None = None


@dataclass
class RunResult:
    laps_completed: int = 0
    laps_attempted: int = 0
    lap_times: list[float] = field(default_factory=list)
    lap_clean: list[bool] = field(default_factory=list)
    infractions: list[Infraction] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list)
    captures: list[CaptureRecord] = field(default_factory=list)
    sim_time: float = 0.0
    progress: float = 0.0
    stopped: str = "laps"

    @property
    def successful_lap_times(self) -> list[float]:
        return [t for t, ok in zip(self.lap_times, self.lap_clean) if ok]


@dataclass(frozen=True)
class Perturbation:
    """Random lateral displacement injected while recording."""

    rate_hz: float
    sigma: float
    mask_s: float = 0.25


def start_state(track: Track, s: float, speed: float) -> VehicleState:
    p = track.point_at(s)
    return VehicleState(x=float(p[0]), y=float(p[1]), heading=track.heading_at(s),
                        speed=speed, setpoint=speed)


def simulate(track: Track, vehicle: VehicleParams, driver: Driver, sensor: SensorConfig, *,
             speed: float | Callable[[int], float], n_laps: int, seed: int,
             compute_ms: float = 0.0, max_time: float | None = None,
             dt: float = DEFAULT_DT, start_s: float = 0.01,
             stop_on_infraction: bool = False, replace_on_crash: bool = True,
             perturbation: Perturbation | None = None, record: bool = False,
             pipelined: bool = False, jitter_ms: float = 0.0) -> RunResult:
    """Drive ``n_laps`` laps and report what happened.

    ``speed`` is either a constant setpoint or a function of the lap index,
    which is how per-lap speed variability is modeled during recording.
    """
    rng = np.random.default_rng(seed)
    speed_of = speed if callable(speed) else (lambda lap, v=float(speed): v)
    v0 = speed_of(0)
    if v0 <= 0:
        raise ValueError("speed setpoint must be positive")
    if max_time is None:
        max_time = 5.0 * n_laps * track.total_length / v0

    dt_us = int(round(dt * US))
    frame_us = int(round(sensor.period * US))
    if frame_us % dt_us:
        raise ValueError("capture period must be a multiple of dt")
    compute_us = int(round(compute_ms * 1000))
    max_steps = int(math.ceil(max_time * US / dt_us))

    state = start_state(track, start_s, v0)
    buffer = FrameBuffer(sensor)
    poses: dict[int, VehicleState] = {}
    q = locate(track, (state.x, state.y))
    hint, s_prev = q.segment, q.s
    lap_start_us, lap_ok, lap = 0, True, 0
    result = RunResult()
    half_veh = vehicle.half_width
    limit = track.half_width - half_veh

    in_flight: list[tuple[int, int, float]] = []  # (done_us, frame_us, command)
    busy_until = 0
    last_frame_used = -1
    last_cmd: float | None = None
    last_cmd_frame_us: int | None = None
    perturb_until = -1
    perturb_p = perturbation.rate_hz * dt if perturbation else 0.0

    for k in range(max_steps + 1):
        t_us = k * dt_us
        t = t_us / US

        if t_us % frame_us == 0:
            frame = capture(track, state, sensor, rng)
            frame = buffer.push(t, frame, state.speed)
            poses[t_us] = state.copy()
            poses.pop(t_us - 4 * frame_us, None)
            if record:
                result.captures.append(CaptureRecord(
                    t, frame, None, state.speed, lap, s_prev, state.x, state.y,
                    state.heading, state.steer_actual, t_us <= perturb_until))

        # complete decisions whose compute time has elapsed
        while in_flight and in_flight[0][0] <= t_us:
            done_us, f_us, cmd = in_flight.pop(0)
            set_steering(state, vehicle, cmd, now=done_us / US)
            last_cmd, last_cmd_frame_us = cmd, f_us
            result.decisions.append(Decision(f_us / US, done_us / US, cmd, state.speed))

        # start a new decision when the pipeline is free and a fresh frame exists
        latest = buffer.latest_time()
        if latest is not None:
            latest_us = int(round(latest * US))
            free = pipelined or not in_flight
            if free and latest_us > last_frame_used:
                if pipelined:
                    start_us = latest_us
                else:
                    # the pipeline picks up the newest frame that existed when it became free
                    items = buffer.items()
                    times_us = [int(round(ft * US)) for ft, _ in items]
                    first_new = next(tu for tu in times_us if tu > last_frame_used)
                    start_us = max(busy_until, first_new)
                    pick = max(i for i, tu in enumerate(times_us) if tu <= start_us)
                    latest_us, latest = times_us[pick], items[pick][0]
                obs = _observation(buffer, sensor, latest_us)
                if obs is None and latest_us < t_us:
                    # too little history behind the older frame: the idle pipeline takes the newest
                    latest_us, latest, start_us = t_us, t, t_us
                    obs = _observation(buffer, sensor, latest_us)
                if obs is not None:
                    try:
                        cmd = float(driver.act(obs, poses[latest_us]))
                    except DriverStop as exc:
                        result.stopped = f"driver: {exc}"
                        break
                    delay = compute_us
                    if jitter_ms > 0:
                        delay += int(round(abs(rng.normal(0.0, jitter_ms)) * 1000))
                    done = start_us + delay
                    last_frame_used = latest_us
                    busy_until = done
                    if done <= t_us:
                        set_steering(state, vehicle, cmd, now=done / US)
                        last_cmd, last_cmd_frame_us = cmd, latest_us
                        result.decisions.append(Decision(latest_us / US, done / US, cmd, state.speed))
                    else:
                        in_flight.append((done, latest_us, cmd))
                    if record:
                        for rec_ in reversed(result.captures[-4:]):
                            if rec_.t == latest:
                                rec_.command = cmd
                                break

        if record and result.captures and result.captures[-1].t == t:
            # age of the frame behind the command currently in force
            if last_cmd_frame_us is not None:
                result.captures[-1].frame_age_ms = (t_us - last_cmd_frame_us) / 1000.0
            if result.captures[-1].command is None:
                result.captures[-1].command = last_cmd

        if k == max_steps:
            result.stopped = "time"
            break

        if perturb_p and rng.random() < perturb_p:
            shift = float(np.clip(rng.normal(0.0, perturbation.sigma), -0.6 * limit, 0.6 * limit))
            h = track.heading_at(s_prev)
            state.x -= shift * math.sin(h)
            state.y += shift * math.cos(h)
            perturb_until = t_us + int(perturbation.mask_s * US)

        step(state, vehicle, dt)
        state.t = (t_us + dt_us) / US

        q = locate(track, (state.x, state.y), hint=hint)
        hint = q.segment
        ds, crossed = lap_progress(track, s_prev, q.s)
        result.progress += ds
        s_prev = q.s
        if crossed:
            now_us = t_us + dt_us
            lap += 1
            result.laps_completed += 1
            result.lap_times.append((now_us - lap_start_us) / US)
            result.lap_clean.append(lap_ok)
            lap_start_us, lap_ok = now_us, True
            v_next = speed_of(lap)
            state.setpoint = v_next
            if result.laps_completed >= n_laps:
                result.stopped = "laps"
                break

        if abs(q.lateral_offset) >= limit:
            info = collides(track, query=q, vehicle_half_width=half_veh)
            result.infractions.append(Infraction((t_us + dt_us) / US, q.s, info.wall, info.side,
                                                 info.turn_direction))
            lap_ok = False
            if stop_on_infraction:
                result.stopped = "infraction"
                break
            if replace_on_crash:
                sp = state.setpoint
                state = start_state(track, q.s, state.speed)
                state.setpoint = sp
                state.t = (t_us + dt_us) / US
                q = locate(track, (state.x, state.y))
                hint, s_prev = q.segment, q.s
                buffer.clear()
                poses.clear()
                in_flight.clear()
                busy_until = 0
                last_frame_used = t_us + dt_us - 1

    result.sim_time = k * dt_us / US
    if record and result.captures and result.captures[-1].command is None:
        result.captures.pop()
    result.laps_attempted = result.laps_completed + (1 if result.stopped != "laps" else 0)
    return result


def _observation(buffer: FrameBuffer, sensor: SensorConfig,
                 newest_us: int | None = None) -> Observation | None:
    from .sensing import stack

    items = buffer.items()
    if newest_us is not None:
        items = [it for it in items if int(round(it[0] * US)) <= newest_us]
    return stack(items, sensor)
