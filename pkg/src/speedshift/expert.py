"""Scripted teacher drivers used to record training data.

The teacher is a pure-pursuit controller whose lookahead grows linearly with
speed, so at higher speed it starts turning earlier in space.  A quantized
variant snaps its output to full-left / straight / full-right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simulation import DriverStop
from .track import Track, TrackQueryResult, locate
from .vehicle import VehicleParams, VehicleState


class ExpertAbstains(DriverStop):
    """The vehicle is too far off the track for the expert to drive."""


@dataclass(frozen=True)
class ExpertParams:
    base_lookahead: float = 0.30
    lookahead_per_speed: float = 0.25
    steer_gain: float = 1.0
    quantize: bool = False
    quantize_deadband: float = 0.15
    perturb_prob: float = 0.2
    perturb_sigma: float = 0.06

    def __post_init__(self) -> None:
        if not self.base_lookahead > 0:
            raise ValueError("base_lookahead must be positive")
        if self.lookahead_per_speed < 0:
            raise ValueError("lookahead_per_speed must be non-negative")

    def lookahead(self, speed: float) -> float:
        return self.base_lookahead + self.lookahead_per_speed * speed


def quantize_command(value: float, deadband: float = 0.15) -> float:
    if abs(value) < deadband:
        return 0.0
    return 1.0 if value > 0 else -1.0


def expert_steer(track: Track, state: VehicleState, params: ExpertParams,
                 vehicle: VehicleParams | None = None,
                 query: TrackQueryResult | None = None) -> float:
    """Normalized pure-pursuit steering command for the current pose."""
    vehicle = vehicle or VehicleParams()
    if query is None:
        query = locate(track, (state.x, state.y))
    if abs(query.lateral_offset) > 2.0 * track.half_width:
        raise ExpertAbstains(f"lateral offset {query.lateral_offset:.3f} m beyond limit")
    ld = params.lookahead(state.speed)
    target = track.point_at(query.s + ld)
    bearing = math.atan2(target[1] - state.y, target[0] - state.x)
    alpha = bearing - state.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    delta = math.atan(2.0 * vehicle.wheelbase * math.sin(alpha) / ld)
    cmd = params.steer_gain * delta / vehicle.max_steer
    cmd = min(1.0, max(-1.0, cmd))
    if params.quantize:
        cmd = quantize_command(cmd, params.quantize_deadband)
    return cmd


class ExpertPolicy:
    """Adapter letting the expert drive inside the closed-loop runner.

    The expert reads the true pose at the moment the frame was captured,
    which is what the pipeline hands to :meth:`act`.
    """

    stack_size = 1
    input_dim = None

    def __init__(self, track: Track, params: ExpertParams, vehicle: VehicleParams):
        self.track = track
        self.params = params
        self.vehicle = vehicle

    def act(self, observation, pose: VehicleState) -> float:
        return expert_steer(self.track, pose, self.params, self.vehicle)


def preemption_lead(track: Track, s_coords: np.ndarray, steer: np.ndarray,
                    max_lead: float = 1.5) -> float:
    """Spatial lead (m) maximizing correlation of steering with upcoming curvature.

    A positive value means the expert steers before the curvature arrives.
    """
    from .track import discrete_curvature

    kappa = discrete_curvature(track.centerline)
    arc = track.arc_length_table[:-1]
    grid = np.linspace(0.0, track.total_length, 700, endpoint=False)
    order = np.argsort(s_coords)
    ss, st = np.asarray(s_coords)[order], np.asarray(steer)[order]
    steer_grid = np.interp(grid, ss, st, period=track.total_length)
    kappa_grid = np.interp(grid, arc, kappa, period=track.total_length)
    step = grid[1] - grid[0]
    best_lag, best_corr = 0.0, -np.inf
    for k in range(-int(max_lead / step), int(max_lead / step) + 1):
        # steering at s correlated with curvature at s + k*step
        corr = float(np.dot(steer_grid, np.roll(kappa_grid, -k)))
        if corr > best_corr:
            best_corr, best_lag = corr, k * step
    return best_lag


def collect_run(track: Track, vehicle: VehicleParams, sensor, params: ExpertParams, *,
                speed: float, duration: float, seed: int, speed_jitter: float = 0.0,
                perturb: bool = True, compute_ms: float = 0.0):
    """Drive the expert for ``duration`` seconds and return a :class:`~speedshift.dataset.Recording`.

    ``speed_jitter`` is the relative standard deviation of a per-lap speed
    setpoint drawn around ``speed``.  With ``perturb`` the car is randomly
    displaced sideways (``params.perturb_prob`` events per second) so the data
    covers recoveries; samples right after a displacement are masked out of
    evaluation.  If the expert abstains the recording is truncated and the
    reason is kept in the manifest.
    """
    from .dataset import Recording
    from .simulation import Perturbation, simulate

    if duration <= 0:
        raise ValueError("duration must be positive")
    max_laps = int(math.ceil(2.0 * duration * speed / track.total_length)) + 2
    jit_rng = np.random.default_rng([seed, 7919])
    lap_speeds = np.full(max_laps + 1, float(speed))
    if speed_jitter > 0:
        lap_speeds *= 1.0 + speed_jitter * jit_rng.standard_normal(max_laps + 1)
        lap_speeds = np.clip(lap_speeds, 0.5 * speed, 1.5 * speed)
    pert = None
    if perturb and params.perturb_prob > 0:
        pert = Perturbation(params.perturb_prob, params.perturb_sigma)
    driver = ExpertPolicy(track, params, vehicle)
    res = simulate(track, vehicle, driver, sensor,
                   speed=lambda lap: float(lap_speeds[min(lap, max_laps)]),
                   n_laps=max_laps, seed=seed, perturbation=pert, record=True,
                   compute_ms=compute_ms, max_time=duration - 1e-9)
    caps = [c for c in res.captures if c.command is not None]
    t = np.array([c.t for c in caps])
    marks = np.zeros(len(caps), dtype=bool)
    for inf in res.infractions:
        i = int(np.searchsorted(t, inf.t - 1e-9))
        if i < len(caps):
            marks[i] = True
    manifest = {
        "kind": "expert_recording",
        "speed_setpoint": float(speed),
        "speed_jitter": float(speed_jitter),
        "duration": float(duration),
        "seed": int(seed),
        "capture_hz": float(sensor.capture_hz),
        "ray_count": int(sensor.ray_count),
        "fov": float(sensor.fov),
        "track_hash": track.content_hash(),
        "expert_params": {k: getattr(params, k) for k in params.__dataclass_fields__},
        "lap_times": [float(x) for x in res.lap_times],
        "lap_clean": [bool(x) for x in res.lap_clean],
        "infraction_times": [float(i.t) for i in res.infractions],
        "infraction_walls": [i.wall for i in res.infractions],
        "stopped": res.stopped,
        "removed_samples": 0,
    }
    return Recording(
        t=t,
        frames=np.array([c.frame for c in caps]).reshape(len(caps), sensor.ray_count),
        steer=np.array([c.command for c in caps]),
        speed=np.array([c.speed for c in caps]),
        lap=np.array([c.lap for c in caps]),
        s_coord=np.array([c.s for c in caps]),
        infraction_window=marks,
        perturb_mask=np.array([c.perturbed for c in caps]),
        manifest=manifest,
    )
