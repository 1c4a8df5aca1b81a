"""Kinematic bicycle model with a lagged, delayed steering actuator.

The car is stepped at a fixed ``dt``.  Steering commands are normalized to
[-1, 1], scaled by ``max_steer`` and queued for ``actuator_pure_delay``
seconds before they reach the first-order lag that produces the realized
wheel angle.  Speed follows a setpoint through another first-order lag.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

DEFAULT_DT = 0.005
MAX_DT = 0.02

# Geometry of the 1:10 chassis used to derive the default steering limit.
WHEEL_TRACK = 0.19
OUTER_WHEEL_TURN_DIAMETER = 1.40


def _default_max_steer(wheelbase: float = 0.26) -> float:
    # Rear-axle radius for which the outer front wheel sweeps the limit diameter.
    outer = OUTER_WHEEL_TURN_DIAMETER / 2.0
    rear_radius = math.sqrt(outer * outer - wheelbase * wheelbase) - WHEEL_TRACK / 2.0
    return math.atan(wheelbase / rear_radius)


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.26
    max_steer: float = field(default_factory=_default_max_steer)
    actuator_tau: float = 0.08
    actuator_pure_delay: float = 0.02
    speed_tau: float = 0.25
    half_width: float = WHEEL_TRACK / 2.0

    def __post_init__(self) -> None:
        for name in ("wheelbase", "max_steer", "actuator_tau", "actuator_pure_delay",
                     "speed_tau", "half_width"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value!r}")
        if self.max_steer >= math.pi / 2:
            raise ValueError("max_steer must be below pi/2")


@dataclass
class VehicleState:
    """Mutable physical state owned by one simulation loop."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    steer_actual: float = 0.0
    steer_commanded: float = 0.0
    setpoint: float = 0.0
    t: float = 0.0
    # (release_time, target_radians) in issue order
    pending_commands: deque = field(default_factory=deque)

    def copy(self) -> "VehicleState":
        clone = VehicleState(self.x, self.y, self.heading, self.speed, self.steer_actual,
                             self.steer_commanded, self.setpoint, self.t)
        clone.pending_commands = deque(self.pending_commands)
        return clone


def set_steering(state: VehicleState, params: VehicleParams, command: float,
                 now: float | None = None) -> VehicleState:
    """Queue a normalized steering command; it takes effect after the pure delay."""
    if not math.isfinite(command):
        raise ValueError(f"steering command must be finite, got {command!r}")
    if now is None:
        now = state.t
    command = min(1.0, max(-1.0, command))
    state.pending_commands.append((now + params.actuator_pure_delay, command * params.max_steer))
    return state


def step(state: VehicleState, params: VehicleParams, dt: float = DEFAULT_DT) -> VehicleState:
    """Advance ``state`` in place by one explicit Euler step."""
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt must be in (0, {MAX_DT}], got {dt}")
    queue = state.pending_commands
    # small epsilon keeps float-accumulated clocks from missing a due release
    while queue and queue[0][0] <= state.t + 1e-9:
        state.steer_commanded = queue.popleft()[1]

    alpha = min(1.0, dt / params.actuator_tau)
    state.steer_actual += (state.steer_commanded - state.steer_actual) * alpha
    state.speed += (state.setpoint - state.speed) * min(1.0, dt / params.speed_tau)
    if state.speed < 0.0:
        state.speed = 0.0

    v = state.speed
    state.heading += v / params.wheelbase * math.tan(state.steer_actual) * dt
    state.x += v * math.cos(state.heading) * dt
    state.y += v * math.sin(state.heading) * dt
    state.t += dt
    return state


def min_turning_radius(params: VehicleParams) -> float:
    """Radius of the tightest circle the rear axle can follow."""
    t = math.tan(params.max_steer)
    if t <= 0.0:
        return math.inf
    return params.wheelbase / t
