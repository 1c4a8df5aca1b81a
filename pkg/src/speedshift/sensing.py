"""Ray-cast "pseudo-camera" and multi-frame stacking.

Each frame is a fan of ``ray_count`` distances to the nearest wall, centered
on the vehicle heading.  Frames depend on pose only, never on speed, so two
captures at the same pose are identical whatever the car is doing.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from .track import Track


@dataclass(frozen=True)
class SensorConfig:
    ray_count: int = 32
    fov: float = math.radians(160.0)
    max_range: float = 3.0
    capture_hz: float = 20.0
    noise_sigma: float = 0.005
    stack_size: int = 1
    # exponential frame mixing per m/s of speed; 0 disables motion blur
    blur_per_speed: float = 0.0

    def __post_init__(self) -> None:
        if self.ray_count < 4:
            raise ValueError("ray_count must be at least 4")
        if not 0.0 < self.fov < 2.0 * math.pi:
            raise ValueError("fov must lie in (0, 2*pi)")
        if not self.capture_hz > 0:
            raise ValueError("capture_hz must be positive")
        if self.stack_size not in (1, 3):
            raise ValueError("stack_size must be 1 or 3")
        if self.max_range <= 0 or self.noise_sigma < 0:
            raise ValueError("max_range must be positive and noise_sigma non-negative")

    @property
    def period(self) -> float:
        return 1.0 / self.capture_hz

    @cached_property
    def ray_angles(self) -> np.ndarray:
        return np.linspace(-self.fov / 2.0, self.fov / 2.0, self.ray_count)


@dataclass(frozen=True)
class Observation:
    frames: np.ndarray  # (stack_size, ray_count), oldest first
    capture_times: tuple[float, ...]

    def flat(self) -> np.ndarray:
        return self.frames.reshape(-1)


class _WallCache:
    """Wall segments of a track as flat arrays, built once per track."""

    def __init__(self, track: Track):
        starts, vecs = [], []
        for wall in track.walls():
            starts.append(wall[:-1])
            vecs.append(np.diff(wall, axis=0))
        a = np.concatenate(starts)
        e = np.concatenate(vecs)
        self.ax, self.ay = np.ascontiguousarray(a[:, 0]), np.ascontiguousarray(a[:, 1])
        self.ex, self.ey = np.ascontiguousarray(e[:, 0]), np.ascontiguousarray(e[:, 1])


_CACHE: dict[int, tuple[Track, _WallCache]] = {}


def _walls_for(track: Track) -> _WallCache:
    entry = _CACHE.get(id(track))
    if entry is None or entry[0] is not track:
        entry = (track, _WallCache(track))
        _CACHE[id(track)] = entry
    return entry[1]


@njit(cache=True)
def _cast_kernel(ax, ay, ex, ey, x, y, theta, max_range):  # pragma: no cover - compiled
    out = np.empty(theta.shape[0])
    for r in range(theta.shape[0]):
        dx = math.cos(theta[r])
        dy = math.sin(theta[r])
        best = max_range
        for k in range(ax.shape[0]):
            denom = dx * ey[k] - dy * ex[k]
            if denom == 0.0:
                continue
            rx = ax[k] - x
            ry = ay[k] - y
            t = (rx * ey[k] - ry * ex[k]) / denom
            if t < 0.0 or t >= best:
                continue
            u = (rx * dy - ry * dx) / denom
            if 0.0 <= u <= 1.0:
                best = t
        out[r] = best
    return out


def cast_rays(track: Track, x: float, y: float, heading: float, angles: np.ndarray,
              max_range: float) -> np.ndarray:
    """Noise-free distance to the nearest wall along each ray, capped at ``max_range``."""
    w = _walls_for(track)
    return _cast_kernel(w.ax, w.ay, w.ex, w.ey, float(x), float(y), heading + angles,
                        float(max_range))


def cast_rays_reference(track: Track, x: float, y: float, heading: float, angles: np.ndarray,
                        max_range: float) -> np.ndarray:
    """Vectorized numpy version of :func:`cast_rays`, kept as a cross-check."""
    w = _walls_for(track)
    theta = heading + angles
    dx = np.cos(theta)[:, None]
    dy = np.sin(theta)[:, None]
    ax = w.ax[None, :] - x
    ay = w.ay[None, :] - y
    denom = dx * w.ey[None, :] - dy * w.ex[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ax * w.ey - ay * w.ex) / denom
        u = (ax * dy - ay * dx) / denom
    valid = (t >= 0.0) & (u >= 0.0) & (u <= 1.0) & (denom != 0.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def capture(track: Track, state, config: SensorConfig,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """One frame of ray distances from the vehicle pose.

    Gaussian noise is added to rays that hit a wall; rays with no wall in
    range read exactly ``max_range``.
    """
    dist = cast_rays(track, state.x, state.y, state.heading, config.ray_angles, config.max_range)
    if rng is not None and config.noise_sigma > 0:
        noise = rng.normal(0.0, config.noise_sigma, size=dist.shape)
        hit = dist < config.max_range
        dist = np.where(hit, np.clip(dist + noise, 0.0, config.max_range), dist)
    return dist


class FrameBuffer:
    """Bounded history of (capture_time, frame) pairs at the capture rate."""

    def __init__(self, config: SensorConfig, maxlen: int = 8):
        self.config = config
        self._items: deque[tuple[float, np.ndarray]] = deque(maxlen=max(maxlen, config.stack_size))

    def push(self, t: float, frame: np.ndarray, speed: float = 0.0) -> np.ndarray:
        blur = self.config.blur_per_speed * speed
        if blur > 0 and self._items:
            a = min(0.9, blur)
            frame = (1.0 - a) * frame + a * self._items[-1][1]
        self._items.append((t, frame))
        return frame

    def clear(self) -> None:
        self._items.clear()

    def __len__(self) -> int:
        return len(self._items)

    def latest_time(self) -> float | None:
        return self._items[-1][0] if self._items else None

    def items(self) -> list[tuple[float, np.ndarray]]:
        return list(self._items)


def stack(frame_buffer: FrameBuffer | list, config: SensorConfig) -> Observation | None:
    """Newest ``stack_size`` frames, oldest first; ``None`` when not enough are buffered."""
    items = frame_buffer.items() if isinstance(frame_buffer, FrameBuffer) else list(frame_buffer)
    k = config.stack_size
    if len(items) < k:
        return None
    window = items[-k:]
    times = tuple(t for t, _ in window)
    for t0, t1 in zip(times, times[1:]):
        if abs((t1 - t0) - config.period) > 1e-9:
            return None
    return Observation(np.stack([f for _, f in window]), times)


def rasterize(frame: np.ndarray, config: SensorConfig, shape: tuple[int, int] = (16, 32)) -> np.ndarray:
    """Occupancy grid of a frame in the vehicle frame; for visualization only."""
    rows, cols = shape
    grid = np.zeros(shape, dtype=np.uint8)
    r = config.max_range
    for ang, dist in zip(config.ray_angles, frame):
        if dist >= r:
            continue
        fwd, left = dist * math.cos(ang), dist * math.sin(ang)
        i = int((1.0 - fwd / r) * (rows - 1) + 0.5)
        j = int((0.5 - left / (2 * r)) * (cols - 1) + 0.5)
        if 0 <= i < rows and 0 <= j < cols:
            grid[i, j] = 1
    return grid


def mean_interframe_msd(stacks: np.ndarray) -> float:
    """Average mean squared difference between consecutive frames of stacked samples.

    ``stacks`` has shape (n, stack_size, ray_count).
    """
    diffs = np.diff(stacks, axis=1)
    return float(np.mean(diffs * diffs))
