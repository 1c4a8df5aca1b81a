"""Closed test track: a dense centerline polyline with fixed width.

The track answers the geometric questions the simulator needs: projection of
a point onto the centerline (arc coordinate, signed lateral offset, tangent
heading), wall contact, lap progress with wraparound, and which turn a given
arc coordinate belongs to.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vehicle import VehicleParams, min_turning_radius

TRACK_LENGTH = 17.0
TRACK_WIDTH = 0.75
VERTEX_SPACING = 0.045
TURN_CURVATURE_THRESHOLD = 0.5
# Turn-adjacent window used when attributing wall contacts to a turn.
TURN_MARGIN = 0.6

FORMAT_HEADER = "trackfmt v1"


class TrackError(ValueError):
    """Raised for invalid track geometry or malformed track files."""


@dataclass(frozen=True)
class TurnSegment:
    start_s: float
    end_s: float
    direction: str  # "left" | "right"

    def contains(self, s: float, margin: float = 0.0) -> bool:
        return self.start_s - margin <= s <= self.end_s + margin


@dataclass(frozen=True)
class TrackQueryResult:
    s: float
    lateral_offset: float
    heading_of_centerline: float
    segment: int


@dataclass(frozen=True)
class CollisionInfo:
    hit: bool
    wall: str  # "inside" | "outside" | "none"
    side: str  # "left" | "right" | "none"
    turn_direction: str | None = None


@dataclass(frozen=True, eq=False)
class Track:
    """Immutable closed track.

    ``centerline`` has shape (N + 1, 2) with the last vertex repeating the
    first one.  Positive lateral offsets are to the left of the driving
    direction (counterclockwise tracks therefore have the infield on the left).
    """

    centerline: np.ndarray
    half_width: float
    turn_segments: tuple[TurnSegment, ...] = field(default=())

    def __post_init__(self) -> None:
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
            raise TrackError("centerline must be an (N, 2) array with N >= 4")
        if not np.all(np.isfinite(pts)):
            raise TrackError("centerline contains non-finite values")
        if np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
            raise TrackError("centerline is not closed")
        if not self.half_width > 0:
            raise TrackError("half_width must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)

        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise TrackError("centerline has repeated vertices")
        arc = np.concatenate([[0.0], np.cumsum(seg_len)])
        object.__setattr__(self, "_seg", seg)
        object.__setattr__(self, "_seg_len", seg_len)
        object.__setattr__(self, "_seg_len2", seg_len * seg_len)
        object.__setattr__(self, "arc_length_table", arc)
        object.__setattr__(self, "_seg_heading", np.arctan2(seg[:, 1], seg[:, 0]))
        # plain-float copies for the scalar hot path
        object.__setattr__(self, "_py", (pts[:-1, 0].tolist(), pts[:-1, 1].tolist(),
                                         seg[:, 0].tolist(), seg[:, 1].tolist(),
                                         (seg_len * seg_len).tolist(), arc[:-1].tolist()))
        if not self.turn_segments:
            object.__setattr__(self, "turn_segments", tuple(label_turns(pts)))

    @property
    def total_length(self) -> float:
        return float(self.arc_length_table[-1])

    @property
    def n_segments(self) -> int:
        return len(self._seg_len)

    def point_at(self, s: float) -> np.ndarray:
        """Centerline point at arc coordinate ``s`` (wrapped)."""
        s = s % self.total_length
        i = int(np.searchsorted(self.arc_length_table, s, side="right") - 1)
        i = min(i, self.n_segments - 1)
        frac = (s - self.arc_length_table[i]) / self._seg_len[i]
        return self.centerline[i] + frac * self._seg[i]

    def heading_at(self, s: float) -> float:
        s = s % self.total_length
        i = int(np.searchsorted(self.arc_length_table, s, side="right") - 1)
        return float(self._seg_heading[min(i, self.n_segments - 1)])

    def walls(self) -> tuple[np.ndarray, np.ndarray]:
        """Left and right wall polylines (closed), offset by ``half_width``."""
        cached = self.__dict__.get("_walls")
        if cached is None:
            normals = _vertex_normals(self.centerline)
            left = self.centerline + self.half_width * normals
            right = self.centerline - self.half_width * normals
            cached = (_simplify_collinear(left), _simplify_collinear(right))
            object.__setattr__(self, "_walls", cached)
        return cached

    def turn_at(self, s: float, margin: float = 0.0) -> TurnSegment | None:
        length = self.total_length
        for seg in self.turn_segments:
            for shift in (0.0, length, -length):
                if seg.contains(s + shift, margin):
                    return seg
        return None

    def nearest_turn(self, s: float) -> TurnSegment | None:
        best, best_d = None, math.inf
        length = self.total_length
        for seg in self.turn_segments:
            if seg.contains(s):
                return seg
            d = min(abs(s - seg.start_s), abs(s - seg.end_s))
            d = min(d, length - d)
            if d < best_d:
                best, best_d = seg, d
        return best

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64(self.half_width).tobytes())
        h.update(np.ascontiguousarray(self.centerline).tobytes())
        return h.hexdigest()[:16]


def _vertex_normals(pts: np.ndarray) -> np.ndarray:
    seg = np.diff(pts, axis=0)
    seg /= np.hypot(seg[:, 0], seg[:, 1])[:, None]
    seg_n = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    prev_n = np.roll(seg_n, 1, axis=0)
    avg = seg_n + prev_n
    avg /= np.hypot(avg[:, 0], avg[:, 1])[:, None]
    # miter scaling keeps the offset at exactly half_width from both segments
    cos_half = np.sum(avg * seg_n, axis=1)
    avg /= cos_half[:, None]
    return np.vstack([avg, avg[:1]])


def _simplify_collinear(poly: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    keep = [0]
    for i in range(1, len(poly) - 1):
        a, b, c = poly[keep[-1]], poly[i], poly[i + 1]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) > tol:
            keep.append(i)
    keep.append(len(poly) - 1)
    return poly[keep]


def discrete_curvature(pts: np.ndarray) -> np.ndarray:
    """Signed curvature at each vertex of a closed polyline (last == first)."""
    seg = np.diff(pts, axis=0)
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    turn = np.angle(np.exp(1j * (heading - np.roll(heading, 1))))
    return turn / (0.5 * (seg_len + np.roll(seg_len, 1)))


def label_turns(pts: np.ndarray, threshold: float = TURN_CURVATURE_THRESHOLD) -> list[TurnSegment]:
    """Group vertices with |curvature| above ``threshold`` into turn segments."""
    kappa = discrete_curvature(pts)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    sign = np.where(kappa > threshold, 1, np.where(kappa < -threshold, -1, 0))
    n = len(sign)
    if np.all(sign != 0):
        raise TrackError("track has no straight sections")
    # rotate so that index 0 is a straight vertex, then scan runs
    start = int(np.argmax(sign == 0))
    runs: list[tuple[int, int, int]] = []
    i = 0
    while i < n:
        k = (start + i) % n
        if sign[k] == 0:
            i += 1
            continue
        j = i
        while j + 1 < n and sign[(start + j + 1) % n] == sign[k]:
            j += 1
        runs.append(((start + i) % n, (start + j) % n, int(sign[k])))
        i = j + 1
    out = []
    for a, b, sgn in sorted(runs):
        # vertex k sits between segments k-1 and k; span from vertex a to vertex b
        s0, s1 = float(arc[a]), float(arc[b])
        if s1 < s0:
            raise TrackError("turn segment wraps across the start line")
        out.append(TurnSegment(s0, s1, "left" if sgn > 0 else "right"))
    return out


# --- generation -----------------------------------------------------------

# Counterclockwise layout: five left turns, one right turn, 90 degrees each.
_TURN_SIGNS = (1, 1, -1, 1, 1, 1)


def _turtle_points(straights, radii, spacing: float) -> np.ndarray:
    """Dense polyline for alternating straight/arc pieces starting eastbound at the origin."""
    x, y, h = 0.0, 0.0, 0.0
    pieces = []
    for length, radius, sign in zip(straights, radii, _TURN_SIGNS):
        pieces.append(("line", length, 0.0))
        pieces.append(("arc", radius * math.pi / 2.0, sign / radius))
    total = sum(p[1] for p in pieces)
    n = max(4, int(math.ceil(total / spacing)))
    targets = np.linspace(0.0, total, n + 1)
    out = np.empty((n + 1, 2))
    piece_start = 0.0
    pi = 0
    state = (x, y, h)
    for k, s in enumerate(targets):
        while pi < len(pieces) - 1 and s > piece_start + pieces[pi][1]:
            state = _advance(state, pieces[pi][1], pieces[pi][2])
            piece_start += pieces[pi][1]
            pi += 1
        px, py, _ = _advance(state, s - piece_start, pieces[pi][2])
        out[k] = (px, py)
    return out


def _advance(state, ds: float, kappa: float):
    x, y, h = state
    if kappa == 0.0:
        return x + ds * math.cos(h), y + ds * math.sin(h), h
    r = 1.0 / kappa
    h2 = h + ds * kappa
    return x + r * (math.sin(h2) - math.sin(h)), y - r * (math.cos(h2) - math.cos(h)), h2


def _solve_straights(radii, free: np.ndarray, length: float) -> np.ndarray:
    """Straight lengths closing the loop with the requested total length.

    With all turns at 90 degrees the closure equations are linear:
    S1 = S3 + S5 + cx and S6 = S2 + S4 + cy, where cx, cy collect the arc
    chords.  ``free`` gives the relative proportions of S2..S5.
    """
    r1, r2, r3, r4, r5, r6 = radii
    cx = -(r1 - r2 - r3 - r4 - r5 + r6)
    cy = r1 + r2 + r3 + r4 - r5 - r6
    arcs = sum(radii) * math.pi / 2.0
    budget = (length - arcs - cx - cy) / 2.0
    mid = budget * free / free.sum()
    s2, s3, s4, s5 = mid
    return np.array([s3 + s5 + cx, s2, s3, s4, s5, s2 + s4 + cy])


def _min_clearance(pts: np.ndarray, exclude_arc: float) -> float:
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    p = pts[:-1]
    a = arc[:-1]
    total = arc[-1]
    d = np.hypot(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])
    da = np.abs(a[:, None] - a[None, :])
    da = np.minimum(da, total - da)
    mask = da > exclude_arc
    return float(d[mask].min()) if np.any(mask) else math.inf


def generate_default_track(seed: int = 0, *, vehicle: VehicleParams | None = None,
                           length: float = TRACK_LENGTH, width: float = TRACK_WIDTH,
                           radius_range: tuple[float, float] = (0.68, 0.90),
                           max_tries: int = 200) -> Track:
    """Random closed track with five left turns and one right turn.

    Turn radii are drawn from ``radius_range`` (floored at 1.15 times the
    vehicle's minimum turning radius) and straight lengths are solved so the
    loop closes at exactly ``length`` meters.  Driving is counterclockwise and
    the start line sits in the middle of the longest straight.
    """
    vehicle = vehicle or VehicleParams()
    r_min = 1.15 * min_turning_radius(vehicle)
    lo, hi = max(radius_range[0], r_min), max(radius_range[1], r_min)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        radii = rng.uniform(lo, hi, size=6)
        free = rng.uniform(0.7, 1.3, size=4)
        straights = _solve_straights(radii, free, length)
        if np.any(straights < 0.45):
            continue
        pts = _turtle_points(straights, radii, VERTEX_SPACING)
        # start line at the middle of the first (bottom) straight
        n = len(pts) - 1
        shift = int(round(straights[0] / 2.0 / (length / n)))
        base = np.roll(pts[:-1], -shift, axis=0)
        pts = np.vstack([base, base[:1]])
        clearance = _min_clearance(pts, exclude_arc=2.5)
        if clearance < 2.0 * (width / 2.0) + 0.35:
            continue
        track = Track(pts, width / 2.0)
        turns = track.turn_segments
        if sum(t.direction == "left" for t in turns) != 5 or \
                sum(t.direction == "right" for t in turns) != 1:
            continue
        return track
    raise TrackError(f"could not generate a valid track after {max_tries} tries")


# --- queries --------------------------------------------------------------

def locate(track: Track, position, hint: int | None = None, window: int = 3) -> TrackQueryResult:
    """Project ``position`` onto the centerline.

    With ``hint`` (a segment index from a previous query) only ``window``
    segments on each side are searched, which is what the simulation loop
    uses every step.
    """
    px, py = float(position[0]), float(position[1])
    if not (math.isfinite(px) and math.isfinite(py)):
        raise ValueError("position must be finite")
    if hint is None:
        pts = track.centerline[:-1]
        seg = track._seg
        rel = np.array([px, py]) - pts
        u = np.clip(np.einsum("ij,ij->i", rel, seg) / track._seg_len2, 0.0, 1.0)
        dx = rel[:, 0] - u * seg[:, 0]
        dy = rel[:, 1] - u * seg[:, 1]
        d2 = dx * dx + dy * dy
        best = int(np.argmin(d2))
        return _finish(track, best, float(u[best]), px, py)

    xs, ys, sxs, sys_, l2s, _ = track._py
    n = len(xs)
    best, best_d2, best_u = -1, math.inf, 0.0
    for k in range(hint - window, hint + window + 1):
        i = k % n
        rx, ry = px - xs[i], py - ys[i]
        u = (rx * sxs[i] + ry * sys_[i]) / l2s[i]
        if u < 0.0:
            u = 0.0
        elif u > 1.0:
            u = 1.0
        ex, ey = rx - u * sxs[i], ry - u * sys_[i]
        d2 = ex * ex + ey * ey
        if d2 < best_d2:
            best, best_d2, best_u = i, d2, u
    return _finish(track, best, best_u, px, py)


def _finish(track: Track, i: int, u: float, px: float, py: float) -> TrackQueryResult:
    xs, ys, sxs, sys_, l2s, arcs = track._py
    qx, qy = xs[i] + u * sxs[i], ys[i] + u * sys_[i]
    ex, ey = px - qx, py - qy
    dist = math.hypot(ex, ey)
    if u >= 1.0:
        # projection landed on the far vertex; use the next segment's frame
        i2 = (i + 1) % len(xs)
        i, u = i2, 0.0
    seg_len = math.sqrt(l2s[i])
    tx, ty = sxs[i] / seg_len, sys_[i] / seg_len
    if u <= 0.0:
        # vertex case: sign from the averaged tangent of the two adjacent segments
        j = (i - 1) % len(xs)
        pl = math.sqrt(l2s[j])
        tx, ty = tx + sxs[j] / pl, ty + sys_[j] / pl
    cross = tx * ey - ty * ex
    offset = dist if cross >= 0.0 else -dist
    s = arcs[i] + u * seg_len
    length = track.total_length
    if s >= length:
        s -= length
    heading = math.atan2(sys_[i], sxs[i])
    return TrackQueryResult(s, offset, heading, i)


def collides(track: Track, position=None, *, query: TrackQueryResult | None = None,
             vehicle_half_width: float = 0.0) -> CollisionInfo:
    """Wall contact test for the vehicle center.

    The vehicle body is folded in by shrinking the usable half width by
    ``vehicle_half_width``.  The wall is reported as inside/outside relative to
    the enclosing (or nearest) turn.
    """
    if query is None:
        query = locate(track, position)
    limit = track.half_width - vehicle_half_width
    off = query.lateral_offset
    if abs(off) < limit:
        return CollisionInfo(False, "none", "none")
    side = "left" if off > 0 else "right"
    turn = track.nearest_turn(query.s)
    if turn is None:
        return CollisionInfo(True, "none", side)
    inside = (side == "left") == (turn.direction == "left")
    adjacent = track.turn_at(query.s, TURN_MARGIN)
    return CollisionInfo(True, "inside" if inside else "outside", side,
                         adjacent.direction if adjacent is not None else None)


def lap_progress(track: Track, prev_s: float, new_s: float) -> tuple[float, bool]:
    """Signed forward progress between two arc coordinates, with lap detection."""
    length = track.total_length
    delta = new_s - prev_s
    if delta < -length / 2.0:
        return delta + length, True
    if delta > length / 2.0:
        return delta - length, False
    return delta, False


# --- file format ----------------------------------------------------------

def dumps_track(track: Track) -> str:
    lines = [FORMAT_HEADER, f"width {2.0 * track.half_width:.9g}"]
    lines += [f"{x:.9g} {y:.9g}" for x, y in track.centerline[:-1]]
    return "\n".join(lines) + "\n"


def loads_track(text: str) -> Track:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise TrackError(f"line 1: expected header {FORMAT_HEADER!r}")
    if len(lines) < 2 or not lines[1].startswith("width "):
        raise TrackError("line 2: expected 'width <meters>'")
    try:
        width = float(lines[1].split()[1])
    except (IndexError, ValueError) as exc:
        raise TrackError(f"line 2: bad width: {exc}") from None
    pts = []
    for lineno, ln in enumerate(lines[2:], start=3):
        parts = ln.split()
        if len(parts) != 2:
            raise TrackError(f"line {lineno}: expected 'x y'")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise TrackError(f"line {lineno}: non-numeric coordinate") from None
    arr = np.array(pts + pts[:1], dtype=np.float64)
    return Track(arr, width / 2.0)


def save_track(track: Track, path: str | Path) -> None:
    Path(path).write_text(dumps_track(track), encoding="utf-8")


def load_track(path: str | Path) -> Track:
    return loads_track(Path(path).read_text(encoding="utf-8"))
