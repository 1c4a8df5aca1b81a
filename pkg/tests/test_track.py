from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speedshift.track import (TrackError, collides, dumps_track, generate_default_track,
                              lap_progress, loads_track, locate)
from speedshift.vehicle import VehicleParams, min_turning_radius


def _segment_distance(p, a, b):
    ab = b - a
    u = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + u * ab)))


def test_default_track_length_and_turns(track):
    assert 16.9 <= track.total_length <= 17.1
    assert track.half_width == pytest.approx(0.375)
    dirs = [t.direction for t in track.turn_segments]
    assert dirs.count("left") == 5 and dirs.count("right") == 1


@pytest.mark.parametrize("seed", [0, 1, 2, 7])
def test_generation_invariants(seed):
    t = generate_default_track(seed)
    assert abs(t.total_length - 17.0) <= 0.1
    assert np.all(np.diff(t.arc_length_table) > 0)
    assert np.linalg.norm(t.centerline[0] - t.centerline[-1]) <= 1e-9
    segs = t.turn_segments
    assert sum(s.direction == "left" for s in segs) == 5
    for a, b in zip(segs, segs[1:]):
        assert a.end_s < b.start_s
    assert all(0 <= s.start_s < t.total_length for s in segs)


def test_generation_is_deterministic():
    assert dumps_track(generate_default_track(0)) == dumps_track(generate_default_track(0))


def test_turn_radii_are_drivable(track):
    from speedshift.track import discrete_curvature

    kappa = np.abs(discrete_curvature(track.centerline))
    r_min = min_turning_radius(VehicleParams())
    # peak curvature of the sampled arcs stays below 1 / (1.15 r_min) up to sampling error
    assert kappa.max() <= 1.0 / (1.15 * r_min) * 1.02


def test_locate_on_centerline(track):
    for s in (0.0, 3.3, 8.0, 12.7):
        q = locate(track, track.point_at(s))
        assert abs(q.lateral_offset) <= 1e-9
        assert 0.0 <= q.s < track.total_length


def test_locate_left_offset_on_straight(track):
    s = 0.5  # start line sits mid-straight
    h = track.heading_at(s)
    p = track.point_at(s) + 0.2 * np.array([-math.sin(h), math.cos(h)])
    q = locate(track, p)
    assert q.lateral_offset == pytest.approx(0.2, abs=1e-6)
    assert q.s == pytest.approx(s, abs=1e-6)


def test_locate_vertex_zero(track):
    q = locate(track, track.centerline[0])
    assert min(q.s, track.total_length - q.s) <= 1e-6


def test_locate_hint_matches_full_search(track):
    rng = np.random.default_rng(0)
    for s in rng.uniform(0, track.total_length, 200):
        base = track.point_at(s)
        p = base + rng.normal(0, 0.1, 2)
        full = locate(track, p)
        hinted = locate(track, p, hint=full.segment)
        assert hinted.s == pytest.approx(full.s, abs=1e-12)
        assert hinted.lateral_offset == pytest.approx(full.lateral_offset, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(s=st.floats(0, 16.9), d=st.floats(-0.6, 0.6))
def test_offset_magnitude_is_polyline_distance(track, s, d):
    h = track.heading_at(s)
    p = track.point_at(s) + d * np.array([-math.sin(h), math.cos(h)])
    pts = track.centerline
    oracle = min(_segment_distance(p, pts[i], pts[i + 1]) for i in range(len(pts) - 1))
    assert abs(locate(track, p).lateral_offset) == pytest.approx(oracle, abs=1e-6)


def _turn_point(track, direction, offset):
    seg = next(t for t in track.turn_segments if t.direction == direction)
    s = 0.5 * (seg.start_s + seg.end_s)
    h = track.heading_at(s)
    return track.point_at(s) + offset * np.array([-math.sin(h), math.cos(h)])


def test_collides_sides(track):
    w = track.half_width
    assert not collides(track, track.point_at(2.0)).hit
    inside = collides(track, _turn_point(track, "left", w + 0.01))
    assert inside.hit and inside.wall == "inside"
    outside = collides(track, _turn_point(track, "left", -(w + 0.01)))
    assert outside.hit and outside.wall == "outside"
    right_in = collides(track, _turn_point(track, "right", -(w + 0.01)))
    assert right_in.wall == "inside"


@settings(max_examples=40, deadline=None)
@given(o=st.floats(0.0, 0.5), extra=st.floats(0.0, 0.3), sign=st.sampled_from([-1, 1]))
def test_collides_monotone_in_offset(track, o, extra, sign):
    a = collides(track, _turn_point(track, "left", sign * o)).hit
    b = collides(track, _turn_point(track, "left", sign * (o + extra))).hit
    assert b or not a


@pytest.mark.parametrize("prev,new,delta,lap", [(16.9, 0.2, 0.3, True), (5.0, 5.0, 0.0, False),
                                                 (5.0, 4.8, -0.2, False)])
def test_lap_progress_examples(prev, new, delta, lap):
    length = 17.0

    class _T:
        total_length = length

    d, done = lap_progress(_T(), prev, new)
    assert d == pytest.approx(delta, abs=1e-12) and done is lap


def test_backward_crossing_is_not_a_lap(track):
    d, done = lap_progress(track, 0.1, track.total_length - 0.1)
    assert d == pytest.approx(-0.2, abs=1e-9) and not done


def test_file_round_trip(track):
    back = loads_track(dumps_track(track))
    assert np.allclose(back.centerline, track.centerline, atol=1e-8)
    assert back.half_width == pytest.approx(track.half_width)


@pytest.mark.parametrize("text,line", [("nope\n", "line 1"), ("trackfmt v1\nwidth x\n", "line 2"),
                                       ("trackfmt v1\nwidth 0.75\n0 0\n1\n", "line 4")])
def test_file_errors_name_line(text, line):
    with pytest.raises(TrackError, match=line):
        loads_track(text)
