from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speedshift.dataset import (DatasetError, DatasetIntegrityError, DatasetParseError, Recording,
                                clean, fold_views, lap_statistics, load, load_shifted, save,
                                save_shifted, shift_labels, split_block, split_period,
                                split_random)


def make_recording(n: int = 1000, rays: int = 4, seed: int = 0, infractions=(),
                   t0: float = 0.0) -> Recording:
    rng = np.random.default_rng(seed)
    t = t0 + np.arange(n) / 20.0
    inf = np.zeros(n, dtype=bool)
    for ti in infractions:
        inf[int(round((ti - t0) * 20))] = True
    return Recording(t, rng.random((n, rays)), rng.uniform(-1, 1, n), np.full(n, 0.7),
                     np.arange(n) // 100, np.linspace(0, 17, n), inf, np.zeros(n, dtype=bool),
                     {"capture_hz": 20.0, "speed_setpoint": 0.7, "lap_times": [24.0, 25.0, 26.0]})


# --- recording ------------------------------------------------------------

def test_recording_validates_columns():
    with pytest.raises(DatasetIntegrityError):
        Recording(np.arange(3) / 20, np.zeros((3, 2)), [0, 0], [1, 1, 1], [0] * 3, [0] * 3,
                  [False] * 3, [False] * 3)
    with pytest.raises(DatasetIntegrityError):
        Recording(np.arange(2) / 20, np.zeros((2, 2)), [0, 1.5], [1, 1], [0] * 2, [0] * 2,
                  [False] * 2, [False] * 2)
    with pytest.raises(DatasetIntegrityError):
        Recording(np.arange(2) / 20, np.zeros((2, 2)), [0, 0], [1, -1], [0] * 2, [0] * 2,
                  [False] * 2, [False] * 2)


def test_sample_access():
    rec = make_recording(10)
    s = rec[3]
    assert s.t == pytest.approx(0.15) and s.lap == 0 and not s.infraction_window
    assert len(list(rec)) == 10


def test_lap_statistics():
    mean, std = lap_statistics(make_recording(10))
    assert mean == pytest.approx(25.0) and std == pytest.approx(1.0)
    rec = make_recording(10)
    rec.manifest["lap_times"] = []
    with pytest.raises(DatasetError):
        lap_statistics(rec)


# --- cleaning -------------------------------------------------------------

def test_clean_without_infractions_is_identity():
    rec = make_recording(200)
    assert clean(rec) is rec


def test_clean_removes_window_around_infraction():
    rec = make_recording(3000, infractions=[100.0])
    out = clean(rec)
    assert not np.any((out.t >= 95.0 - 1e-9) & (out.t <= 101.0 + 1e-9))
    # 95.00 .. 101.00 inclusive at 20 Hz
    assert len(rec) - len(out) == 121
    assert out.manifest["removed_samples"] == 121
    assert not out.infraction_window.any()


def test_clean_clips_at_recording_start():
    rec = make_recording(400, infractions=[3.0])
    out = clean(rec)
    assert out.t[0] == pytest.approx(4.05)
    assert len(rec) - len(out) == 81


def test_clean_renumbers_laps_densely():
    rec = make_recording(3000, infractions=[10.0])
    rec.lap = (rec.t // 5).astype(np.int64)  # lap 1 lies entirely inside the removed window
    out = clean(rec)
    assert np.array_equal(np.unique(out.lap), np.arange(len(np.unique(out.lap))))


@given(st.lists(st.floats(0.0, 49.9), max_size=4), st.floats(0.0, 8.0))
@settings(max_examples=40, deadline=None)
def test_clean_never_grows(marks, window):
    rec = make_recording(1000, infractions=[round(m * 20) / 20 for m in marks])
    out = clean(rec, window_before_infraction=window)
    assert len(out) <= len(rec)
    assert not out.infraction_window.any()


# --- label shifting -------------------------------------------------------

def test_shift_zero_is_identity():
    rec = make_recording(50)
    ds = shift_labels(rec, 0)
    assert np.array_equal(ds.labels, rec.steer)
    assert np.array_equal(ds.inputs[:, 0], rec.frames)


def test_shift_plus_100():
    rec = make_recording(1000)
    ds = shift_labels(rec, 100)
    assert len(ds) == 998
    assert ds.provenance["dropped_pairs"] == 2
    assert np.array_equal(ds.labels, rec.steer[2:])
    assert np.array_equal(ds.inputs[:, 0], rec.frames[:998])


def test_shift_minus_50_drops_first_sample():
    rec = make_recording(100)
    ds = shift_labels(rec, -50)
    assert len(ds) == 99
    assert np.array_equal(ds.frame_index[:, 0], np.arange(1, 100))
    assert np.array_equal(ds.labels, rec.steer[:99])


def test_shift_rejects_non_multiple_of_step():
    with pytest.raises(DatasetError):
        shift_labels(make_recording(10), 30)


def test_shift_label_time_matches_exactly():
    rec = make_recording(300)
    for shift in (-100, -50, 0, 50, 100, 150, 200):
        ds = shift_labels(rec, shift, stack_size=3)
        ticks = rec.tick_index()
        assert np.array_equal(ticks[ds.label_index] - ticks[ds.frame_index[:, -1]],
                              np.full(len(ds), shift // 50))


def test_shift_does_not_cross_cleaning_gaps():
    rec = clean(make_recording(2000, infractions=[50.0]))
    ds = shift_labels(rec, 200, stack_size=3)
    ticks = rec.tick_index()
    assert np.all(ticks[ds.label_index] - ticks[ds.frame_index[:, 0]] == 6)


@given(st.sampled_from([-100, -50, 50, 100, 150, 200]), st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_shift_index_arithmetic(shift, stack):
    stack = 1 if stack == 2 else stack
    rec = make_recording(120)
    base = shift_labels(rec, 0, stack_size=stack)
    ds = shift_labels(rec, shift, stack_size=stack)
    lookup = {int(fi[-1]): lab for fi, lab in zip(base.frame_index, base.labels)}
    off = shift // 50
    checked = 0
    for fi, lab in zip(ds.frame_index, ds.labels):
        if int(fi[-1]) + off in lookup:
            assert lab == lookup[int(fi[-1]) + off]
            checked += 1
    assert checked >= len(ds) - 2


def test_stacking_and_frame_stride():
    rec = make_recording(30)
    ds = shift_labels(rec, 0, stack_size=3, frame_stride=2)
    assert ds.stack_size == 3
    assert np.array_equal(ds.frame_index[0], [0, 2, 4])
    assert np.array_equal(ds.inputs[0], rec.frames[[0, 2, 4]])


def test_eval_mask_excludes_perturbed_samples():
    rec = make_recording(40)
    rec.perturb_mask[10] = True
    ds = shift_labels(rec, 0, stack_size=3)
    bad = np.any(ds.frame_index == 10, axis=1)
    assert np.array_equal(ds.eval_mask, ~bad)


# --- splits ---------------------------------------------------------------

def test_split_block_100():
    assign = split_block(np.zeros(100))
    assert np.array_equal(np.where(assign == 0)[0], np.arange(20))


def test_split_block_remainder_first():
    assign = split_block(np.zeros(101))
    assert np.bincount(assign).tolist() == [21, 20, 20, 20, 20]


def test_split_block_too_small():
    with pytest.raises(DatasetError):
        split_block(np.zeros(4))


@given(st.integers(5, 500), st.integers(2, 7))
@settings(max_examples=50, deadline=None)
def test_split_block_partition(n, folds):
    if n < folds:
        return
    assign = split_block(np.zeros(n), folds)
    assert len(assign) == n and set(assign) == set(range(folds))
    assert np.all(np.diff(assign) >= 0)


def test_split_period_layout():
    ds = shift_labels(make_recording(1000), 0)
    assign = split_period(ds, folds=5, periods=10)
    assert np.bincount(assign).tolist() == [200] * 5
    runs = np.flatnonzero(np.diff(assign)) + 1
    assert len(runs) == 49  # 50 slices of 20


def test_split_period_drops_straddling_stacks():
    ds = shift_labels(make_recording(1000), 0, stack_size=3)
    assign = split_period(ds, folds=5, periods=10)
    # stacks ending at index 20 or 21 straddle the first slice edge
    first = {int(fi[-1]): a for fi, a in zip(ds.frame_index, assign)}
    assert first[20] == -1 and first[21] == -1 and first[22] == 1


@given(st.integers(200, 1500), st.integers(0, 3))
@settings(max_examples=25, deadline=None)
def test_split_period_no_shared_frames(n, seed):
    ds = shift_labels(make_recording(n, seed=seed), 0, stack_size=3)
    assign = split_period(ds, folds=5, periods=10)
    for fold in range(5):
        train, val = fold_views(ds, assign, fold)
        assert not set(train.frame_index.ravel()) & set(val.frame_index.ravel())


def test_split_period_rejects_too_few_periods():
    ds = shift_labels(make_recording(100), 0)
    with pytest.raises(DatasetError):
        split_period(ds, folds=5, periods=4)


def test_split_random_fraction_and_determinism():
    a = split_random(np.zeros(100), 0.8, seed=3)
    assert (a == 0).sum() == 80
    assert np.array_equal(a, split_random(np.zeros(100), 0.8, seed=3))


# --- storage --------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rec = make_recording(200, infractions=[3.0])
    rec.perturb_mask[5:9] = True
    save(rec, tmp_path / "r")
    back = load(tmp_path / "r")
    assert np.array_equal(back.frames, rec.frames)
    assert np.array_equal(back.steer, rec.steer)
    assert np.array_equal(back.infraction_window, rec.infraction_window)
    assert back.content_hash() == rec.content_hash()
    assert back.manifest["n_samples"] == 200


def test_save_load_empty(tmp_path):
    rec = make_recording(0)
    save(rec, tmp_path / "e")
    assert len(load(tmp_path / "e")) == 0


def test_load_truncated_file_names_line(tmp_path):
    save(make_recording(20), tmp_path / "r")
    path = tmp_path / "r" / "samples.jsonl"
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(DatasetParseError, match="line 10"):
        load(tmp_path / "r")


def test_load_ray_count_mismatch(tmp_path):
    save(make_recording(5, rays=31), tmp_path / "r")
    mpath = tmp_path / "r" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["ray_count"] = 32
    mpath.write_text(json.dumps(m))
    with pytest.raises(DatasetIntegrityError):
        load(tmp_path / "r")


def test_load_rejects_off_grid_timestamps(tmp_path):
    rec = make_recording(5)
    rec.t[3] += 0.01
    save(rec, tmp_path / "r")
    with pytest.raises(DatasetIntegrityError):
        load(tmp_path / "r")


def test_shifted_round_trip(tmp_path):
    ds = shift_labels(make_recording(60), 100, stack_size=3)
    save_shifted(ds, tmp_path / "s")
    back = load_shifted(tmp_path / "s")
    assert back.content_hash() == ds.content_hash()
    assert np.array_equal(back.eval_mask, ds.eval_mask)
    assert np.array_equal(back.label_time, ds.label_time)
