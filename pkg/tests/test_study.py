from __future__ import annotations

import json

import numpy as np
import pytest

from speedshift.config import loads_config
from speedshift.dataset import shift_labels
from speedshift.study import (StudyError, delay_split, derive_seed, read_offpolicy_csv,
                              speed_study)

from test_dataset import make_recording


def test_derive_seed_is_stable_and_tag_sensitive():
    assert derive_seed(0, "train", 1) == derive_seed(0, "train", 1)
    seeds = {derive_seed(0, "train", 1), derive_seed(0, "train", 2), derive_seed(1, "train", 1),
             derive_seed(0, "collect", 1)}
    assert len(seeds) == 4
    assert all(0 <= s < 2 ** 32 for s in seeds)


def test_speed_study_layout(tiny_studies, tiny_config):
    root, res, _ = tiny_studies
    out = root / "speed"
    for name in ("offpolicy.csv", "crossspeed.csv", "ood.csv", "ood_frameskip.csv",
                 "speed_study.json", "runtime_speed.json", "track.txt"):
        assert (out / name).exists(), name
    folds = tiny_config.study.folds
    # 2 archs x 2 training speeds x folds x 2 validation speeds
    assert len(res.offpolicy) == 2 * 2 * folds * 2
    assert read_offpolicy_csv(out / "offpolicy.csv")[0].arch == res.offpolicy[0].arch
    t3 = res.table3()
    assert len(t3) == 8
    assert len(res.crossspeed) == 8
    assert len(list((out / "policies").glob("*_fold*.json"))) == 4 * folds
    assert len(list((out / "policies").glob("*_full.json"))) == 4
    meta = json.loads((out / "speed_study.json").read_text())
    assert meta["seed"] == tiny_config.seed
    assert set(meta["full_model_hashes"]) == {"single_slow", "single_fast", "multi_slow",
                                              "multi_fast"}


def test_full_model_epoch_rule(tiny_studies):
    _, res, _ = tiny_studies
    for (arch, name), policy in res.full_models.items():
        best = [res.fold_models[(arch, name, k)].meta["best_epoch"] for k in range(5)]
        assert policy.meta["epochs_run"] == int(round(float(np.mean(best)))) + 1


def test_ood_rows(tiny_studies):
    _, res, _ = tiny_studies
    # multi-frame models: 2 speeds x 5 folds x 3 taps x 2 metrics
    assert len(res.ood) == 60
    assert len(res.frameskip) == 30
    assert {c.speed for c in res.frameskip} == {"slow-frameskip"}


def test_delay_study_layout(tiny_studies, tiny_config):
    root, _, res = tiny_studies
    out = root / "delay"
    for name in ("sweep.csv", "lap_stats.csv", "shift_models.csv", "delay_study.json",
                 "runtime_delay.json"):
        assert (out / name).exists(), name
    sw = tiny_config.sweep
    assert len(res.sweep.cells) == len(sw.shifts) * len(sw.delays) + 1
    assert res.threshold_s == pytest.approx(res.lap_mean + 2 * res.lap_std)
    assert sorted(res.models) == list(sw.shifts)
    assert all((out / "policies" / f"shift{s:+d}.json").exists() for s in sw.shifts)


def test_study_failure_names_step(tmp_path, tiny_config_text):
    cfg = loads_config(tiny_config_text.replace("duration_s = 150", "duration_s = 0.5"))
    with pytest.raises(StudyError) as info:
        speed_study(cfg, tmp_path / "s")
    assert info.value.step == "split"
    assert "too short" in str(info.value)
    # artifacts written before the failure are kept
    assert (tmp_path / "s" / "track.txt").exists()


@pytest.mark.parametrize("name,n_val", [("block", 100), ("random80", 100), ("random", 100)])
def test_delay_split_schemes(name, n_val):
    ds = shift_labels(make_recording(500), 0)
    cfg = loads_config(f"[sweep]\nsplit = {name}\n")
    assign = delay_split(ds, cfg, seed=0)
    assert int(assign.sum()) == n_val
    if name == "block":
        assert np.array_equal(np.flatnonzero(assign), np.arange(400, 500))


def test_delay_split_rejects_unknown_scheme():
    cfg = loads_config("[sweep]\nsplit = period\n")
    with pytest.raises(ValueError):
        delay_split(shift_labels(make_recording(50), 0), cfg, seed=0)
