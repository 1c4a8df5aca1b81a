"""End-to-end study orchestration: the speed study and the delay study.

Each study writes its artifacts into one directory.  Report CSVs hold only
numbers derived from (config, seed); wall-clock runtimes go to a separate
``runtime.json`` so reruns produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from .closedloop import (CrossSpeedCell, SweepReport, cross_speed_eval, run_sweep,
                         write_crossspeed_csv, write_sweep_csv)
from .config import ExperimentConfig, dumps_config
from .dataset import Recording, ShiftedDataset, clean, shift_labels
from .expert import collect_run
from .learner import Policy, PolicySpec, evaluate_offpolicy, save_policy, train
from .ood import OodCell, ood_cells_for_model, synth_fast_by_frameskip, write_ood_csv
from .track import Track, generate_default_track, save_track

ARCHS = ("single", "multi")
SPEED_NAMES = ("slow", "fast")


class StudyError(RuntimeError):
    """A study step failed; ``step`` names it."""

    def __init__(self, step: str, cause: BaseException):
        super().__init__(f"step '{step}' failed: {cause}")
        self.step = step
        self.cause = cause


def derive_seed(seed: int, *tags: int | str) -> int:
    """Independent 32-bit seed for a named sub-task."""
    words = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode("utf-8"))
        else:
            words.append(int(tag) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


class _Steps:
    """Runs named steps, timing them and wrapping failures in :class:`StudyError`."""

    def __init__(self, log=None):
        self.runtimes: dict[str, float] = {}
        self.log = log or (lambda msg: None)

    def __call__(self, name: str, fn, *args, **kwargs):
        self.log(f"[{name}]")
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StudyError:
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the step name
            raise StudyError(name, exc) from exc
        self.runtimes[name] = self.runtimes.get(name, 0.0) + time.perf_counter() - t0
        return out


def build_track(cfg: ExperimentConfig) -> Track:
    return generate_default_track(cfg.track.seed, vehicle=cfg.vehicle, length=cfg.track.length,
                                  width=cfg.track.width)


def policy_spec(cfg: ExperimentConfig, arch: str) -> PolicySpec:
    t = cfg.train
    rays = cfg.sensor.ray_count
    if arch == "single":
        return PolicySpec(rays, 1, t.single_hidden, t.single_norm, t.single_dropout)
    if arch == "multi":
        return PolicySpec(3 * rays, 3, t.multi_hidden, t.multi_norm, t.multi_dropout)
    raise ValueError(f"unknown architecture {arch!r}")


def collect(cfg: ExperimentConfig, track: Track, speed: float, duration: float, seed: int,
            speed_jitter: float = 0.0) -> Recording:
    """Expert recording behind the same base compute delay the models later face."""
    return collect_run(track, cfg.vehicle, cfg.sensor.build(), cfg.expert, speed=speed,
                       duration=duration, seed=seed, speed_jitter=speed_jitter,
                       compute_ms=cfg.pipeline.base_compute_ms)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _common_meta(cfg: ExperimentConfig, track: Track) -> dict:
    return {"seed": cfg.seed, "track_hash": track.content_hash(), "config": dumps_config(cfg)}


# --- speed study ----------------------------------------------------------

@dataclass
class OffPolicyRow:
    arch: str
    trained: str
    fold: int
    val_speed: str
    mae: float
    n: int
    model_hash: str
    dataset_hash: str


@dataclass
class SpeedStudyResult:
    out_dir: Path
    offpolicy: list[OffPolicyRow]
    crossspeed: list[CrossSpeedCell]
    ood: list[OodCell]
    frameskip: list[OodCell]
    fold_models: dict[tuple[str, str, int], Policy] = field(repr=False, default_factory=dict)
    full_models: dict[tuple[str, str], Policy] = field(repr=False, default_factory=dict)
    runtimes: dict[str, float] = field(default_factory=dict)

    def table3(self) -> dict[tuple[str, str, str], float]:
        """Fold-averaged MAE per (arch, trained speed, validation speed)."""
        out: dict[tuple[str, str, str], list[float]] = {}
        for r in self.offpolicy:
            out.setdefault((r.arch, r.trained, r.val_speed), []).append(r.mae)
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def _fold_train(spec: PolicySpec, cfg: ExperimentConfig, train_ds: ShiftedDataset,
                val_ds: ShiftedDataset, seed: int) -> Policy:
    policy, _ = train(spec, train_ds.flat_inputs, train_ds.labels,
                      val_ds.flat_inputs, val_ds.labels, cfg.train.build(seed))
    return policy


def speed_study(cfg: ExperimentConfig, out_dir: str | Path, log=None,
                run_ood: bool = True) -> SpeedStudyResult:
    """Collect slow and fast data, train fold and full models, evaluate off- and on-policy."""
    out = Path(out_dir)
    (out / "policies").mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(parents=True, exist_ok=True)
    st = cfg.study
    seed = cfg.seed
    steps = _Steps(log)
    speeds = {"slow": st.slow_speed, "fast": st.fast_speed}

    track = steps("track", build_track, cfg)
    save_track(track, out / "track.txt")

    recs: dict[str, Recording] = {}
    for name, v in speeds.items():
        raw = steps(f"collect-{name}", collect, cfg, track, v, st.duration_s,
                    derive_seed(seed, "collect", name))
        recs[name] = clean(raw, st.clean_window_s)
        dsmod.save(recs[name], out / "data" / f"{name}")

    datasets: dict[tuple[str, str], ShiftedDataset] = {}
    folds: dict[tuple[str, str], np.ndarray] = {}
    for name in SPEED_NAMES:
        for arch in ARCHS:
            ds = shift_labels(recs[name], 0, stack_size=policy_spec(cfg, arch).stack_size)
            datasets[(arch, name)] = ds
            folds[(arch, name)] = steps("split", dsmod.split_period, ds, st.folds, st.periods)

    rows: list[OffPolicyRow] = []
    fold_models: dict[tuple[str, str, int], Policy] = {}
    best_epochs: dict[tuple[str, str], list[int]] = {}
    for arch in ARCHS:
        spec = policy_spec(cfg, arch)
        for name in SPEED_NAMES:
            novel = SPEED_NAMES[1 - SPEED_NAMES.index(name)]
            ds, assign = datasets[(arch, name)], folds[(arch, name)]
            nds, nassign = datasets[(arch, novel)], folds[(arch, novel)]
            for k in range(st.folds):
                tr_ds, va_ds = dsmod.fold_views(ds, assign, k)
                policy = steps("train-fold", _fold_train, spec, cfg, tr_ds, va_ds,
                               derive_seed(seed, "train", arch, name, k))
                fold_models[(arch, name, k)] = policy
                best_epochs.setdefault((arch, name), []).append(policy.meta["best_epoch"])
                save_policy(policy, out / "policies" / f"{arch}_{name}_fold{k}.json")
                _, nva = dsmod.fold_views(nds, nassign, k)
                for val_name, vds in ((name, va_ds), (novel, nva)):
                    mae, _ = evaluate_offpolicy(policy, vds.flat_inputs, vds.labels, vds.eval_mask)
                    rows.append(OffPolicyRow(arch, name, k, val_name, mae,
                                             int(vds.eval_mask.sum()), policy.content_hash(),
                                             vds.content_hash()))

    # the sixth model sees all data for the fold-average best epoch count
    full_models: dict[tuple[str, str], Policy] = {}
    for arch in ARCHS:
        spec = policy_spec(cfg, arch)
        for name in SPEED_NAMES:
            ds = datasets[(arch, name)]
            epochs = int(round(float(np.mean(best_epochs[(arch, name)])))) + 1
            policy, _ = steps("train-full", train, spec, ds.flat_inputs, ds.labels,
                              config=cfg.train.build(derive_seed(seed, "train", arch, name, "full")),
                              epochs=epochs)
            full_models[(arch, name)] = policy
            save_policy(policy, out / "policies" / f"{arch}_{name}_full.json")

    cells = steps("eval-on", cross_speed_eval, track, cfg.vehicle, full_models, speeds,
                  cfg.pipeline.build(), derive_seed(seed, "onpolicy"), st.onpolicy_laps,
                  cfg.sensor.build())

    ood_cells: list[OodCell] = []
    skip_cells: list[OodCell] = []
    if run_ood:
        ood_cells, skip_cells = steps("ood", _ood_study, cfg, recs, datasets, folds, fold_models)

    res = SpeedStudyResult(out, rows, cells, ood_cells, skip_cells, fold_models, full_models,
                           steps.runtimes)
    write_offpolicy_csv(rows, out / "offpolicy.csv")
    write_crossspeed_csv(cells, out / "crossspeed.csv")
    if run_ood:
        write_ood_csv(ood_cells, out / "ood.csv")
        write_ood_csv(skip_cells, out / "ood_frameskip.csv")
    meta = _common_meta(cfg, track)
    meta.update(study="speed", speeds=speeds,
                recordings={n: {"hash": r.content_hash(), "samples": len(r),
                                "removed_samples": r.manifest.get("removed_samples", 0)}
                            for n, r in recs.items()},
                datasets={f"{a}_{n}": d.content_hash() for (a, n), d in datasets.items()},
                full_model_hashes={f"{a}_{n}": p.content_hash() for (a, n), p in full_models.items()},
                full_model_epochs={f"{a}_{n}": p.meta["epochs_run"] for (a, n), p in full_models.items()})
    _write_json(out / "speed_study.json", meta)
    _write_json(out / "runtime_speed.json", steps.runtimes)
    return res


def _ood_study(cfg: ExperimentConfig, recs, datasets, folds, fold_models):
    """kNN separability for the multi-frame fold models, plus the frame-skip control."""
    st, oc = cfg.study, cfg.ood
    cells, skip = [], []
    for name in SPEED_NAMES:
        novel = SPEED_NAMES[1 - SPEED_NAMES.index(name)]
        ds, assign = datasets[("multi", name)], folds[("multi", name)]
        novel_inputs = datasets[("multi", novel)].flat_inputs
        for k in range(st.folds):
            policy = fold_models[("multi", name, k)]
            tr_ds, va_ds = dsmod.fold_views(ds, assign, k)
            sub_seed = derive_seed(cfg.seed, "ood", name, k)
            cells += ood_cells_for_model(policy, tr_ds.flat_inputs, va_ds.flat_inputs,
                                         novel_inputs, name, k, oc.k, oc.metrics,
                                         max_reference=oc.max_reference, max_query=oc.max_query,
                                         seed=sub_seed)
            if name == "slow":
                synth = synth_fast_by_frameskip(recs["slow"])
                # only stacks made entirely of this fold's validation frames
                val_frames = np.zeros(len(recs["slow"]), dtype=bool)
                val_frames[va_ds.frame_index.ravel()] = True
                keep = val_frames[synth.frame_index].all(axis=1)
                skip += ood_cells_for_model(policy, tr_ds.flat_inputs, va_ds.flat_inputs,
                                            synth.subset(keep).flat_inputs, "slow-frameskip", k,
                                            oc.k, oc.metrics, max_reference=oc.max_reference,
                                            max_query=oc.max_query, seed=sub_seed)
    return cells, skip


def write_offpolicy_csv(rows: list[OffPolicyRow], path: str | Path) -> None:
    _write_csv(Path(path), ["arch", "trained_speed", "fold", "val_speed", "mae", "n",
                            "model_hash", "dataset_hash"],
               [[r.arch, r.trained, r.fold, r.val_speed, f"{r.mae:.6f}", r.n, r.model_hash,
                 r.dataset_hash] for r in rows])


def read_offpolicy_csv(path: str | Path) -> list[OffPolicyRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [OffPolicyRow(r["arch"], r["trained_speed"], int(r["fold"]), r["val_speed"],
                             float(r["mae"]), int(r["n"]), r["model_hash"], r["dataset_hash"])
                for r in csv.DictReader(fh)]


# --- delay study ----------------------------------------------------------

@dataclass
class DelayStudyResult:
    out_dir: Path
    sweep: SweepReport
    lap_mean: float
    lap_std: float
    threshold_s: float
    models: dict[int, Policy] = field(repr=False, default_factory=dict)
    val_mae: dict[int, float] = field(default_factory=dict)
    runtimes: dict[str, float] = field(default_factory=dict)


def delay_split(ds: ShiftedDataset, cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """0 = training, 1 = validation for a shifted dataset."""
    sw = cfg.sweep
    if sw.split == "block":
        return (dsmod.split_block(ds, 5) == 4).astype(np.int64)
    if sw.split in ("random", "random80"):
        return dsmod.split_random(ds, 0.8, seed)
    raise ValueError(f"unknown sweep split {sw.split!r}")


def delay_study(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1,
                log=None) -> DelayStudyResult:
    """One fast recording, one model per label shift, full delay x shift sweep."""
    out = Path(out_dir)
    (out / "policies").mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(parents=True, exist_ok=True)
    sw = cfg.sweep
    seed = cfg.seed
    steps = _Steps(log)
    spec = policy_spec(cfg, "single")

    track = steps("track", build_track, cfg)
    save_track(track, out / "track.txt")
    raw = steps("collect", collect, cfg, track, sw.speed, sw.duration_s,
                derive_seed(seed, "collect", "sweep"), sw.speed_jitter)
    rec = clean(raw, cfg.study.clean_window_s)
    dsmod.save(rec, out / "data" / "fast")
    lap_mean, lap_std = dsmod.lap_statistics(rec)
    threshold = lap_mean + 2.0 * lap_std

    models: dict[int, Policy] = {}
    val_mae: dict[int, float] = {}
    for shift in sw.shifts:
        ds = shift_labels(rec, shift, stack_size=1)
        assign = delay_split(ds, cfg, derive_seed(seed, "split", shift))
        tr_ds, va_ds = ds.subset(assign == 0), ds.subset(assign == 1)
        policy = steps("train", _fold_train, spec, cfg, tr_ds, va_ds,
                       derive_seed(seed, "train", "shift", shift))
        models[shift] = policy
        val_mae[shift] = evaluate_offpolicy(policy, va_ds.flat_inputs, va_ds.labels,
                                            va_ds.eval_mask)[0]
        save_policy(policy, out / "policies" / f"shift{shift:+d}.json")

    extra = [p for p in sw.extra_pairs() if p[0] in models]
    report = steps("sweep", run_sweep, track, cfg.vehicle, models, list(sw.delays),
                   cfg.pipeline.build(), threshold, derive_seed(seed, "sweep"),
                   sw.build_search(), cfg.sensor.build(), jobs, extra)
    write_sweep_csv(report, out / "sweep.csv")
    _write_csv(out / "lap_stats.csv", ["laps", "mean_lap_s", "std_lap_s", "threshold_s"],
               [[len(rec.manifest["lap_times"]), f"{lap_mean:.6f}", f"{lap_std:.6f}",
                 f"{threshold:.6f}"]])
    _write_csv(out / "shift_models.csv", ["shift_ms", "val_mae", "epochs_run", "model_hash"],
               [[s, f"{val_mae[s]:.6f}", models[s].meta["epochs_run"], models[s].content_hash()]
                for s in sorted(models)])
    meta = _common_meta(cfg, track)
    meta.update(study="delay", recording={"hash": rec.content_hash(), "samples": len(rec)},
                threshold_s=threshold, base_compute_ms=cfg.pipeline.base_compute_ms)
    _write_json(out / "delay_study.json", meta)
    _write_json(out / "runtime_delay.json", steps.runtimes)
    return DelayStudyResult(out, report, lap_mean, lap_std, threshold, models, val_mae,
                            steps.runtimes)

