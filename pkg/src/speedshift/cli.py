"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 study failure,
4 partial report.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE, EXIT_PARTIAL = 0, 2, 3, 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _load_cfg(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _track(args, cfg):
    from .study import build_track
    from .track import load_track

    if getattr(args, "track", None):
        return load_track(args.track)
    return build_track(cfg)


# --- subcommands ----------------------------------------------------------

def cmd_track_gen(args, cfg) -> int:
    from .track import save_track

    track = _track(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_track(track, out / "track.txt")
    print(f"track {track.content_hash()} length {track.total_length:.3f} m -> {out / 'track.txt'}")
    return EXIT_OK


def cmd_collect(args, cfg) -> int:
    from .dataset import clean, save
    from .study import collect, derive_seed

    track = _track(args, cfg)
    rec = collect(cfg, track, args.speed, args.duration, derive_seed(cfg.seed, "collect"),
                  args.jitter)
    if not args.no_clean:
        window = cfg.study.clean_window_s if args.clean_window_s is None else args.clean_window_s
        rec = clean(rec, window)
    path = save(rec, args.out)
    print(f"{len(rec)} samples, {len(rec.manifest['lap_times'])} laps -> {path}")
    return EXIT_OK


def cmd_shift(args, cfg) -> int:
    from .dataset import load, save_shifted, shift_labels

    ds = shift_labels(load(args.data), args.shift, args.stack, args.stride)
    path = save_shifted(ds, args.out)
    print(f"{len(ds)} pairs (shift {args.shift} ms, dropped {ds.provenance['dropped_pairs']}) -> {path}")
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    from .dataset import load_shifted, split_block, split_period, split_random

    ds = load_shifted(args.data)
    if args.scheme == "block":
        assign = split_block(ds, args.folds)
    elif args.scheme == "period":
        assign = split_period(ds, args.folds, args.periods)
    else:
        assign = split_random(ds, 0.8, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"scheme": args.scheme, "source_hash": ds.content_hash(),
                               "assignment": assign.tolist()}) + "\n", encoding="utf-8")
    counts = {int(k): int(v) for k, v in zip(*np.unique(assign, return_counts=True))}
    print(f"fold sizes {counts} -> {out}")
    return EXIT_OK


def _split_views(ds, split_path: str | None, fold: int):
    from .dataset import DatasetIntegrityError, fold_views

    if not split_path:
        return ds, None
    meta = json.loads(Path(split_path).read_text(encoding="utf-8"))
    if meta["source_hash"] != ds.content_hash():
        raise DatasetIntegrityError("split file was made for a different dataset")
    return fold_views(ds, np.asarray(meta["assignment"]), fold)


def cmd_train(args, cfg) -> int:
    from .dataset import load_shifted
    from .learner import save_policy, train
    from .study import derive_seed, policy_spec

    ds = load_shifted(args.data)
    tr, va = _split_views(ds, args.split, args.fold)
    spec = policy_spec(cfg, args.arch)
    if spec.stack_size != ds.stack_size:
        raise ValueError(f"{args.arch} model needs {spec.stack_size}-frame stacks, "
                         f"data has {ds.stack_size}")
    tcfg = cfg.train.build(derive_seed(cfg.seed, "train", args.arch, args.fold))
    policy, hist = train(spec, tr.flat_inputs, tr.labels,
                         None if va is None else va.flat_inputs,
                         None if va is None else va.labels, tcfg, epochs=args.epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_policy(policy, out)
    print(f"trained {len(hist.train_loss)} epochs (best {hist.best_epoch}) "
          f"{policy.content_hash()} -> {out}")
    return EXIT_OK


def cmd_eval_off(args, cfg) -> int:
    from .dataset import load_shifted
    from .learner import evaluate_offpolicy, load_policy

    policy = load_policy(args.policy)
    ds = load_shifted(args.data)
    _, va = _split_views(ds, args.split, args.fold)
    ds = va if va is not None else ds
    mae, _ = evaluate_offpolicy(policy, ds.flat_inputs, ds.labels, ds.eval_mask)
    print(json.dumps({"mae": mae, "n": int(ds.eval_mask.sum()), "model": policy.content_hash(),
                      "dataset": ds.content_hash()}))
    return EXIT_OK


def cmd_eval_on(args, cfg) -> int:
    from .closedloop import run_laps, write_trace
    from .learner import load_policy

    policy = load_policy(args.policy)
    track = _track(args, cfg)
    pipe = cfg.pipeline.build(args.speed, args.delay, cfg.sensor.capture_hz)
    rep = run_laps(track, cfg.vehicle, policy, pipe, args.laps, cfg.seed, cfg.sensor.build(),
                   trace=bool(args.trace))
    if args.trace:
        write_trace(rep, args.trace)
    print(json.dumps({"laps": rep.laps_completed, "infractions": rep.infractions,
                      "walls": rep.wall_counts(), "lap_times": rep.lap_times,
                      "belatedness_m": rep.mean_spatial_belatedness}))
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    from .closedloop import run_sweep, write_sweep_csv
    from .dataset import lap_statistics, load
    from .learner import load_policy
    from .study import derive_seed

    shifts = args.shifts or cfg.sweep.shifts
    delays = args.delays or cfg.sweep.delays
    models = {s: load_policy(Path(args.models) / f"shift{s:+d}.json") for s in shifts}
    if args.threshold is not None:
        threshold = args.threshold
    elif args.data:
        mean, std = lap_statistics(load(args.data))
        threshold = mean + 2.0 * std
    else:
        raise ValueError("sweep needs --threshold or --data to derive the task threshold")
    track = _track(args, cfg)
    extra = [p for p in cfg.sweep.extra_pairs() if p[0] in models]
    rep = run_sweep(track, cfg.vehicle, models, list(delays), cfg.pipeline.build(), threshold,
                    derive_seed(cfg.seed, "sweep"), cfg.sweep.build_search(), cfg.sensor.build(),
                    args.jobs, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rep, out / "sweep.csv")
    print(f"{len(rep.cells)} cells, threshold {threshold:.3f} s -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_ood(args, cfg) -> int:
    from .dataset import load, shift_labels, split_period
    from .learner import load_policy
    from .study import _ood_study

    recs = {"slow": load(args.slow), "fast": load(args.fast)}
    datasets, folds, models = {}, {}, {}
    for name, rec in recs.items():
        ds = shift_labels(rec, 0, stack_size=3)
        datasets[("multi", name)] = ds
        folds[("multi", name)] = split_period(ds, cfg.study.folds, cfg.study.periods)
        for k in range(cfg.study.folds):
            models[("multi", name, k)] = load_policy(Path(args.models) / f"multi_{name}_fold{k}.json")
    from .ood import write_ood_csv

    cells, skip = _ood_study(cfg, recs, datasets, folds, models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ood_csv(cells, out / "ood.csv")
    write_ood_csv(skip, out / "ood_frameskip.csv")
    print(f"{len(cells)} cells -> {out / 'ood.csv'}")
    return EXIT_OK


def cmd_speed_study(args, cfg) -> int:
    from .study import speed_study

    speed_study(cfg, Path(args.out) / "speed", log=_log)
    print(f"speed study -> {Path(args.out) / 'speed'}")
    return EXIT_OK


def cmd_delay_study(args, cfg) -> int:
    from .study import delay_study

    res = delay_study(cfg, Path(args.out) / "delay", jobs=args.jobs, log=_log)
    print(f"delay study (threshold {res.threshold_s:.3f} s) -> {Path(args.out) / 'delay'}")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    from .report import ReportError, build_report

    root = Path(args.artifacts or args.out)
    try:
        res = build_report(root, figures=not args.no_figures)
    except ReportError as exc:
        _log(f"error: {exc}")
        return EXIT_FAILURE
    print((res.out_dir / "report.md").read_text(encoding="utf-8"))
    if res.missing:
        _log(f"partial report; missing: {', '.join(res.missing)}")
        return EXIT_PARTIAL
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without clobbering earlier values
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=dflt(None), help="sectioned key=value config file")
        g.add_argument("--seed", type=int, default=dflt(None),
                       help="global seed (overrides the config)")
        g.add_argument("--out", default=dflt("artifacts"), help="output path")
        g.add_argument("--jobs", type=int, default=dflt(1), help="worker processes for sweep cells")
        return g

    common = global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="speedshift", parents=[global_flags(suppress=False)],
                                description="Driving-speed shift and label-shift delay studies.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, argument_default=argparse.SUPPRESS)
        sp.set_defaults(func=fn)
        return sp

    sp = add("track-gen", cmd_track_gen, "generate and save the default track")
    sp.add_argument("--track", default=None, help=argparse.SUPPRESS)

    sp = add("collect", cmd_collect, "record expert driving")
    sp.add_argument("--speed", type=float, required=True)
    sp.add_argument("--duration", type=float, default=1000.0)
    sp.add_argument("--jitter", type=float, default=0.0, help="relative per-lap speed sd")
    sp.add_argument("--no-clean", action="store_true", default=False)
    sp.add_argument("--clean-window-s", type=float, default=None,
                    help="seconds dropped before each infraction")
    sp.add_argument("--track", default=None, help="saved track file")

    sp = add("shift", cmd_shift, "build a label-shifted dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--shift-ms", "--shift", dest="shift", type=int, default=0)
    sp.add_argument("--stack", type=int, default=1)
    sp.add_argument("--stride", type=int, default=1)

    sp = add("split", cmd_split, "assign folds to a shifted dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--scheme", choices=("block", "period", "random"), default="period")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--periods", type=int, default=10)

    sp = add("train", cmd_train, "train one policy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--arch", choices=("single", "multi"), default="single")
    sp.add_argument("--split", default=None, help="fold file from `split`")
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=None, help="fixed epochs when no split")

    sp = add("eval-off", cmd_eval_off, "off-policy MAE of a policy")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--fold", type=int, default=0)

    sp = add("eval-on", cmd_eval_on, "closed-loop laps with a policy")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--speed", type=float, required=True)
    sp.add_argument("--laps", type=int, default=10)
    sp.add_argument("--delay", type=float, default=0.0, help="added compute delay (ms)")
    sp.add_argument("--trace", default=None, help="write a JSONL trace here")
    sp.add_argument("--track", default=None)

    sp = add("sweep", cmd_sweep, "delay x label-shift sweep")
    sp.add_argument("--models", required=True, help="directory of shift<+ms>.json policies")
    sp.add_argument("--shifts", type=_int_list, default=None)
    sp.add_argument("--delays", type=_int_list, default=None)
    sp.add_argument("--threshold", type=float, default=None, help="task threshold (s)")
    sp.add_argument("--data", default=None, help="training recording for the threshold")
    sp.add_argument("--track", default=None)

    sp = add("ood", cmd_ood, "kNN embedding separability")
    sp.add_argument("--models", required=True, help="speed-study policies directory")
    sp.add_argument("--slow", required=True)
    sp.add_argument("--fast", required=True)

    add("speed-study", cmd_speed_study, "full speed study into <out>/speed")
    add("delay-study", cmd_delay_study, "full delay study into <out>/delay")
    sp = add("report", cmd_report, "render tables from <out>")
    sp.add_argument("artifacts", nargs="?", default=None)
    sp.add_argument("--no-figures", action="store_true", default=False)
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError
    from .study import StudyError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = _load_cfg(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except StudyError as exc:
        _log(f"study failed: {exc}")
        return EXIT_FAILURE
    except (ValueError, OSError, RuntimeError) as exc:
        _log(f"{args.command} failed: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
