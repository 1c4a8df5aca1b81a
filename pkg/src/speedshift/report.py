"""Render study artifacts as CSV tables, a Markdown report and figures.

Layout of an artifact directory::

    <root>/speed/   speed-study outputs (offpolicy.csv, crossspeed.csv, ood*.csv, speed_study.json)
    <root>/delay/   delay-study outputs (sweep.csv, lap_stats.csv, delay_study.json)
    <root>/report/  written here

Passing sweep cells carry a ``*`` marker and unbounded lap times render as
``inf``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closedloop import read_sweep_csv

PASS_MARK = "*"
INF_TEXT = "inf"


class ReportError(RuntimeError):
    pass


@dataclass
class Table:
    name: str
    title: str
    header: list[str]
    rows: list[list[str]]
    notes: list[str] = field(default_factory=list)

    def to_markdown(self) -> str:
        widths = [max(len(str(x)) for x in col) for col in zip(self.header, *self.rows)]
        line = lambda cells: "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"
        out = [f"### {self.title}", "", line(self.header),
               "| " + " | ".join("-" * w for w in widths) + " |"]
        out += [line(r) for r in self.rows]
        out += [""] + [f"{n}" for n in self.notes]
        return "\n".join(out).rstrip() + "\n"

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)


@dataclass
class ReportResult:
    tables: list[Table]
    missing: list[str]
    out_dir: Path
    figures: list[Path] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing


def _read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def fmt_lap(value: float, passes: bool) -> str:
    text = INF_TEXT if not math.isfinite(value) else f"{value:.2f}"
    return text + (PASS_MARK if passes else "")


# --- speed study tables ---------------------------------------------------

def table3(rows: list[dict[str, str]], seed) -> Table:
    groups: dict[tuple[str, str, str], list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["arch"], r["trained_speed"], r["val_speed"])].append(r)
    out = []
    for (arch, trained, val), g in sorted(groups.items()):
        maes = np.array([float(r["mae"]) for r in g])
        out.append([arch, trained, val, f"{maes.mean():.4f}",
                    f"{maes.std(ddof=1) if len(maes) > 1 else 0.0:.4f}", str(len(g)), str(seed),
                    ";".join(r["model_hash"] for r in g)])
    return Table("table3", "Off-policy MAE (fold average)",
                 ["arch", "trained_speed", "val_speed", "mae_mean", "mae_std", "folds", "seed",
                  "model_hashes"], out)


def table4(rows: list[dict[str, str]]) -> Table:
    out = []
    for r in sorted(rows, key=lambda r: (r["model"], r["trained_speed"], r["deploy_speed"])):
        per10 = 10.0 * int(r["infractions"]) / max(int(r["laps"]), 1)
        out.append([r["model"], r["trained_speed"], r["deploy_speed"], f"{per10:g}",
                    r["inside"], r["outside"], r["seed"], r["model_hash"]])
    return Table("table4", "On-policy infractions per 10 laps and wall sides (turn-adjacent)",
                 ["arch", "trained_speed", "deploy_speed", "infractions_per_10_laps", "inside",
                  "outside", "seed", "model_hash"], out)


def ood_table(rows: list[dict[str, str]], title: str, name: str) -> Table:
    groups: dict[tuple[str, str, str], list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["speed"], r["metric"], r["location"])].append(r)
    out = []
    for key, g in sorted(groups.items()):
        mean = lambda col: float(np.mean([float(r[col]) for r in g]))
        out.append([*key, f"{mean('mean_dist_same'):.4f}", f"{mean('mean_dist_novel'):.4f}",
                    f"{mean('auroc'):.4f}", str(len(g))])
    return Table(name, title, ["trained_speed", "metric", "location", "mean_dist_same",
                               "mean_dist_novel", "auroc", "folds"], out)


# --- delay study tables ---------------------------------------------------

def sweep_tables(sweep_path: Path, stats: dict[str, str] | None, base_ms: float,
                 grid_delays: list[int] | None = None) -> list[Table]:
    """Pass grid, lap-time grids and extra cells.

    ``grid_delays`` are the configured sweep delays; without them every delay
    evaluated for all shifts forms a grid row.  Other cells are listed apart.
    """
    threshold = float(stats["threshold_s"]) if stats else math.nan
    rep = read_sweep_csv(sweep_path, threshold, base_ms)
    shifts_all = rep.shifts()
    if grid_delays is None:
        present = {(c.shift_ms, c.added_delay_ms) for c in rep.cells}
        grid_delays = [d for d in rep.delays() if all((s, d) in present for s in shifts_all)]
    shifts_pos = [s for s in shifts_all if s >= 0]

    def grid(shifts, cell_text):
        rows = []
        for d in grid_delays:
            row = [f"{base_ms + d:g}"]
            for s in shifts:
                try:
                    row.append(cell_text(rep.cell(s, d)))
                except KeyError:
                    row.append("")
            rows.append(row)
        return rows

    head = lambda shifts: ["compute_ms"] + [f"shift{s:+d}" for s in shifts]
    notes = [f"Task threshold: {threshold:.3f} s (training mean + 2 sd). "
             f"`{PASS_MARK}` marks passing cells; `{INF_TEXT}` means no safe speed."]
    t5 = Table("table5", "Task pass grid", head(shifts_pos),
               grid(shifts_pos, lambda c: "pass" + PASS_MARK if c.passes_task else "fail"), notes)
    t6 = Table("table6", "Fastest safe lap time (s)", head(shifts_pos),
               grid(shifts_pos, lambda c: fmt_lap(c.fastest_safe_lap_s, c.passes_task)), notes)
    ta = Table("appendix", "Fastest safe lap time including negative shifts (s)", head(shifts_all),
               grid(shifts_all, lambda c: fmt_lap(c.fastest_safe_lap_s, c.passes_task)), notes)
    off_grid = sorted({(c.shift_ms, c.added_delay_ms) for c in rep.cells} -
                      {(s, d) for s in shifts_all for d in grid_delays})
    tables = [t5, t6, ta]
    if off_grid:
        rows = []
        for s, d in off_grid:
            c = rep.cell(s, d)
            rows.append([f"{s:+d}", f"{base_ms + d:g}",
                         f"{1000.0 / max(base_ms + d, 50.0):.2f}",
                         fmt_lap(c.fastest_safe_lap_s, c.passes_task)])
        tables.append(Table("extra_cells", "Additional sweep cells",
                            ["shift_ms", "compute_ms", "decision_hz", "fastest_lap_s"], rows, notes))
    if stats:
        tables.append(Table("lap_stats", "Training-set lap statistics",
                            ["laps", "mean_lap_s", "std_lap_s", "threshold_s"],
                            [[stats["laps"], stats["mean_lap_s"], stats["std_lap_s"],
                              stats["threshold_s"]]]))
    return tables


# --- figures --------------------------------------------------------------

def render_figures(root: Path, out_dir: Path) -> list[Path]:
    """PNG figures for whatever artifacts exist; returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)

    cross = root / "speed" / "crossspeed.csv"
    if cross.exists():
        rows = _read_rows(cross)
        labels = [f"{r['model']}/{r['trained_speed']}\n@{r['deploy_speed']}" for r in rows]
        inside = [int(r["inside"]) for r in rows]
        outside = [int(r["outside"]) for r in rows]
        fig, ax = plt.subplots(figsize=(8, 3.5))
        x = np.arange(len(rows))
        ax.bar(x, inside, label="inside wall")
        ax.bar(x, outside, bottom=inside, label="outside wall")
        ax.set_xticks(x, labels, fontsize=7)
        ax.set_ylabel("turn infractions")
        ax.legend()
        fig.tight_layout()
        path = fig_dir / "infraction_sides.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    sweep = root / "delay" / "sweep.csv"
    if sweep.exists():
        rep = read_sweep_csv(sweep)
        shifts = rep.shifts()
        delays = [d for d in rep.delays() if all(
            any(c.shift_ms == s and c.added_delay_ms == d for c in rep.cells) for s in shifts)]
        grid = np.array([[rep.cell(s, d).fastest_safe_lap_s for s in shifts] for d in delays])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        shown = np.where(np.isfinite(grid), grid, np.nan)
        im = ax.imshow(shown, cmap="viridis_r", aspect="auto")
        for i in range(len(delays)):
            for j in range(len(shifts)):
                v = grid[i, j]
                ax.text(j, i, INF_TEXT if not np.isfinite(v) else f"{v:.1f}", ha="center",
                        va="center", fontsize=7, color="w")
        ax.set_xticks(range(len(shifts)), [f"{s:+d}" for s in shifts])
        ax.set_yticks(range(len(delays)), [f"+{d}" for d in delays])
        ax.set_xlabel("label shift (ms)")
        ax.set_ylabel("added delay (ms)")
        fig.colorbar(im, ax=ax, label="fastest safe lap (s)")
        fig.tight_layout()
        path = fig_dir / "sweep_laps.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    ood = root / "speed" / "ood.csv"
    if ood.exists():
        t = ood_table(_read_rows(ood), "", "")
        fig, ax = plt.subplots(figsize=(8, 3.5))
        labels = [f"{r[0]}\n{r[1][:3]}/{r[2].replace('post_', '')}" for r in t.rows]
        ax.bar(range(len(t.rows)), [float(r[5]) for r in t.rows])
        ax.axhline(0.5, color="k", lw=0.8, ls="--")
        ax.set_xticks(range(len(t.rows)), labels, fontsize=7)
        ax.set_ylabel("AUROC")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        path = fig_dir / "ood_auroc.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


# --- entry point ----------------------------------------------------------

SPEED_FILES = ("offpolicy.csv", "crossspeed.csv", "ood.csv", "ood_frameskip.csv", "speed_study.json")
DELAY_FILES = ("sweep.csv", "lap_stats.csv", "delay_study.json")


def build_report(root: str | Path, figures: bool = True) -> ReportResult:
    """Render every table whose artifacts exist under ``root``.

    Raises :class:`ReportError` if neither study has produced anything.
    """
    root = Path(root)
    speed, delay = root / "speed", root / "delay"
    have_speed = speed.is_dir() and any((speed / f).exists() for f in SPEED_FILES)
    have_delay = delay.is_dir() and any((delay / f).exists() for f in DELAY_FILES)
    if not have_speed and not have_delay:
        raise ReportError(f"no study artifacts under {root}: missing speed study ({speed}) "
                          f"and delay study ({delay})")
    missing = []
    if not have_speed:
        missing.append("speed study")
    if not have_delay:
        missing.append("delay study")
    tables: list[Table] = []
    meta: dict[str, dict] = {}

    if have_speed:
        m = speed / "speed_study.json"
        meta["speed"] = json.loads(m.read_text()) if m.exists() else {}
        seed = meta["speed"].get("seed", "")
        for fname, make in (("offpolicy.csv", lambda rows: table3(rows, seed)),
                            ("crossspeed.csv", table4),
                            ("ood.csv", lambda rows: ood_table(
                                rows, "kNN distance and AUROC (fold average)", "ood")),
                            ("ood_frameskip.csv", lambda rows: ood_table(
                                rows, "Frame-skip control (slow-trained models)", "ood_frameskip"))):
            path = speed / fname
            if path.exists():
                tables.append(make(_read_rows(path)))
            else:
                missing.append(f"speed/{fname}")

    if have_delay:
        m = delay / "delay_study.json"
        meta["delay"] = json.loads(m.read_text()) if m.exists() else {}
        base = float(meta["delay"].get("base_compute_ms", 24.0))
        stats_path = delay / "lap_stats.csv"
        stats = _read_rows(stats_path)[0] if stats_path.exists() else None
        if stats is None:
            missing.append("delay/lap_stats.csv")
        grid_delays = None
        if "config" in meta["delay"]:
            from .config import loads_config

            grid_delays = list(loads_config(meta["delay"]["config"]).sweep.delays)
        if (delay / "sweep.csv").exists():
            tables += sweep_tables(delay / "sweep.csv", stats, base, grid_delays)
        else:
            missing.append("delay/sweep.csv")

    out_dir = root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in tables:
        t.write_csv(out_dir / f"{t.name}.csv")
    md = ["# Study report", ""]
    for study, m in sorted(meta.items()):
        md.append(f"- {study} study: seed {m.get('seed', '?')}, track {m.get('track_hash', '?')}")
    if missing:
        md.append(f"- missing: {', '.join(missing)}")
    md.append("")
    md += [t.to_markdown() for t in tables]
    (out_dir / "report.md").write_text("\n".join(md), encoding="utf-8")
    result = ReportResult(tables, missing, out_dir)
    if figures:
        result.figures = render_figures(root, out_dir)
    return result
