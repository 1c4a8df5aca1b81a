"""Recordings, cleaning, label shifting, fold splitting and storage.

A :class:`Recording` is stored column-wise (one numpy array per field) since
recordings run to tens of thousands of samples.  On disk it is a directory
holding ``manifest.json`` and ``samples.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHIFT_STEP_MS = 50
STANDARD_SHIFTS_MS = (-100, -50, 0, 50, 100, 150, 200)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


class DatasetParseError(DatasetError):
    pass


class DatasetIntegrityError(DatasetError):
    pass


@dataclass(frozen=True)
class Sample:
    t: float
    frame: np.ndarray
    steer: float
    speed: float
    lap: int
    s_coord: float
    infraction_window: bool
    perturb_mask: bool


@dataclass
class Recording:
    t: np.ndarray
    frames: np.ndarray
    steer: np.ndarray
    speed: np.ndarray
    lap: np.ndarray
    s_coord: np.ndarray
    infraction_window: np.ndarray
    perturb_mask: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.float64)
        frames = np.asarray(self.frames, dtype=np.float64)
        width = frames.shape[-1] if frames.ndim == 2 else int(self.manifest.get("ray_count", 0))
        self.frames = frames.reshape(len(self.t), width)
        self.steer = np.asarray(self.steer, dtype=np.float64)
        self.speed = np.asarray(self.speed, dtype=np.float64)
        self.lap = np.asarray(self.lap, dtype=np.int64)
        self.s_coord = np.asarray(self.s_coord, dtype=np.float64)
        self.infraction_window = np.asarray(self.infraction_window, dtype=bool)
        self.perturb_mask = np.asarray(self.perturb_mask, dtype=bool)
        n = len(self.t)
        for name in ("steer", "speed", "lap", "s_coord", "infraction_window", "perturb_mask"):
            if len(getattr(self, name)) != n:
                raise DatasetIntegrityError(f"column {name} has wrong length")
        if n and np.any(np.abs(self.steer) > 1.0):
            raise DatasetIntegrityError("steering labels must lie in [-1, 1]")
        if n and np.any(self.speed < 0):
            raise DatasetIntegrityError("speed must be non-negative")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Sample:
        return Sample(float(self.t[i]), self.frames[i], float(self.steer[i]), float(self.speed[i]),
                      int(self.lap[i]), float(self.s_coord[i]), bool(self.infraction_window[i]),
                      bool(self.perturb_mask[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def capture_hz(self) -> float:
        return float(self.manifest.get("capture_hz", 20.0))

    @property
    def ray_count(self) -> int:
        return int(self.frames.shape[1]) if len(self) else int(self.manifest.get("ray_count", 0))

    def subset(self, keep: np.ndarray, **manifest_updates) -> "Recording":
        manifest = dict(self.manifest, **manifest_updates)
        return Recording(self.t[keep], self.frames[keep], self.steer[keep], self.speed[keep],
                         self.lap[keep], self.s_coord[keep], self.infraction_window[keep],
                         self.perturb_mask[keep], manifest)

    def tick_index(self) -> np.ndarray:
        """Integer capture tick of every sample (time in units of the capture period)."""
        return np.rint(self.t * self.capture_hz).astype(np.int64)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.t, self.frames, self.steer, self.speed, self.lap, self.s_coord,
                    self.infraction_window, self.perturb_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def equals(self, other: "Recording") -> bool:
        cols = ("t", "frames", "steer", "speed", "lap", "s_coord", "infraction_window",
                "perturb_mask")
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in cols) and \
            self.manifest == other.manifest


@dataclass
class ShiftedDataset:
    """Frame stacks paired with (possibly time-shifted) steering labels.

    ``frame_index`` holds, per pair, the recording indices of the stacked
    frames (oldest first); ``label_index`` the recording index of the label.
    """

    inputs: np.ndarray  # (n, stack_size, ray_count)
    labels: np.ndarray
    shift_ms: int
    frame_index: np.ndarray  # (n, stack_size)
    label_index: np.ndarray
    frame_time: np.ndarray
    label_time: np.ndarray
    eval_mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def stack_size(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(len(self.inputs), -1)

    def subset(self, keep) -> "ShiftedDataset":
        return ShiftedDataset(self.inputs[keep], self.labels[keep], self.shift_ms,
                              self.frame_index[keep], self.label_index[keep],
                              self.frame_time[keep], self.label_time[keep], self.eval_mask[keep],
                              dict(self.provenance))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.inputs, self.labels, self.frame_index, self.label_index):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.shift_ms).encode())
        return h.hexdigest()[:16]


# --- transforms -----------------------------------------------------------

def clean(recording: Recording, window_before_infraction: float = 5.0,
          window_after_infraction: float = 1.0) -> Recording:
    """Drop samples around every infraction mark and renumber laps."""
    marks = recording.t[recording.infraction_window]
    if len(marks) == 0:
        return recording
    drop = np.zeros(len(recording), dtype=bool)
    eps = 1e-9
    for m in marks:
        drop |= (recording.t >= m - window_before_infraction - eps) & \
                (recording.t <= m + window_after_infraction + eps)
    keep = ~drop
    out = recording.subset(keep, removed_samples=int(drop.sum()) +
                           int(recording.manifest.get("removed_samples", 0)),
                           cleaned=True)
    # laps renumbered densely in order of appearance
    if len(out):
        _, inv = np.unique(out.lap, return_inverse=True)
        out.lap = inv.astype(np.int64)
    return out


def _contiguous_runs(ticks: np.ndarray) -> np.ndarray:
    """Run id per sample; a new run starts wherever ticks are not consecutive."""
    if len(ticks) == 0:
        return np.zeros(0, dtype=np.int64)
    breaks = np.concatenate([[0], (np.diff(ticks) != 1).astype(np.int64)])
    return np.cumsum(breaks)


def shift_labels(recording: Recording, shift_ms: int, stack_size: int = 1,
                 frame_stride: int = 1) -> ShiftedDataset:
    """Pair each frame (stack) with the label recorded ``shift_ms`` after its newest frame.

    Pairs whose label or any stacked frame falls outside the recording or
    across a gap left by cleaning are dropped.  ``frame_stride`` spaces the
    stacked frames that many ticks apart (2 synthesizes doubled speed).
    """
    if shift_ms % SHIFT_STEP_MS != 0:
        raise DatasetError(f"shift_ms must be a multiple of {SHIFT_STEP_MS}, got {shift_ms}")
    period_ms = 1000.0 / recording.capture_hz
    if abs(period_ms - SHIFT_STEP_MS) > 1e-9:
        raise DatasetError("label shifting assumes a 20 Hz recording")
    offset = shift_ms // SHIFT_STEP_MS
    n = len(recording)
    ticks = recording.tick_index()
    runs = _contiguous_runs(ticks)
    span = (stack_size - 1) * frame_stride
    idx = np.arange(n)
    newest = idx
    label = idx + offset
    oldest = idx - span
    ok = (label >= 0) & (label < n) & (oldest >= 0)
    newest, label, oldest = newest[ok], label[ok], oldest[ok]
    same_run = (runs[label] == runs[newest]) & (runs[oldest] == runs[newest])
    newest, label, oldest = newest[same_run], label[same_run], oldest[same_run]

    frame_index = np.stack([newest - (stack_size - 1 - j) * frame_stride
                            for j in range(stack_size)], axis=1)
    inputs = recording.frames[frame_index]
    eval_mask = ~(recording.perturb_mask[frame_index].any(axis=1) |
                  recording.perturb_mask[label])
    prov = {
        "source_hash": recording.content_hash(),
        "shift_ms": int(shift_ms),
        "stack_size": int(stack_size),
        "frame_stride": int(frame_stride),
        "dropped_pairs": int(n - len(newest)),
        "speed_setpoint": recording.manifest.get("speed_setpoint"),
    }
    return ShiftedDataset(inputs, recording.steer[label].copy(), int(shift_ms), frame_index,
                          label, recording.t[newest], recording.t[label], eval_mask, prov)


def split_block(dataset, folds: int = 5, min_per_fold: int = 1) -> np.ndarray:
    """Fold id per sample: ``folds`` contiguous blocks, remainder going to the first blocks."""
    n = len(dataset)
    if folds < 2 or n < folds * min_per_fold:
        raise DatasetError(f"need at least {folds * min_per_fold} samples for {folds} folds")
    base, rem = divmod(n, folds)
    sizes = [base + (1 if k < rem else 0) for k in range(folds)]
    return np.repeat(np.arange(folds), sizes)


def split_period(dataset: ShiftedDataset, folds: int = 5, periods: int = 10) -> np.ndarray:
    """Fold id per sample spread over ``periods`` time periods; -1 marks dropped samples.

    Every period is cut into ``folds`` contiguous slices assigned to folds
    0..folds-1.  Slices are laid over recording indices so that a stacked
    sample is kept only when all of its frames fall in one slice; no frame
    can then be shared between training and validation stacks.
    """
    if periods < folds:
        raise DatasetError("periods must be at least the number of folds")
    fi = dataset.frame_index
    lo, hi = int(fi.min()), int(fi.max()) + 1
    span = hi - lo
    if span < periods * folds:
        raise DatasetError("dataset too short for the requested periods and folds")
    n_slices = periods * folds
    # slice id of each recording index, boundaries spread evenly
    edges = lo + np.floor(np.arange(n_slices + 1) * span / n_slices).astype(np.int64)
    slice_of_frame = np.searchsorted(edges, fi, side="right") - 1
    same = np.all(slice_of_frame == slice_of_frame[:, :1], axis=1)
    fold = slice_of_frame[:, -1] % folds
    return np.where(same, fold, -1)


def split_random(dataset, train_fraction: float = 0.8, seed: int = 0) -> np.ndarray:
    """0 for training, 1 for validation, by seeded random permutation."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    out = np.ones(n, dtype=np.int64)
    out[order[: int(round(train_fraction * n))]] = 0
    return out


def fold_views(dataset: ShiftedDataset, assignment: np.ndarray, fold: int):
    """(train, validation) subsets for one fold; dropped samples (-1) go to neither."""
    val = assignment == fold
    train = (assignment >= 0) & ~val
    return dataset.subset(train), dataset.subset(val)


def lap_statistics(recording: Recording) -> tuple[float, float]:
    """Mean and standard deviation of recorded lap times (complete laps only)."""
    times = recording.manifest.get("lap_times") or []
    if not times:
        raise DatasetError("recording has no complete laps")
    arr = np.asarray(times, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


# --- storage --------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save(recording: Recording, path: str | Path) -> Path:
    """Write ``manifest.json`` and ``samples.jsonl`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(recording.manifest, n_samples=len(recording), ray_count=recording.ray_count)
    manifest.setdefault("capture_hz", 20.0)
    lines = []
    for i in range(len(recording)):
        frame = ",".join(_fmt(v) for v in recording.frames[i])
        lines.append(
            '{"t":%s,"frame":[%s],"steer":%s,"speed":%s,"lap":%d,"s":%s,'
            '"infraction_window":%s,"perturb_mask":%s}' % (
                _fmt(recording.t[i]), frame, _fmt(recording.steer[i]), _fmt(recording.speed[i]),
                int(recording.lap[i]), _fmt(recording.s_coord[i]),
                "true" if recording.infraction_window[i] else "false",
                "true" if recording.perturb_mask[i] else "false"))
    tmp = path / "samples.jsonl.tmp"
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    tmp.replace(path / "samples.jsonl")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return path


_FIELDS = ("t", "frame", "steer", "speed", "lap", "s", "infraction_window", "perturb_mask")


def load(path: str | Path) -> Recording:
    """Read a recording directory; raises on any malformed or inconsistent content."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"manifest.json: line {exc.lineno}: {exc.msg}") from None
    ray_count = int(manifest.get("ray_count", -1))
    cols: dict[str, list] = {k: [] for k in _FIELDS}
    with open(path / "samples.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"samples.jsonl: line {lineno}: {exc.msg}") from None
            missing = [k for k in _FIELDS if k not in rec]
            if missing:
                raise DatasetParseError(f"samples.jsonl: line {lineno}: missing {missing}")
            if ray_count >= 0 and len(rec["frame"]) != ray_count:
                raise DatasetIntegrityError(
                    f"samples.jsonl: line {lineno}: {len(rec['frame'])} rays, manifest says {ray_count}")
            for k in _FIELDS:
                cols[k].append(rec[k])
    n = len(cols["t"])
    if "n_samples" in manifest and int(manifest["n_samples"]) != n:
        raise DatasetIntegrityError(f"manifest lists {manifest['n_samples']} samples, file has {n}")
    frames = np.array(cols["frame"], dtype=np.float64).reshape(n, max(ray_count, 0))
    rec = Recording(cols["t"], frames, cols["steer"], cols["speed"], cols["lap"], cols["s"],
                    cols["infraction_window"], cols["perturb_mask"], manifest)
    if n > 1:
        hz = float(manifest.get("capture_hz", 20.0))
        gaps = np.diff(rec.t) * hz
        if np.any(gaps < 0.5) or np.any(np.abs(gaps - np.rint(gaps)) > 1e-6):
            raise DatasetIntegrityError(f"timestamps are not on the {hz} Hz grid")
    return rec


def save_shifted(dataset: ShiftedDataset, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.provenance, n_pairs=len(dataset), shift_ms=dataset.shift_ms,
                    stack_size=dataset.stack_size, ray_count=int(dataset.inputs.shape[2]))
    lines = []
    for i in range(len(dataset)):
        frames = ",".join("[" + ",".join(_fmt(v) for v in f) + "]" for f in dataset.inputs[i])
        lines.append('{"frames":[%s],"label":%s,"frame_index":[%s],"label_index":%d,'
                     '"t_frame":%s,"t_label":%s,"eval":%s}' % (
                         frames, _fmt(dataset.labels[i]),
                         ",".join(str(int(v)) for v in dataset.frame_index[i]),
                         int(dataset.label_index[i]), _fmt(dataset.frame_time[i]),
                         _fmt(dataset.label_time[i]), "true" if dataset.eval_mask[i] else "false"))
    (path / "pairs.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return path


def load_shifted(path: str | Path) -> ShiftedDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    rows = []
    with open(path / "pairs.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DatasetParseError(f"pairs.jsonl: line {lineno}: {exc.msg}") from None
    if len(rows) != int(manifest["n_pairs"]):
        raise DatasetIntegrityError("pair count does not match manifest")
    k, r = int(manifest["stack_size"]), int(manifest["ray_count"])
    return ShiftedDataset(
        np.array([row["frames"] for row in rows], dtype=np.float64).reshape(len(rows), k, r),
        np.array([row["label"] for row in rows], dtype=np.float64),
        int(manifest["shift_ms"]),
        np.array([row["frame_index"] for row in rows], dtype=np.int64).reshape(len(rows), k),
        np.array([row["label_index"] for row in rows], dtype=np.int64),
        np.array([row["t_frame"] for row in rows], dtype=np.float64),
        np.array([row["t_label"] for row in rows], dtype=np.float64),
        np.array([row["eval"] for row in rows], dtype=bool),
        {key: v for key, v in manifest.items() if key not in ("n_pairs",)},
    )
