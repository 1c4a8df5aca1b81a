"""Nearest-neighbor embedding distances and AUROC separability of novel-speed data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataset import DatasetError, Recording, ShiftedDataset, shift_labels
from .learner import EMBEDDING_LOCATIONS, Policy, extract_embeddings

METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class ReferenceSet:
    embeddings: np.ndarray
    metric: str = "euclidean"
    location: str = "post_activation"
    source_hash: str = ""

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or not np.all(np.isfinite(emb)):
            raise ValueError("reference embeddings must be a finite 2-D matrix")
        object.__setattr__(self, "embeddings", emb)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return x / safe[:, None], norm > 0


def pairwise_distance(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """Distance matrix between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "euclidean":
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return np.sqrt(np.maximum(d2, 0.0))
    if metric == "cosine":
        ua, nza = _unit_rows(a)
        ub, nzb = _unit_rows(b)
        d = 1.0 - ua @ ub.T
        # zero vectors are orthogonal to everything by convention
        d[~nza, :] = 1.0
        d[:, ~nzb] = 1.0
        return np.clip(d, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}")


def knn_distances(reference: ReferenceSet, queries: np.ndarray, k: int = 5,
                  chunk: int = 1024) -> np.ndarray:
    """Mean distance from every query row to its ``k`` nearest reference rows (exact)."""
    ref = reference.embeddings
    if k > len(ref):
        raise ValueError(f"k={k} exceeds reference size {len(ref)}")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != ref.shape[1]:
        raise ValueError("query dimension does not match reference")
    out = np.empty(len(q))
    for i in range(0, len(q), chunk):
        d = pairwise_distance(q[i:i + chunk], ref, reference.metric)
        part = np.partition(d, k - 1, axis=1)[:, :k] if k < d.shape[1] else d
        out[i:i + chunk] = part.mean(axis=1)
    return out


def knn_distance(reference: ReferenceSet, query: np.ndarray, k: int = 5) -> float:
    return float(knn_distances(reference, np.asarray(query)[None, :], k)[0])


def auroc(scores_negative, scores_positive) -> float:
    """Probability that a positive scores above a negative, ties counting one half."""
    neg = np.asarray(scores_negative, dtype=np.float64).ravel()
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    if len(neg) == 0 or len(pos) == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = rankdata(np.concatenate([neg, pos]))  # average ranks handle ties
    r_pos = ranks[len(neg):].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def auroc_bruteforce(scores_negative, scores_positive) -> float:
    """Pair-counting reference implementation of :func:`auroc`."""
    wins = 0.0
    for p in scores_positive:
        for n in scores_negative:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(scores_positive) * len(scores_negative))


def synth_fast_by_frameskip(slow: Recording, shift_ms: int = 0) -> ShiftedDataset:
    """3-frame stacks from frames (i-4, i-2, i) of a slow recording, labelled at i."""
    if len(slow) < 5:
        raise DatasetError("recording too short for frame skipping")
    ds = shift_labels(slow, shift_ms, stack_size=3, frame_stride=2)
    ds.provenance["synthetic"] = "frameskip"
    return ds


@dataclass(frozen=True)
class OodCell:
    speed: str
    metric: str
    location: str
    fold: int
    mean_dist_same: float
    mean_dist_novel: float
    auroc: float


def ood_cells_for_model(policy: Policy, train_inputs: np.ndarray, same_inputs: np.ndarray,
                        novel_inputs: np.ndarray, speed: str, fold: int, k: int = 5,
                        metrics=METRICS, locations=None, max_reference: int | None = None,
                        max_query: int | None = None, seed: int = 0) -> list[OodCell]:
    """Distances and AUROC for one model across every (metric, location) pair.

    ``max_reference`` and ``max_query`` subsample (seeded, without
    replacement) to bound the cost of the exact search.
    """
    rng = np.random.default_rng(seed)

    def sub(x, cap):
        if cap is None or len(x) <= cap:
            return x
        return x[np.sort(rng.choice(len(x), cap, replace=False))]

    train_inputs = sub(train_inputs, max_reference)
    same_inputs = sub(same_inputs, max_query)
    novel_inputs = sub(novel_inputs, max_query)
    locs = locations or [l for l in EMBEDDING_LOCATIONS
                         if l != "post_norm" or policy.spec.use_norm]
    cells = []
    for loc in locs:
        ref_emb = extract_embeddings(policy, train_inputs, loc)
        same_emb = extract_embeddings(policy, same_inputs, loc)
        novel_emb = extract_embeddings(policy, novel_inputs, loc)
        for metric in metrics:
            ref = ReferenceSet(ref_emb, metric, loc)
            d_same = knn_distances(ref, same_emb, k)
            d_novel = knn_distances(ref, novel_emb, k)
            cells.append(OodCell(speed, metric, loc, fold, float(d_same.mean()),
                                 float(d_novel.mean()), auroc(d_same, d_novel)))
    return cells


def aggregate(cells: list[OodCell]) -> dict[tuple[str, str, str], dict[str, float]]:
    """Fold-averaged distances and AUROC per (speed, metric, location)."""
    groups: dict[tuple[str, str, str], list[OodCell]] = {}
    for c in cells:
        groups.setdefault((c.speed, c.metric, c.location), []).append(c)
    return {key: {"mean_dist_same": float(np.mean([c.mean_dist_same for c in g])),
                  "mean_dist_novel": float(np.mean([c.mean_dist_novel for c in g])),
                  "auroc": float(np.mean([c.auroc for c in g])),
                  "folds": len(g)}
            for key, g in sorted(groups.items())}


def write_ood_csv(cells: list[OodCell], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["speed", "metric", "location", "fold", "mean_dist_same", "mean_dist_novel",
                    "auroc"])
        for c in cells:
            w.writerow([c.speed, c.metric, c.location, c.fold, f"{c.mean_dist_same:.6f}",
                        f"{c.mean_dist_novel:.6f}", f"{c.auroc:.6f}"])
