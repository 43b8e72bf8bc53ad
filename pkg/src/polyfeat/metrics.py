"""Top-k accuracy and clip-level macro mean average precision.

Ties are broken deterministically: among equal class scores the lower class
index ranks first; among equal clip scores the lexicographically smaller
clip id ranks first.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ScoredClip:
    clip_id: str
    clip_scores: np.ndarray
    truth: np.ndarray
    n_chunks: int = 1


def class_ranking(scores: np.ndarray) -> np.ndarray:
    """Per-row class indices ordered best first (stable, so lower index wins ties)."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def top_k_accuracy(scores, truth, k: int = 5) -> float:
    """Fraction of rows with at least one true class among the k best scores."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth))
    if scores.shape != truth.shape:
        raise MetricsError(f"scores {scores.shape} and truth {truth.shape} differ in shape")
    if scores.shape[0] == 0:
        raise MetricsError("need at least one item")
    if scores.shape[1] < k:
        raise MetricsError(f"top-{k} accuracy needs at least {k} classes, got {scores.shape[1]}")
    best = class_ranking(scores)[:, :k]
    hits = np.take_along_axis(truth, best, axis=1) > 0
    return float(hits.any(axis=1).mean())


def average_chunk_scores(chunk_scores, clip_ids: Sequence[str], truth=None) -> list[ScoredClip]:
    """Mean of chunk score vectors per clip, in order of first appearance."""
    chunk_scores = np.asarray(chunk_scores, dtype=np.float64)
    if len(clip_ids) != len(chunk_scores):
        raise MetricsError("one clip id per chunk score row is required")
    groups: dict[str, list[int]] = {}
    for i, cid in enumerate(clip_ids):
        groups.setdefault(cid, []).append(i)
    out = []
    for cid, rows in groups.items():
        if not rows:
            raise MetricsError(f"clip {cid} has no chunks")
        t = None if truth is None else np.asarray(truth)[rows[0]]
        out.append(ScoredClip(cid, chunk_scores[rows].mean(axis=0), t, len(rows)))
    return out


def average_precision(scores, positives, clip_ids: Sequence[str]) -> float:
    """AP of one class: mean precision@k over the ranks k of the positive clips."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives) > 0
    if not positives.any():
        raise MetricsError("average precision needs at least one positive")
    ids = np.asarray(clip_ids)
    order = np.lexsort((ids, -scores))
    hits = positives[order]
    ranks = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, truth, clip_ids: Sequence[str]) -> tuple[float, list[float | None]]:
    """Macro mAP over classes that have at least one positive; others report None."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth))
    if scores.shape != truth.shape or scores.shape[0] != len(clip_ids):
        raise MetricsError("scores, truth and clip ids disagree in size")
    per_class: list[float | None] = []
    for c in range(scores.shape[1]):
        if (truth[:, c] > 0).any():
            per_class.append(average_precision(scores[:, c], truth[:, c], clip_ids))
        else:
            per_class.append(None)
    present = [a for a in per_class if a is not None]
    if not present:
        raise MetricsError("no class has a positive clip")
    return float(np.mean(present)), per_class


@dataclass
class MetricsReport:
    top5_chunk: float
    top5_clip: float
    top1_chunk: float
    top1_clip: float
    map_macro: float
    per_class_ap: list = field(default_factory=list)
    class_names: list = field(default_factory=list)
    n_chunks: int = 0
    n_clips: int = 0

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("top5_chunk", self.top5_chunk),
            ("top5_clip", self.top5_clip),
            ("top1_chunk", self.top1_chunk),
            ("top1_clip", self.top1_clip),
            ("map_macro", self.map_macro),
            ("n_chunks", self.n_chunks),
            ("n_clips", self.n_clips),
        ]

    def write(self, out_dir, stem: str) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out_dir / f"{stem}_metrics.csv",
            "json": out_dir / f"{stem}_metrics.json",
            "ap": out_dir / f"{stem}_per_class_ap.csv",
        }
        with paths["csv"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in self.rows():
                w.writerow([k, repr(v) if isinstance(v, float) else v])
        paths["json"].write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        with paths["ap"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_index", "class_name", "ap"])
            for i, ap in enumerate(self.per_class_ap):
                name = self.class_names[i] if i < len(self.class_names) else ""
                w.writerow([i, name, "" if ap is None else repr(ap)])
        return paths


def evaluate(chunk_scores, chunk_truth, clip_ids: Sequence[str], class_names: Sequence[str] = ()) -> MetricsReport:
    chunk_scores = np.asarray(chunk_scores, dtype=np.float64)
    chunk_truth = np.asarray(chunk_truth)
    clips = average_chunk_scores(chunk_scores, clip_ids, chunk_truth)
    clip_scores = np.stack([c.clip_scores for c in clips])
    clip_truth = np.stack([c.truth for c in clips])
    m, per_class = mean_average_precision(clip_scores, clip_truth, [c.clip_id for c in clips])
    return MetricsReport(
        top5_chunk=top_k_accuracy(chunk_scores, chunk_truth, 5),
        top5_clip=top_k_accuracy(clip_scores, clip_truth, 5),
        top1_chunk=top_k_accuracy(chunk_scores, chunk_truth, 1),
        top1_clip=top_k_accuracy(clip_scores, clip_truth, 1),
        map_macro=m,
        per_class_ap=per_class,
        class_names=list(class_names),
        n_chunks=len(chunk_scores),
        n_clips=len(clips),
    )
