"""Instance matching, confusion counting, F-beta scoring over IoU
thresholds, the composite final score, and leaderboard assembly.

Matching protocol (documented choice, greedy COCO-style): predictions are
visited in descending-score order (ties by input index) and each one
claims the still-unmatched ground truth with the highest IoU, provided
that IoU reaches the threshold; IoU ties go to the lowest ground-truth
id.  Aggregation is micro: true/false positives and false negatives are
summed over the whole dataset before a single F-score is computed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coco import (
    DETECTION,
    Dataset,
    GroundTruthInstance,
    ImageRecord,
    PredictionInstance,
    PredictionSet,
    TASKS,
)
from .errors import EmptyInputError
from .geometry import box_iou, mask_iou, rasterize


def default_threshold_range() -> tuple[float, ...]:
    """The 12 thresholds 0.40, 0.45, ..., 0.95."""
    return tuple(round(0.40 + 0.05 * i, 2) for i in range(12))


@dataclass(frozen=True)
class MetricConfig:
    betas: tuple[float, ...] = (1.0, 2.0)
    headline_threshold: float = 0.50
    thresholds: tuple[float, ...] = field(default_factory=default_threshold_range)
    task: str = DETECTION

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if any(b <= 0 for b in self.betas):
            raise ValueError("betas must be positive")
        ts = self.thresholds
        if any(not (0 < t <= 1) for t in ts) or any(a >= b for a, b in zip(ts, ts[1:])):
            raise ValueError("thresholds must be strictly increasing and in (0, 1]")
        if not (0 < self.headline_threshold <= 1):
            raise ValueError("headline threshold must be in (0, 1]")

    def all_thresholds(self) -> tuple[float, ...]:
        return tuple(sorted(set(self.thresholds) | {self.headline_threshold}))


@dataclass
class Matching:
    pairs: list[tuple[int, int, float]]          # (prediction index, gt id, IoU)
    unmatched_predictions: list[int]
    unmatched_ground_truths: list[int]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def iou_for_task(pred: PredictionInstance, gt: GroundTruthInstance, task: str,
                 image: ImageRecord) -> float:
    """IoU between one prediction and one ground truth: analytic box IoU
    for detection, rasterized-mask IoU at image resolution for segmentation."""
    if task == DETECTION:
        return box_iou(pred.bbox, gt.bbox)
    pm = rasterize(pred.segmentation, image.width, image.height)
    gm = rasterize(gt.segmentation, image.width, image.height)
    return mask_iou(pm, gm)


def _iou_matrix(preds: Sequence[PredictionInstance],
                gts: Sequence[GroundTruthInstance],
                task: str, image: ImageRecord) -> np.ndarray:
    """Rows = predictions (score order), cols = ground truths (id order)."""
    matrix = np.zeros((len(preds), len(gts)), dtype=np.float64)
    if not preds or not gts:
        return matrix
    if task == DETECTION:
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                matrix[i, j] = box_iou(p.bbox, g.bbox)
    else:
        pm = [rasterize(p.segmentation, image.width, image.height) for p in preds]
        gm = [rasterize(g.segmentation, image.width, image.height) for g in gts]
        for i in range(len(preds)):
            for j in range(len(gts)):
                matrix[i, j] = mask_iou(pm[i], gm[j])
    return matrix


def _greedy_pairs(matrix: np.ndarray, tau: float) -> list[tuple[int, int, float]]:
    """Greedy matching on a prediction-by-gt IoU matrix.

    Row order is the visiting order; within a row the first maximal
    column wins (columns are in ascending gt-id order, so ties resolve
    to the lowest id)."""
    n_pred, n_gt = matrix.shape
    taken = np.zeros(n_gt, dtype=bool)
    pairs = []
    for i in range(n_pred):
        best_j, best_iou = -1, 0.0
        for j in range(n_gt):
            if taken[j]:
                continue
            iou = matrix[i, j]
            if iou >= tau and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((i, best_j, float(best_iou)))
    return pairs


def _hungarian_pairs(matrix: np.ndarray, tau: float) -> list[tuple[int, int, float]]:
    from scipy.optimize import linear_sum_assignment

    if matrix.size == 0:
        return []
    gated = np.where(matrix >= tau, matrix, 0.0)
    rows, cols = linear_sum_assignment(gated, maximize=True)
    return [
        (int(i), int(j), float(matrix[i, j]))
        for i, j in zip(rows, cols)
        if matrix[i, j] >= tau
    ]


def match_image(preds: Sequence[PredictionInstance],
                gts: Sequence[GroundTruthInstance],
                tau: float, task: str, image: ImageRecord,
                protocol: str = "greedy") -> Matching:
    """Match one image's predictions to its ground truths at threshold tau.

    ``preds`` must already be in descending-score order.  The optional
    ``hungarian`` protocol exists for sensitivity analysis only; official
    scoring always uses the greedy protocol.
    """
    gts = sorted(gts, key=lambda g: g.id)
    matrix = _iou_matrix(preds, gts, task, image)
    if protocol == "greedy":
        raw = _greedy_pairs(matrix, tau)
    elif protocol == "hungarian":
        raw = _hungarian_pairs(matrix, tau)
    else:
        raise ValueError(f"unknown matching protocol {protocol!r}")
    matched_preds = {i for i, _, _ in raw}
    matched_gts = {j for _, j, _ in raw}
    return Matching(
        pairs=[(i, gts[j].id, iou) for i, j, iou in raw],
        unmatched_predictions=[i for i in range(len(preds)) if i not in matched_preds],
        unmatched_ground_truths=[g.id for j, g in enumerate(gts) if j not in matched_gts],
    )


def confusion_at(dataset: Dataset, preds: PredictionSet, tau: float,
                 task: Optional[str] = None) -> ConfusionCounts:
    """Micro-aggregated confusion counts over every image in the dataset."""
    task = task or preds.task
    total = ConfusionCounts()
    for image in dataset.images:
        m = match_image(preds.instances_for(image.id),
                        dataset.instances_for(image.id), tau, task, image)
        total = total + ConfusionCounts(
            len(m.pairs), len(m.unmatched_predictions), len(m.unmatched_ground_truths)
        )
    return total


def f_beta(counts: ConfusionCounts, beta: float) -> float:
    """F-beta with the total-score convention: any zero denominator
    (in particular tp == 0) yields 0."""
    if counts.tp == 0:
        return 0.0
    precision = counts.tp / (counts.tp + counts.fp)
    recall = counts.tp / (counts.tp + counts.fn)
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


def f_over_range(dataset: Dataset, preds: PredictionSet, config: MetricConfig,
                 beta: float) -> float:
    """Mean F-beta over the config's threshold range."""
    scores = [f_beta(confusion_at(dataset, preds, t, config.task), beta)
              for t in config.thresholds]
    return sum(scores) / len(scores)


def final_score(f1_headline: float, f1_range: float,
                f2_headline: float, f2_range: float) -> float:
    """Composite score: arithmetic mean of the four headline metrics
    (all on the 0-100 scale)."""
    return (f1_headline + f1_range + f2_headline + f2_range) / 4.0


@dataclass
class ThresholdMetrics:
    threshold: float
    counts: ConfusionCounts
    scores: dict[float, float]  # beta -> F


@dataclass
class MetricsReport:
    task: str
    headline_threshold: float
    thresholds: tuple[float, ...]
    per_threshold: list[ThresholdMetrics]
    f1_headline: float     # 0-100 scale
    f1_range: float
    f2_headline: float
    f2_range: float
    final: float
    per_image: dict[int, dict[float, tuple[int, int, int]]]

    def headline(self) -> tuple[float, float, float, float]:
        return (self.f1_headline, self.f1_range, self.f2_headline, self.f2_range)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "headline_threshold": self.headline_threshold,
            "thresholds": list(self.thresholds),
            "per_threshold": [
                {
                    "threshold": tm.threshold,
                    "tp": tm.counts.tp,
                    "fp": tm.counts.fp,
                    "fn": tm.counts.fn,
                    "scores": {f"f{beta:g}": s for beta, s in sorted(tm.scores.items())},
                }
                for tm in self.per_threshold
            ],
            "headline": {
                "f1": self.f1_headline,
                "f1_range": self.f1_range,
                "f2": self.f2_headline,
                "f2_range": self.f2_range,
                "final_score": self.final,
            },
            "per_image": {
                str(image_id): {
                    f"{tau:.2f}": list(counts) for tau, counts in sorted(taus.items())
                }
                for image_id, taus in sorted(self.per_image.items())
            },
        }

    def to_markdown(self, name: str = "submission") -> str:
        pct = self.headline_threshold * 100
        header = (f"| Name | F1[{pct:.0f}] | F1[range] | F2[{pct:.0f}] | F2[range] "
                  "| Final Score |")
        rule = "|---|---|---|---|---|---|"
        row = (f"| {name} | {self.f1_headline:.2f} | {self.f1_range:.2f} "
               f"| {self.f2_headline:.2f} | {self.f2_range:.2f} | {self.final:.2f} |")
        return "\n".join([header, rule, row]) + "\n"


def evaluate(dataset: Dataset, preds: PredictionSet,
             config: Optional[MetricConfig] = None, jobs: int = 1) -> MetricsReport:
    """Score a prediction set against a dataset.

    Per-image matching runs independently (optionally across ``jobs``
    workers); counts are aggregated in dataset image order, so the report
    is bit-identical for any degree of parallelism.
    """
    if config is None:
        config = MetricConfig(task=preds.task)
    if config.task != preds.task:
        raise ValueError(f"config task {config.task!r} != predictions task {preds.task!r}")
    taus = config.all_thresholds()

    def score_image(image: ImageRecord) -> tuple[int, dict[float, tuple[int, int, int]]]:
        gts = sorted(dataset.instances_for(image.id), key=lambda g: g.id)
        ps = preds.instances_for(image.id)
        matrix = _iou_matrix(ps, gts, config.task, image)
        out = {}
        for tau in taus:
            pairs = _greedy_pairs(matrix, tau)
            out[tau] = (len(pairs), len(ps) - len(pairs), len(gts) - len(pairs))
        return image.id, out

    if jobs > 1 and len(dataset.images) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score_image, dataset.images))
    else:
        results = [score_image(image) for image in dataset.images]

    per_image = dict(results)
    totals: dict[float, ConfusionCounts] = {t: ConfusionCounts() for t in taus}
    for image in dataset.images:  # fixed order keeps aggregation deterministic
        for tau, (tp, fp, fn) in per_image[image.id].items():
            totals[tau] = totals[tau] + ConfusionCounts(tp, fp, fn)

    per_threshold = [
        ThresholdMetrics(t, totals[t], {b: f_beta(totals[t], b) for b in config.betas})
        for t in taus
    ]
    by_tau = {tm.threshold: tm for tm in per_threshold}

    def range_mean(beta: float) -> float:
        return sum(by_tau[t].scores[beta] for t in config.thresholds) / len(config.thresholds)

    f1_h = 100.0 * by_tau[config.headline_threshold].scores[1.0]
    f2_h = 100.0 * by_tau[config.headline_threshold].scores[2.0]
    f1_r = 100.0 * range_mean(1.0)
    f2_r = 100.0 * range_mean(2.0)
    return MetricsReport(
        task=config.task,
        headline_threshold=config.headline_threshold,
        thresholds=config.thresholds,
        per_threshold=per_threshold,
        f1_headline=f1_h,
        f1_range=f1_r,
        f2_headline=f2_h,
        f2_range=f2_r,
        final=final_score(f1_h, f1_r, f2_h, f2_r),
        per_image=per_image,
    )


@dataclass
class LeaderboardRow:
    rank: int
    name: str
    f1: float
    f1_range: float
    f2: float
    f2_range: float
    final: float


def leaderboard(entries: Sequence[tuple[str, MetricsReport]]) -> list[LeaderboardRow]:
    """Rank named reports by final score, ties by F2 over the threshold
    range (recall emphasis), then by name."""
    if not entries:
        raise EmptyInputError("leaderboard needs at least one report")
    ordered = sorted(entries, key=lambda e: (-e[1].final, -e[1].f2_range, e[0]))
    return [
        LeaderboardRow(rank, name, r.f1_headline, r.f1_range,
                       r.f2_headline, r.f2_range, r.final)
        for rank, (name, r) in enumerate(ordered, start=1)
    ]


def leaderboard_markdown(rows: Sequence[LeaderboardRow], headline_pct: float = 50) -> str:
    lines = [
        f"| Rank | Team Name | F1[{headline_pct:.0f}] | F1[range] "
        f"| F2[{headline_pct:.0f}] | F2[range] | Final Score |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.rank} | {r.name} | {r.f1:.2f} | {r.f1_range:.2f} "
            f"| {r.f2:.2f} | {r.f2_range:.2f} | {r.final:.2f} |"
        )
    return "\n".join(lines) + "\n"


def leaderboard_csv(rows: Sequence[LeaderboardRow]) -> str:
    lines = ["rank,name,f1,f1_range,f2,f2_range,final_score"]
    for r in rows:
        lines.append(
            f"{r.rank},{r.name},{r.f1:.2f},{r.f1_range:.2f},"
            f"{r.f2:.2f},{r.f2_range:.2f},{r.final:.2f}"
        )
    return "\n".join(lines) + "\n"
