"""Rule-based rewards: format, object, temporal and spatial, plus their weighted sum."""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from avground.embeddings import (
    DEFAULT_STOPWORDS,
    EmbeddingTable,
    OutOfVocabulary,
    cosine_similarity,
    name_similarity,
)
from avground.grammar import (
    BoundingBox,
    FormatError,
    ObjectTrack,
    StructuredAnswer,
    TaskKind,
    TimeInterval,
    check_format,
    parse_answer,
)
from avground.records import GroundTruthRecord

__all__ = [
    "ContentScores",
    "ObjectMatch",
    "RewardBreakdown",
    "RewardConfig",
    "RewardWeights",
    "WEIGHT_PRESETS",
    "box_iou",
    "content_scores",
    "cosine_similarity",
    "match_objects",
    "object_reward",
    "score_sample",
    "spatial_reward",
    "temporal_reward",
    "total_reward",
]

# exhaustive assignment search up to this many names per side, Hungarian above
EXHAUSTIVE_LIMIT = 8


@dataclass(frozen=True)
class RewardWeights:
    format: float = 1.0
    temporal: float = 1.0
    object: float = 1.0
    spatial: float = 1.0

    def __post_init__(self):
        for name in ("format", "temporal", "object", "spatial"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be non-negative")

    @property
    def max_total(self) -> float:
        return self.format + self.temporal + self.object + self.spatial


WEIGHT_PRESETS = {
    TaskKind.TEMPORAL: RewardWeights(format=1.0, temporal=1.0, object=1.0, spatial=0.0),
    TaskKind.SPATIAL: RewardWeights(format=1.0, temporal=0.0, object=1.0, spatial=1.0),
    TaskKind.SPATIO_TEMPORAL: RewardWeights(format=1.0, temporal=1.0, object=1.0, spatial=1.0),
}


@dataclass(frozen=True)
class RewardConfig:
    weights: Mapping[TaskKind, RewardWeights] = field(default_factory=lambda: dict(WEIGHT_PRESETS))
    tau: float = 0.5
    table: EmbeddingTable | None = None
    fallback: str = "error"
    tolerance: float = 0.5
    stopwords: frozenset = DEFAULT_STOPWORDS

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.fallback not in ("error", "jaccard"):
            raise ValueError(f"unknown fallback policy {self.fallback!r}")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    format: float = 0.0
    object: float = 0.0
    temporal: float = 0.0
    spatial: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "object": self.object,
            "temporal": self.temporal,
            "spatial": self.spatial,
            "total": self.total,
        }


def temporal_reward(pred: TimeInterval, gt: TimeInterval) -> float:
    """Interval IoU, with the union measured as covered length."""
    inter = max(0.0, min(pred.end, gt.end) - max(pred.start, gt.start))
    union = pred.length + gt.length - inter
    if union <= 0:
        return 1.0 if (pred.start, pred.end) == (gt.start, gt.end) else 0.0
    return inter / union


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def spatial_reward(
    pred_track: ObjectTrack | Mapping[float, BoundingBox],
    gt_track: Mapping[float, BoundingBox],
    overlap: TimeInterval | None,
    tolerance: float = 0.5,
) -> float:
    """Mean box IoU over the gold timestamps that fall inside ``overlap``.

    Each gold timestamp is compared with the predicted box whose timestamp is
    nearest (earlier wins a tie) and at most ``tolerance`` seconds away;
    timestamps without such a box contribute 0.
    """
    if overlap is None:
        return 0.0
    pred_boxes = pred_track.boxes if isinstance(pred_track, ObjectTrack) else pred_track
    stamps = [t for t in gt_track if overlap.contains(t)]
    if not stamps:
        return 0.0
    pred_times = sorted(pred_boxes)
    total = 0.0
    for t in stamps:
        i = bisect.bisect_left(pred_times, t)
        candidates = [pred_times[j] for j in (i - 1, i) if 0 <= j < len(pred_times)]
        if not candidates:
            continue
        nearest = min(candidates, key=lambda p: (abs(p - t), p))
        # 1e-9 absorbs decimal noise such as 10.3 - 9.8
        if abs(nearest - t) <= tolerance + 1e-9:
            total += box_iou(pred_boxes[nearest], gt_track[t])
    return total / len(stamps)


def total_reward(format: float, temporal: float, object: float, spatial: float, weights: RewardWeights) -> float:
    for name, value in (("format", format), ("temporal", temporal), ("object", object), ("spatial", spatial)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} reward {value} outside [0, 1]")
    return (
        weights.format * format
        + weights.temporal * temporal
        + weights.object * object
        + weights.spatial * spatial
    )


@dataclass(frozen=True)
class ObjectMatch:
    gold_index: int
    pred_index: int | None
    similarity: float
    hit: bool


def _best_assignment(sim: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-weight one-to-one pairs (pred, gold) covering min(P, G) names.

    Similarities are floored at 0 first: a pair with non-positive similarity
    is worth no more than leaving both names unmatched, so it must not push
    the search towards a worse set of positive pairs.
    """
    sim = np.maximum(sim, 0.0)
    n_pred, n_gold = sim.shape
    if max(n_pred, n_gold) > EXHAUSTIVE_LIMIT:
        rows, cols = linear_sum_assignment(sim, maximize=True)
        return list(zip(rows.tolist(), cols.tolist()))
    best, best_pairs = -np.inf, []
    if n_pred >= n_gold:
        for perm in itertools.permutations(range(n_pred), n_gold):
            score = sum(sim[p, g] for g, p in enumerate(perm))
            if score > best:
                best, best_pairs = score, [(p, g) for g, p in enumerate(perm)]
    else:
        for perm in itertools.permutations(range(n_gold), n_pred):
            score = sum(sim[p, g] for p, g in enumerate(perm))
            if score > best:
                best, best_pairs = score, list(enumerate(perm))
    return best_pairs


def match_objects(
    pred_names: list[str],
    gt_names: list[str],
    table: EmbeddingTable | None,
    tau: float = 0.5,
    fallback: str = "error",
    stopwords=DEFAULT_STOPWORDS,
) -> list[ObjectMatch]:
    """Pair predicted with gold names by maximum total similarity.

    Returns one entry per gold name, in gold order.
    """
    if not gt_names:
        raise ValueError("at least one gold name is required")
    if fallback == "error":
        # an unknown gold name is a data problem whatever the prediction says
        for gold in gt_names:
            if table is None:
                raise OutOfVocabulary(gold)
            table.phrase_vector(gold, stopwords)
    sim = np.zeros((len(pred_names), len(gt_names)))
    for g, gold in enumerate(gt_names):
        for p, pred in enumerate(pred_names):
            sim[p, g] = name_similarity(pred, gold, table, fallback, stopwords)
    pairs = dict((g, p) for p, g in _best_assignment(sim)) if pred_names else {}
    matches = []
    for g in range(len(gt_names)):
        p = pairs.get(g)
        s = float(sim[p, g]) if p is not None else 0.0
        matches.append(ObjectMatch(g, p, s, p is not None and s >= tau))
    return matches


def object_reward(
    pred_names: list[str],
    gt_names: list[str],
    table: EmbeddingTable | None,
    tau: float = 0.5,
    fallback: str = "error",
    stopwords=DEFAULT_STOPWORDS,
) -> float:
    """Fraction of gold names matched with similarity at least ``tau``."""
    matches = match_objects(pred_names, gt_names, table, tau, fallback, stopwords)
    return sum(m.hit for m in matches) / len(matches)


@dataclass(frozen=True)
class ContentScores:
    """Content rewards for a well-formed answer; ``None`` marks an inapplicable one."""

    object: float
    object_hit: int
    temporal: float | None
    spatial: float | None
    matches: tuple[ObjectMatch, ...] = ()


def content_scores(answer: StructuredAnswer, gt: GroundTruthRecord, config: RewardConfig) -> ContentScores:
    task = gt.task_kind
    matches = match_objects(answer.names, gt.names, config.table, config.tau, config.fallback, config.stopwords)
    obj = sum(m.hit for m in matches) / len(matches)

    temporal = None
    if task in (TaskKind.TEMPORAL, TaskKind.SPATIO_TEMPORAL):
        temporal = temporal_reward(answer.interval, gt.interval) if answer.interval else 0.0

    spatial = None
    if task in (TaskKind.SPATIAL, TaskKind.SPATIO_TEMPORAL):
        if task is TaskKind.SPATIAL:
            overlap = gt.interval
        else:
            overlap = answer.interval.intersection(gt.interval) if answer.interval else None
        per_object = []
        for m in matches:
            gold_track = gt.gold_tracks.get(gt.names[m.gold_index])
            if gold_track is None:
                continue
            if not m.hit:
                per_object.append(0.0)
                continue
            per_object.append(spatial_reward(answer.tracks[m.pred_index], gold_track, overlap, config.tolerance))
        spatial = sum(per_object) / len(per_object) if per_object else 0.0

    return ContentScores(obj, int(all(m.hit for m in matches)), temporal, spatial, tuple(matches))


def score_sample(text: str, gt: GroundTruthRecord, config: RewardConfig | None = None) -> RewardBreakdown:
    """Reward one model output against its gold record.

    Output failing the format check earns nothing at all; otherwise the
    content rewards that apply to the task are computed and weighted.
    """
    config = config or RewardConfig()
    if not check_format(text, gt.task_kind):
        return RewardBreakdown()
    try:
        answer = parse_answer(text, gt.task_kind)
    except FormatError:  # pragma: no cover - check_format already parsed it
        return RewardBreakdown()
    scores = content_scores(answer, gt, config)
    temporal = scores.temporal or 0.0
    spatial = scores.spatial or 0.0
    weights = config.weights[gt.task_kind]
    total = total_reward(1.0, temporal, scores.object, spatial, weights)
    return RewardBreakdown(format=1.0, object=scores.object, temporal=temporal, spatial=spatial, total=total)
