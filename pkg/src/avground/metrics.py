"""Evaluation metrics: object accuracy, m_tIoU, R1@θ, m_vIoU and AP@θ per task."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from avground.grammar import TaskKind, check_format, parse_answer
from avground.records import GroundTruthRecord
from avground.rewards import RewardConfig, content_scores

RECALL_THRESHOLDS = (0.3, 0.5, 0.7)
AP_THRESHOLDS = (0.3, 0.5)

_HAS_TIOU = (TaskKind.TEMPORAL, TaskKind.SPATIO_TEMPORAL)
_HAS_VIOU = (TaskKind.SPATIAL, TaskKind.SPATIO_TEMPORAL)


class DuplicateQaId(ValueError):
    pass


class UnknownQaId(ValueError):
    pass


class EmptyDenominator(ValueError):
    pass


@dataclass(frozen=True)
class SampleScore:
    qa_id: str
    task_kind: TaskKind
    object_hit: int
    tiou: float | None = None
    viou: float | None = None

    def __post_init__(self):
        if (self.tiou is not None) != (self.task_kind in _HAS_TIOU):
            raise ValueError(f"{self.qa_id}: tIoU presence does not match task {self.task_kind.value}")
        if (self.viou is not None) != (self.task_kind in _HAS_VIOU):
            raise ValueError(f"{self.qa_id}: vIoU presence does not match task {self.task_kind.value}")

    @classmethod
    def zero(cls, qa_id: str, task_kind: TaskKind) -> "SampleScore":
        return cls(
            qa_id,
            task_kind,
            0,
            0.0 if task_kind in _HAS_TIOU else None,
            0.0 if task_kind in _HAS_VIOU else None,
        )

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "task": self.task_kind.value,
            "object_hit": self.object_hit,
            "tIoU": self.tiou,
            "vIoU": self.viou,
        }


def score_one(text: str | None, gt: GroundTruthRecord, config: RewardConfig) -> SampleScore:
    if text is None or not check_format(text, gt.task_kind):
        return SampleScore.zero(gt.qa_id, gt.task_kind)
    scores = content_scores(parse_answer(text, gt.task_kind), gt, config)
    return SampleScore(gt.qa_id, gt.task_kind, scores.object_hit, scores.temporal, scores.spatial)


def pair_predictions(
    preds: list[tuple[str, str]], gts: list[GroundTruthRecord]
) -> list[tuple[GroundTruthRecord, str | None]]:
    """Join predictions to gold records by ``qa_id``, sorted by ``qa_id``.

    Gold records without a prediction are paired with ``None``.
    """
    by_id: dict[str, GroundTruthRecord] = {}
    for gt in gts:
        if gt.qa_id in by_id:
            raise DuplicateQaId(f"duplicate qa_id {gt.qa_id!r} in ground truth")
        by_id[gt.qa_id] = gt
    texts: dict[str, str] = {}
    for qa_id, text in preds:
        if qa_id in texts:
            raise DuplicateQaId(f"duplicate qa_id {qa_id!r} in predictions")
        if qa_id not in by_id:
            raise UnknownQaId(f"prediction for unknown qa_id {qa_id!r}")
        texts[qa_id] = text
    return [(by_id[q], texts.get(q)) for q in sorted(by_id)]


def score_dataset(
    preds: list[tuple[str, str]],
    gts: list[GroundTruthRecord],
    config: RewardConfig | None = None,
    jobs: int = 1,
) -> list[SampleScore]:
    """Score every gold record; records without a prediction score zero.

    The result is sorted by ``qa_id`` whatever ``jobs`` is.
    """
    config = config or RewardConfig(fallback="jaccard")
    work = pair_predictions(preds, gts)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda pair: score_one(pair[1], pair[0], config), work))
    return [score_one(text, gt, config) for gt, text in work]


def _check_theta(theta: float) -> None:
    if not 0 < theta < 1:
        raise ValueError(f"threshold {theta} outside (0, 1)")


def recall_at(scores: list[SampleScore], theta: float) -> float:
    """Percentage of samples with a tIoU whose tIoU is at least ``theta``."""
    _check_theta(theta)
    values = [s.tiou for s in scores if s.tiou is not None]
    if not values:
        raise EmptyDenominator("no sample carries a tIoU")
    return 100.0 * sum(v >= theta for v in values) / len(values)


def ap_at(scores: list[SampleScore], theta: float) -> float:
    """Percentage of samples with a vIoU whose vIoU is at least ``theta``.

    Each question has a single prediction, so precision at rank one reduces
    to this success rate.
    """
    _check_theta(theta)
    values = [s.viou for s in scores if s.viou is not None]
    if not values:
        raise EmptyDenominator("no sample carries a vIoU")
    return 100.0 * sum(v >= theta for v in values) / len(values)


@dataclass(frozen=True)
class TaskMetrics:
    count: int
    object_accuracy: float | None = None
    m_tIoU: float | None = None
    recall: dict[float, float] = field(default_factory=dict)
    m_vIoU: float | None = None
    ap: dict[float, float] = field(default_factory=dict)


@dataclass(frozen=True)
class MetricsReport:
    tasks: dict[TaskKind, TaskMetrics]

    def to_dict(self) -> dict:
        """Presentation form: percentages rounded half-up to 2 decimals, ``None`` when absent."""
        out = {}
        for task in TaskKind:
            m = self.tasks[task]
            row = {"count": m.count, "object_accuracy": present(m.object_accuracy), "m_tIoU": present(m.m_tIoU)}
            for theta in RECALL_THRESHOLDS:
                row[f"R1@{theta}"] = present(m.recall.get(theta))
            row["m_vIoU"] = present(m.m_vIoU)
            for theta in AP_THRESHOLDS:
                row[f"AP@{theta}"] = present(m.ap.get(theta))
            out[task.value] = row
        return {"tasks": out}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        columns = ["count", "object_accuracy", "m_tIoU"]
        columns += [f"R1@{t}" for t in RECALL_THRESHOLDS] + ["m_vIoU"] + [f"AP@{t}" for t in AP_THRESHOLDS]
        rows = self.to_dict()["tasks"]
        header = ["task"] + columns
        body = []
        for task, row in rows.items():
            cells = [task]
            for col in columns:
                v = row[col]
                cells.append("-" if v is None else (str(v) if col == "count" else f"{v:.2f}"))
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in [header] + body]
        return "\n".join(lines) + "\n"


def present(value: float | None) -> float | None:
    if value is None:
        return None
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _mean_pct(values: list[float]) -> float | None:
    return 100.0 * sum(values) / len(values) if values else None


def aggregate(scores: list[SampleScore]) -> MetricsReport:
    tasks = {}
    ordered = sorted(scores, key=lambda s: s.qa_id)
    for task in TaskKind:
        bucket = [s for s in ordered if s.task_kind is task]
        if not bucket:
            tasks[task] = TaskMetrics(count=0)
            continue
        tious = [s.tiou for s in bucket if s.tiou is not None]
        vious = [s.viou for s in bucket if s.viou is not None]
        tasks[task] = TaskMetrics(
            count=len(bucket),
            object_accuracy=_mean_pct([s.object_hit for s in bucket]),
            m_tIoU=_mean_pct(tious),
            recall={t: recall_at(bucket, t) for t in RECALL_THRESHOLDS} if tious else {},
            m_vIoU=_mean_pct(vious),
            ap={t: ap_at(bucket, t) for t in AP_THRESHOLDS} if vious else {},
        )
    return MetricsReport(tasks)
