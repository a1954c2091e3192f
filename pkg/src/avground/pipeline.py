"""Manifest filtering, QA generation, split bookkeeping and human QC aggregation."""

from __future__ import annotations

import csv
import enum
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from avground.grammar import BoundingBox, Label, TaskKind, TimeInterval, format_1dp, parse_label
from avground.records import GroundTruthRecord, SchemaError

SPLITS = ("train", "test", "unassigned")

# per-split QA counts as released, and the totals they should add up to
PUBLISHED_SPLIT_COUNTS = {
    "train": {"temporal": 2663, "spatial": 2666, "spatio-temporal": 1204, "total": 6533},
    "test": {"temporal": 663, "spatial": 664, "spatio-temporal": 306, "total": 1633},
    "total": 8166,
}


class NonPositiveDuration(ValueError):
    pass


class NoEligibleObjects(ValueError):
    pass


class InvalidScore(ValueError):
    pass


class Bucket(str, enum.Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"
    REJECTED = "rejected"


@dataclass(frozen=True)
class FilterConfig:
    short_max: float = 20.0
    medium_max: float = 40.0
    long_max: float = 60.0
    min_duration: float = 2.0
    max_events: int = 3
    min_et_ratio: float = 0.08
    # box annotation tool settings, recorded for provenance only
    box_threshold: float = 0.4
    text_threshold: float = 0.3

    def __post_init__(self):
        if not 0 <= self.min_duration < self.short_max < self.medium_max < self.long_max:
            raise ValueError("bucket bounds must be strictly increasing")
        if not 0 < self.min_et_ratio < 1:
            raise ValueError("min_et_ratio must lie in (0, 1)")
        if self.max_events < 1:
            raise ValueError("max_events must be at least 1")


@dataclass(frozen=True)
class Event:
    category: str
    caption: str
    interval: TimeInterval
    objects: tuple[tuple[str, Label], ...] = ()

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "caption": self.caption,
            "interval": self.interval.to_list(),
            "objects": [{"name": n, "label": lab.value} for n, lab in self.objects],
        }


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    duration: float
    events: tuple[Event, ...] = ()
    split: str = "unassigned"

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.duration <= 0:
            raise NonPositiveDuration(f"{self.video_id}: duration {self.duration} is not positive")
        if self.split not in SPLITS:
            raise ValueError(f"{self.video_id}: unknown split {self.split!r}")
        for ev in self.events:
            if ev.interval.end > self.duration + 1e-9:
                raise ValueError(f"{self.video_id}: event {ev.caption!r} ends after the video")

    @classmethod
    def from_dict(cls, obj: dict, where: str = "record") -> "VideoRecord":
        try:
            events = []
            for ev in obj.get("events", []):
                objects = tuple((str(o["name"]).strip().lower(), parse_label(str(o["label"]))) for o in ev.get("objects", []))
                start, end = ev["interval"]
                events.append(Event(str(ev["category"]), str(ev.get("caption", "")), TimeInterval(float(start), float(end)), objects))
            return cls(str(obj["video_id"]), float(obj["duration"]), tuple(events), str(obj.get("split", "unassigned")))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc.__class__.__name__}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration": self.duration,
            "split": self.split,
            "events": [ev.to_dict() for ev in self.events],
        }


def load_manifest(path: str | Path) -> list[VideoRecord]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, list):
        raise SchemaError(f"{path}: manifest must be a JSON array")
    return [VideoRecord.from_dict(obj, f"{path}[{i}]") for i, obj in enumerate(data)]


def load_box_sidecar(path: str | Path) -> dict[str, dict[str, dict[float, BoundingBox]]]:
    """Read ``[{video_id, frames: {t: {object: [x1, y1, x2, y2]}}}]`` into video -> object -> t -> box."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    out: dict[str, dict[str, dict[float, BoundingBox]]] = {}
    for i, entry in enumerate(data):
        try:
            tracks = out.setdefault(str(entry["video_id"]), {})
            for t, objects in entry["frames"].items():
                for name, box in objects.items():
                    tracks.setdefault(name.strip().lower(), {})[float(t)] = BoundingBox.from_seq(box)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"{path}[{i}]: {exc}") from None
    return out


def duration_bucket(duration: float, config: FilterConfig | None = None) -> Bucket:
    config = config or FilterConfig()
    if duration <= 0:
        raise NonPositiveDuration(f"duration {duration} is not positive")
    if duration < config.min_duration or duration > config.long_max:
        return Bucket.REJECTED
    if duration <= config.short_max:
        return Bucket.SHORT
    if duration <= config.medium_max:
        return Bucket.MEDIUM
    return Bucket.LONG


def merge_overlapping_events(events) -> list[Event]:
    """Merge same-category events whose intervals overlap by a positive length.

    Merged events span the hull of their members, join captions with "; "
    in start order and keep the first label seen for each object. Output
    follows the position of each group's first member.
    """
    events = list(events)
    parent = list(range(len(events)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_category: dict[str, list[int]] = {}
    for i, ev in enumerate(events):
        by_category.setdefault(ev.category, []).append(i)
    for members in by_category.values():
        members.sort(key=lambda i: (events[i].interval.start, i))
        reach_end, reach_idx = None, None
        for i in members:
            iv = events[i].interval
            if reach_end is not None and min(iv.end, reach_end) > iv.start:
                parent[find(i)] = find(reach_idx)
            if reach_end is None or iv.end > reach_end:
                reach_end, reach_idx = iv.end, i

    groups: dict[int, list[int]] = {}
    for i in range(len(events)):
        groups.setdefault(find(i), []).append(i)
    merged = []
    for members in sorted(groups.values(), key=min):
        if len(members) == 1:
            merged.append(events[members[0]])
            continue
        members.sort(key=lambda i: (events[i].interval.start, i))
        objects: dict[str, Label] = {}
        for i in members:
            for name, label in events[i].objects:
                objects.setdefault(name, label)
        merged.append(
            Event(
                category=events[members[0]].category,
                caption="; ".join(events[i].caption for i in members),
                interval=TimeInterval(
                    min(events[i].interval.start for i in members),
                    max(events[i].interval.end for i in members),
                ),
                objects=tuple(objects.items()),
            )
        )
    return merged


def union_length(intervals) -> float:
    total, cur_start, cur_end = 0.0, None, None
    for iv in sorted(intervals, key=lambda iv: iv.start):
        if cur_end is None or iv.start > cur_end:
            if cur_end is not None:
                total += cur_end - cur_start
            cur_start, cur_end = iv.start, iv.end
        else:
            cur_end = max(cur_end, iv.end)
    if cur_end is not None:
        total += cur_end - cur_start
    return total


def et_ratio(record: VideoRecord) -> float:
    """Length of the union of event intervals over the video duration."""
    return min(1.0, union_length(ev.interval for ev in record.events) / record.duration)


@dataclass(frozen=True)
class Rejection:
    record: VideoRecord
    reason: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"video_id": self.record.video_id, "reason": self.reason, "detail": self.detail}


def filter_manifest(records, config: FilterConfig | None = None) -> tuple[list[VideoRecord], list[Rejection]]:
    """Apply the duration, event-count and ET-ratio gates, in that order.

    Events are merged before gating; kept records carry the merged events.
    """
    config = config or FilterConfig()
    kept, rejected = [], []
    for record in records:
        merged = replace(record, events=tuple(merge_overlapping_events(record.events)))
        bucket = duration_bucket(merged.duration, config)
        if bucket is Bucket.REJECTED:
            rejected.append(Rejection(merged, "duration", f"{merged.duration:g}s"))
            continue
        if len(merged.events) > config.max_events:
            rejected.append(Rejection(merged, "event_count", f"{len(merged.events)} events"))
            continue
        ratio = et_ratio(merged)
        # slack keeps ratios that are 0.08 up to float noise
        if ratio < config.min_et_ratio - 1e-12:
            rejected.append(Rejection(merged, "et_ratio", f"{ratio:.4f}"))
            continue
        kept.append(merged)
    return kept, rejected


def filter_summary(kept, rejected, config: FilterConfig | None = None) -> dict:
    config = config or FilterConfig()
    return {
        "kept": len(kept),
        "rejected": len(rejected),
        "rejected_by_reason": dict(sorted(Counter(r.reason for r in rejected).items())),
        "buckets": dict(sorted(Counter(duration_bucket(r.duration, config).value for r in kept).items())),
        "event_counts": {str(k): v for k, v in sorted(Counter(len(r.events) for r in kept).items())},
    }


TEMPORAL_TEMPLATE = "When is the moment {objects} make sound and are visible?"
SPATIAL_AUDIBLE_TEMPLATE = "What objects make sound between {start} and {end}, and where are they?"
SPATIAL_SILENT_TEMPLATE = "What silent objects can be seen between {start} and {end}, and where are they?"
SPATIO_TEMPORAL_TEMPLATE = "When is the moment {objects} make sound and are visible, and where are they?"

_TASK_TAGS = {TaskKind.TEMPORAL: "T", TaskKind.SPATIAL: "S", TaskKind.SPATIO_TEMPORAL: "ST"}


@dataclass(frozen=True)
class QaRecord:
    qa_id: str
    task_kind: TaskKind
    question: str
    gold: GroundTruthRecord
    split: str = "unassigned"
    video_id: str = ""

    def to_dict(self) -> dict:
        row = self.gold.to_dict()
        row.update(split=self.split, video_id=self.video_id)
        return row

    @classmethod
    def from_dict(cls, obj: dict, where: str = "record") -> "QaRecord":
        gold = GroundTruthRecord.from_dict(obj, where)
        return cls(gold.qa_id, gold.task_kind, gold.question, gold, str(obj.get("split", "unassigned")), str(obj.get("video_id", "")))


def generate_qas(record: VideoRecord, boxes: dict[str, dict[float, BoundingBox]] | None = None) -> list[QaRecord]:
    """Expand each event of a kept video into its template questions.

    Sounding-visible objects yield a temporal, a spatial and a spatio-temporal
    question; silent-visible objects yield one spatial question. Gold tracks
    come from ``boxes`` (object -> timestamp -> box), clipped to the event.
    """
    boxes = boxes or {}
    qas = []
    for index, event in enumerate(record.events):
        audible = [(n, lab) for n, lab in event.objects if lab is Label.VISIBLE_AUDIBLE]
        silent = [(n, lab) for n, lab in event.objects if lab is Label.VISIBLE_ONLY]
        iv = event.interval
        start, end = format_1dp(iv.start), format_1dp(iv.end)
        planned = []
        if audible:
            names = ", ".join(n for n, _ in audible)
            planned.append((TaskKind.TEMPORAL, TEMPORAL_TEMPLATE.format(objects=names), audible))
            planned.append((TaskKind.SPATIAL, SPATIAL_AUDIBLE_TEMPLATE.format(start=start, end=end), audible))
        if silent:
            planned.append((TaskKind.SPATIAL, SPATIAL_SILENT_TEMPLATE.format(start=start, end=end), silent))
        if audible:
            planned.append((TaskKind.SPATIO_TEMPORAL, SPATIO_TEMPORAL_TEMPLATE.format(objects=", ".join(n for n, _ in audible)), audible))

        ordinals: Counter = Counter()
        for task, question, objects in planned:
            tag = _TASK_TAGS[task]
            qa_id = f"{record.video_id}:{index}:{tag}:{ordinals[tag]}"
            ordinals[tag] += 1
            tracks = {}
            for name, _ in objects:
                frames = {t: b for t, b in sorted(boxes.get(name, {}).items()) if iv.contains(t)}
                if frames:
                    tracks[name] = frames
            gold = GroundTruthRecord(qa_id, task, tuple(objects), iv, tracks, question)
            qas.append(QaRecord(qa_id, task, question, gold, record.split, record.video_id))
    if not qas:
        raise NoEligibleObjects(f"{record.video_id}: no labelled objects in any event")
    return qas


@dataclass
class SplitReport:
    observed: dict[str, dict[str, int]]
    declared: dict
    mismatches: list[dict] = field(default_factory=list)
    arithmetic_errors: list[str] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not self.mismatches and not self.arithmetic_errors

    def to_dict(self) -> dict:
        return {
            "consistent": self.consistent,
            "observed": self.observed,
            "declared": self.declared,
            "mismatches": self.mismatches,
            "arithmetic_errors": self.arithmetic_errors,
        }


def split_report(qas, declared: dict | None = None) -> SplitReport:
    """Tally QAs by (split, task) and compare with declared counts.

    ``declared`` maps split -> task -> count, each split optionally with a
    ``total``, plus an optional grand ``total``. Declared totals are checked
    against their parts, and each declared or observed cell against the tally.
    With ``qas=None`` only the declared arithmetic is checked.
    """
    declared = declared or {}
    tally: Counter = Counter((qa.split, qa.task_kind.value) for qa in qas or ())
    observed: dict[str, dict[str, int]] = {}
    for (split, task), n in sorted(tally.items()):
        observed.setdefault(split, {})[task] = n
    report = SplitReport(observed, declared)

    split_sums = {}
    for split, cells in declared.items():
        if split == "total":
            continue
        parts = {k: v for k, v in cells.items() if k != "total"}
        split_sums[split] = sum(parts.values())
        if "total" in cells and cells["total"] != split_sums[split]:
            report.arithmetic_errors.append(
                f"{split}: parts sum to {split_sums[split]}, declared total {cells['total']}"
            )
    if "total" in declared:
        grand = sum(split_sums.values())
        if grand != declared["total"]:
            report.arithmetic_errors.append(f"splits sum to {grand}, declared total {declared['total']}")

    if qas is None:
        return report
    cells = {(s, t) for s, c in declared.items() if s != "total" for t in c if t != "total"}
    cells |= set(tally)
    for split, task in sorted(cells):
        want = declared.get(split, {}).get(task) if split != "total" else None
        got = tally.get((split, task), 0)
        if want != got:
            report.mismatches.append({"split": split, "task": task, "declared": want, "observed": got})
    return report


def quadratic_weighted_kappa(a, b, categories=(1, 2, 3, 4)) -> float:
    """Cohen's kappa with squared-distance disagreement weights.

    When the expected disagreement is zero (both raters constant) the
    statistic is undefined; a warning is issued and 0 returned.
    """
    index = {c: i for i, c in enumerate(categories)}
    k = len(categories)
    observed = np.zeros((k, k))
    for x, y in zip(a, b):
        observed[index[x], index[y]] += 1
    n = observed.sum()
    if n == 0:
        warnings.warn("kappa of an empty rating set is undefined; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    i, j = np.indices((k, k))
    weights = (i - j) ** 2 / (k - 1) ** 2
    denom = float((weights * expected).sum())
    if denom == 0:
        warnings.warn("expected disagreement is zero; kappa undefined, returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return 1.0 - float((weights * observed).sum()) / denom


@dataclass(frozen=True)
class QcResult:
    kept: tuple[str, ...]
    scores: dict[str, float]
    mean_before: float
    mean_after: float
    kappa: float

    def to_dict(self) -> dict:
        return {
            "kept": list(self.kept),
            "n_rated": len(self.scores),
            "n_kept": len(self.kept),
            "mean_before": self.mean_before,
            "mean_after": self.mean_after,
            "kappa": self.kappa,
        }


def qc_aggregate(ratings, cutoff: float = 2.5) -> QcResult:
    """Average two raters per video and keep videos scoring at least ``cutoff``.

    ``ratings`` holds ``(video_id, rater_a, rater_b)`` on the 1-4 scale.
    """
    scores, a_all, b_all = {}, [], []
    for video_id, a, b in ratings:
        for s in (a, b):
            if s not in (1, 2, 3, 4):
                raise InvalidScore(f"{video_id}: score {s!r} is not on the 1-4 scale")
        if video_id in scores:
            raise ValueError(f"{video_id} rated twice")
        scores[video_id] = (a + b) / 2
        a_all.append(a)
        b_all.append(b)
    kept = tuple(sorted(v for v, s in scores.items() if s >= cutoff))
    mean_before = float(np.mean(list(scores.values()))) if scores else 0.0
    mean_after = float(np.mean([scores[v] for v in kept])) if kept else 0.0
    kappa = quadratic_weighted_kappa(a_all, b_all)
    return QcResult(kept, scores, mean_before, mean_after, kappa)


def load_ratings(path: str | Path) -> list[tuple[str, int, int]]:
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"video_id", "rater_a", "rater_b"} - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append((row["video_id"], int(row["rater_a"]), int(row["rater_b"])))
            except ValueError:
                raise InvalidScore(f"{path}:{lineno}: scores must be integers") from None
    return out
