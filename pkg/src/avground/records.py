"""Ground-truth records and the JSON Lines files they travel in."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from avground.grammar import BoundingBox, Label, TaskKind, TimeInterval, parse_label


class SchemaError(ValueError):
    """Input file does not follow the expected schema."""


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def write_jsonl(path: str | Path, rows) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _interval(value, where: str) -> TimeInterval:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SchemaError(f"{where}: interval must be [start, end]")
    try:
        return TimeInterval(float(value[0]), float(value[1]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None


def _box(value, where: str) -> BoundingBox:
    try:
        return BoundingBox.from_seq(value)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class GroundTruthRecord:
    """Gold annotation for one question."""

    qa_id: str
    task_kind: TaskKind
    objects: tuple[tuple[str, Label], ...]
    interval: TimeInterval
    gold_tracks: dict[str, dict[float, BoundingBox]] = field(default_factory=dict)
    question: str = ""

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind.parse(self.task_kind))
        objects = tuple((name.strip().lower(), Label(label)) for name, label in self.objects)
        if not objects:
            raise ValueError(f"{self.qa_id}: at least one gold object is required")
        object.__setattr__(self, "objects", objects)
        names = {n for n, _ in objects}
        tracks = {}
        for name, boxes in self.gold_tracks.items():
            key = name.strip().lower()
            if key not in names:
                raise ValueError(f"{self.qa_id}: track {name!r} is not a listed object")
            ordered = dict(sorted(((float(t), b) for t, b in boxes.items()), key=lambda kv: kv[0]))
            outside = [t for t in ordered if not self.interval.contains(t)]
            if outside:
                raise ValueError(f"{self.qa_id}: track {key!r} has timestamps {outside} outside the interval")
            tracks[key] = ordered
        object.__setattr__(self, "gold_tracks", tracks)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.objects]

    @classmethod
    def from_dict(cls, obj: dict, where: str = "record") -> "GroundTruthRecord":
        for key in ("qa_id", "task", "objects", "interval"):
            if key not in obj:
                raise SchemaError(f"{where}: missing field {key!r}")
        try:
            task = TaskKind.parse(obj["task"])
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from None
        objects = []
        for item in obj["objects"]:
            if not isinstance(item, dict) or "name" not in item or "label" not in item:
                raise SchemaError(f"{where}: objects entries need 'name' and 'label'")
            try:
                objects.append((str(item["name"]), parse_label(str(item["label"]))))
            except ValueError as exc:
                raise SchemaError(f"{where}: {exc}") from None
        tracks_obj = obj.get("tracks") or {}
        if not isinstance(tracks_obj, dict):
            raise SchemaError(f"{where}: 'tracks' must be an object")
        tracks = {}
        for name, frames in tracks_obj.items():
            if not isinstance(frames, dict):
                raise SchemaError(f"{where}: track {name!r} must map timestamps to boxes")
            try:
                tracks[name] = {float(t): _box(b, f"{where}: {name}@{t}") for t, b in frames.items()}
            except ValueError as exc:
                raise SchemaError(f"{where}: {exc}") from None
        try:
            return cls(
                qa_id=str(obj["qa_id"]),
                task_kind=task,
                objects=tuple(objects),
                interval=_interval(obj["interval"], where),
                gold_tracks=tracks,
                question=str(obj.get("question", "")),
            )
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "task": self.task_kind.value,
            "question": self.question,
            "objects": [{"name": n, "label": lab.value} for n, lab in self.objects],
            "interval": self.interval.to_list(),
            "tracks": {
                name: {repr(float(t)): box.to_list() for t, box in frames.items()}
                for name, frames in self.gold_tracks.items()
            },
        }


def load_ground_truth(path: str | Path) -> list[GroundTruthRecord]:
    return [GroundTruthRecord.from_dict(obj, f"{path}:{lineno}") for lineno, obj in iter_jsonl(path)]


def load_predictions(path: str | Path) -> list[tuple[str, str]]:
    preds = []
    for lineno, obj in iter_jsonl(path):
        if "qa_id" not in obj or "text" not in obj:
            raise SchemaError(f"{path}:{lineno}: predictions need 'qa_id' and 'text'")
        if not isinstance(obj["text"], str):
            raise SchemaError(f"{path}:{lineno}: 'text' must be a string")
        preds.append((str(obj["qa_id"]), obj["text"]))
    return preds
