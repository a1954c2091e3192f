"""Tagged answer grammar and caption-analysis output parsing.

Model answers look like::

    <answer>
    <when>[10.0,20.5]</when>
    <object>dog</object>
    <where>
    10.0: [100,200,300,400]
    11.0: [109,280,320,432]
    </where>
    </answer>

Parsing is strict: anything that cannot be read unambiguously raises
:class:`FormatError`, whose ``kind`` tells callers which rule was broken.
Nothing here repairs malformed output, so rewards stay deterministic.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal

__all__ = [
    "WORKED_EXAMPLE",
    "BoundingBox",
    "CaptionAnalysis",
    "FormatError",
    "Label",
    "ObjectTrack",
    "REQUIRED_TAGS",
    "StructuredAnswer",
    "TaskKind",
    "TimeInterval",
    "check_format",
    "format_1dp",
    "parse_answer",
    "parse_caption_analysis",
    "parse_label",
    "serialize_answer",
    "truncate_1dp",
]


class TaskKind(str, enum.Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    SPATIO_TEMPORAL = "spatio-temporal"

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        key = str(value).strip().lower().replace("_", "-")
        if key == "spatiotemporal":
            key = "spatio-temporal"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown task kind {value!r}") from None


class Label(str, enum.Enum):
    VISIBLE_ONLY = "visible-only"
    VISIBLE_AUDIBLE = "visible&audible"


def parse_label(text: str) -> Label:
    """Map a caption-analysis label to :class:`Label`.

    Spacing around ``&`` is ignored, so ``visible & audible`` and
    ``visible&audible`` are the same label. ``audible-only`` is rejected.
    """
    key = re.sub(r"\s+", "", text.strip().strip("[]").lower())
    if key.startswith("label:"):
        key = key[len("label:"):]
    for label in Label:
        if key == label.value:
            return label
    raise FormatError("unknown_label", f"unsupported label {text.strip()!r}")


class FormatError(ValueError):
    """Raised when model or analyzer output violates its grammar.

    ``kind`` is one of ``missing_tag``, ``unbalanced_tag``, ``bad_number``,
    ``bad_box``, ``bad_interval`` for answers, and ``unknown_label``,
    ``count_mismatch``, ``no_subjects_header`` for caption analyses.
    """

    KINDS = frozenset(
        {
            "missing_tag",
            "unbalanced_tag",
            "bad_number",
            "bad_box",
            "bad_interval",
            "unknown_label",
            "count_mismatch",
            "no_subjects_header",
        }
    )

    def __init__(self, kind: str, detail: str = ""):
        if kind not in self.KINDS:
            raise ValueError(f"unknown FormatError kind {kind!r}")
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)


def truncate_1dp(value: float) -> float:
    """Truncate toward zero to one decimal place, working on the shortest repr."""
    quantized = Decimal(repr(float(value))).quantize(Decimal("0.1"), rounding=ROUND_DOWN)
    return float(quantized) + 0.0


def format_1dp(value: float) -> str:
    """Render with exactly one decimal, truncating toward zero."""
    text = str(Decimal(repr(float(value))).quantize(Decimal("0.1"), rounding=ROUND_DOWN))
    return "0.0" if text == "-0.0" else text


def _fmt_coord(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return f"{Decimal(repr(float(value))):f}"


@dataclass(frozen=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"non-finite interval [{self.start}, {self.end}]")
        if self.start < 0:
            raise ValueError(f"interval start {self.start} is negative")
        if self.end < self.start:
            raise ValueError(f"interval end {self.end} precedes start {self.start}")

    @property
    def length(self) -> float:
        return self.end - self.start

    def canonical(self) -> "TimeInterval":
        return TimeInterval(truncate_1dp(self.start), truncate_1dp(self.end))

    def intersection(self, other: "TimeInterval") -> "TimeInterval | None":
        lo, hi = max(self.start, other.start), min(self.end, other.end)
        if hi < lo:
            return None
        return TimeInterval(lo, hi)

    def contains(self, t: float, slack: float = 1e-9) -> bool:
        return self.start - slack <= t <= self.end + slack

    def to_list(self) -> list[float]:
        return [self.start, self.end]


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box {coords}")
        if min(coords) < 0:
            raise ValueError(f"negative coordinate in box {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order {coords}")

    @classmethod
    def from_seq(cls, seq) -> "BoundingBox":
        if len(seq) != 4:
            raise ValueError(f"a box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class ObjectTrack:
    """One grounded object and its boxes keyed by timestamp (seconds)."""

    name: str
    boxes: dict[float, BoundingBox] = field(default_factory=dict)

    def __post_init__(self):
        name = self.name.strip().lower()
        if not name:
            raise ValueError("object name is empty")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "boxes", dict(self.boxes))
        stamps = list(self.boxes)
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"timestamps of {name!r} are not strictly increasing")


REQUIRED_TAGS = {
    TaskKind.TEMPORAL: frozenset({"answer", "object", "when"}),
    TaskKind.SPATIAL: frozenset({"answer", "object", "where"}),
    TaskKind.SPATIO_TEMPORAL: frozenset({"answer", "object", "when", "where"}),
}


def _task_violation(task_kind, interval, tracks) -> tuple[str, str] | None:
    required = REQUIRED_TAGS[task_kind]
    if not tracks:
        return "missing_tag", "object"
    if "when" in required and interval is None:
        return "missing_tag", "when"
    if "where" in required and not any(t.boxes for t in tracks):
        return "missing_tag", "where"
    return None


@dataclass(frozen=True)
class StructuredAnswer:
    task_kind: TaskKind
    interval: TimeInterval | None = None
    tracks: tuple[ObjectTrack, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind.parse(self.task_kind))
        object.__setattr__(self, "tracks", tuple(self.tracks))
        problem = _task_violation(self.task_kind, self.interval, self.tracks)
        if problem:
            raise ValueError(f"invalid {self.task_kind.value} answer: {problem[0]} {problem[1]}")

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tracks]


_TAG = re.compile(r"<(/?)(answer|object|when|where)>")
_NUMBER = re.compile(r"[+-]?\d+(?:\.\d+)?")


def _number(token: str) -> float:
    token = token.strip()
    if not _NUMBER.fullmatch(token):
        raise FormatError("bad_number", f"cannot read number {token!r}")
    return float(token)


def _bracketed(body: str, kind: str, expected: int) -> list[float]:
    body = body.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise FormatError(kind, f"expected [..] but got {body!r}")
    parts = body[1:-1].split(",")
    if len(parts) != expected:
        raise FormatError(kind, f"expected {expected} values in {body!r}")
    return [_number(p) for p in parts]


def _scan(text: str) -> list[tuple[str, str]]:
    """Split the first <answer> block into (tag, content) pairs in order."""
    start = text.find("<answer>")
    if start < 0:
        raise FormatError("missing_tag", "answer")
    pos = start + len("<answer>")
    elements: list[tuple[str, str]] = []
    open_tag = None
    for m in _TAG.finditer(text, pos):
        closing, name = m.group(1) == "/", m.group(2)
        gap = text[pos:m.start()]
        if open_tag is None:
            if gap.strip():
                raise FormatError("unbalanced_tag", f"stray text {gap.strip()[:40]!r} inside <answer>")
            if closing and name == "answer":
                return elements
            if closing:
                raise FormatError("unbalanced_tag", f"</{name}> without opening tag")
            if name == "answer":
                raise FormatError("unbalanced_tag", "nested <answer>")
            open_tag = name
        elif closing and name == open_tag:
            elements.append((name, gap))
            open_tag = None
        else:
            raise FormatError("unbalanced_tag", f"<{m.group(1)}{name}> inside <{open_tag}>")
        pos = m.end()
    raise FormatError("unbalanced_tag", f"<{open_tag or 'answer'}> is never closed")


def _parse_interval(content: str) -> TimeInterval:
    start, end = _bracketed(content, "bad_interval", 2)
    try:
        return TimeInterval(start, end).canonical()
    except ValueError as exc:
        raise FormatError("bad_interval", str(exc)) from None


def _parse_where(content: str) -> dict[float, BoundingBox]:
    boxes: dict[float, BoundingBox] = {}
    last = None
    for line in content.splitlines():
        line = line.strip()
        if not line:
            continue
        stamp, sep, rest = line.partition(":")
        if not sep:
            raise FormatError("bad_box", f"expected 'timestamp: [x1,y1,x2,y2]' but got {line!r}")
        t = truncate_1dp(_number(stamp))
        coords = _bracketed(rest, "bad_box", 4)
        if t < 0:
            raise FormatError("bad_box", f"negative timestamp in {line!r}")
        if last is not None and t <= last:
            raise FormatError("bad_box", f"timestamp {t} does not increase")
        try:
            boxes[t] = BoundingBox(*coords)
        except ValueError as exc:
            raise FormatError("bad_box", str(exc)) from None
        last = t
    return boxes


def _split_names(content: str) -> list[str]:
    names = [n.strip().lower() for n in content.split(",")]
    if not all(names):
        raise FormatError("missing_tag", f"empty object name in {content.strip()!r}")
    return names


def _build(elements: list[tuple[str, str]], task_kind: TaskKind) -> StructuredAnswer:
    interval = None
    groups: list[tuple[list[str], list[dict]]] = []
    for tag, content in elements:
        if tag == "when":
            if interval is not None:
                raise FormatError("unbalanced_tag", "more than one <when>")
            interval = _parse_interval(content)
        elif tag == "object":
            groups.append((_split_names(content), []))
        else:
            if not groups:
                raise FormatError("missing_tag", "object before <where>")
            groups[-1][1].append(_parse_where(content))

    tracks = []
    for names, wheres in groups:
        if not wheres:
            tracks.extend(ObjectTrack(n) for n in names)
        elif len(wheres) == 1:
            tracks.extend(ObjectTrack(n, wheres[0]) for n in names)
        elif len(wheres) == len(names):
            tracks.extend(ObjectTrack(n, w) for n, w in zip(names, wheres))
        else:
            raise FormatError(
                "unbalanced_tag", f"{len(wheres)} <where> blocks for {len(names)} object name(s)"
            )

    problem = _task_violation(task_kind, interval, tracks)
    if problem:
        raise FormatError(*problem)
    return StructuredAnswer(task_kind, interval, tuple(tracks))


def parse_answer(text: str, task_kind: TaskKind | str) -> StructuredAnswer:
    """Parse the first ``<answer>`` block of ``text``.

    Tags may appear in any order inside the block. A ``<where>`` binds to the
    closest preceding ``<object>``; an object tag naming several objects
    shares a single following ``<where>`` or pairs with one block per name.
    Text outside the block is ignored, stray text inside it is not.
    """
    return _build(_scan(text), TaskKind.parse(task_kind))


def check_format(text: str, task_kind: TaskKind | str) -> bool:
    """True iff the answer parses and uses exactly the task's tag set."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", "replace")
    try:
        kind = TaskKind.parse(task_kind)
        elements = _scan(text)
        _build(elements, kind)
    except (FormatError, TypeError, AttributeError):
        return False
    present = {"answer"} | {tag for tag, _ in elements}
    return present == REQUIRED_TAGS[kind]


def serialize_answer(answer: StructuredAnswer) -> str:
    lines = ["<answer>"]
    if answer.interval is not None:
        iv = answer.interval
        lines.append(f"<when>[{format_1dp(iv.start)},{format_1dp(iv.end)}]</when>")
    for track in answer.tracks:
        lines.append(f"<object>{track.name}</object>")
        if track.boxes:
            lines.append("<where>")
            for t, box in track.boxes.items():
                coords = ",".join(_fmt_coord(c) for c in box.to_list())
                lines.append(f"{format_1dp(t)}: [{coords}]")
            lines.append("</where>")
    lines.append("</answer>")
    return "\n".join(lines) + "\n"


WORKED_EXAMPLE = """<answer>
<when>[10.0,20.5]</when>
<object>dog</object>
<where>
10.0: [100,200,300,400]
11.0: [109,280,320,432]
12.0: [100,200,300,400]
</where>
<object>cat</object>
<where>
12.5: [50,60,150,160]
13.5: [55,62,140,150]
</where>
</answer>
"""


@dataclass(frozen=True)
class CaptionAnalysis:
    subjects: tuple[tuple[str, Label], ...]
    subject_count: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if self.subject_count != len(self.subjects):
            raise ValueError("subject_count does not match the subject list")


_SUBJECT_LINE = re.compile(r"^(?P<name>.*\S)\s+-\s+(?P<label>.+)$")
_COUNT_LINE = re.compile(r"^subject\s+number\s*:\s*(?P<n>.*)$", re.IGNORECASE)


def parse_caption_analysis(text: str) -> CaptionAnalysis:
    lines = [ln.strip() for ln in text.splitlines()]
    try:
        header = next(i for i, ln in enumerate(lines) if ln.lower().rstrip(":").strip() == "key subjects")
    except StopIteration:
        raise FormatError("no_subjects_header", "no 'Key Subjects:' line") from None

    subjects = []
    declared = None
    for line in lines[header + 1:]:
        if not line:
            continue
        count = _COUNT_LINE.match(line)
        if count:
            token = count.group("n").strip().strip("[]")
            if not token.isdigit():
                raise FormatError("count_mismatch", f"unreadable subject number {token!r}")
            declared = int(token)
            break
        m = _SUBJECT_LINE.match(line)
        if not m:
            raise FormatError("unknown_label", f"no label on line {line!r}")
        name = m.group("name").lstrip("-*• ").strip().strip("[]").strip().lower()
        subjects.append((name, parse_label(m.group("label"))))

    if declared is None:
        raise FormatError("count_mismatch", "missing 'Subject Number:' line")
    if declared != len(subjects):
        raise FormatError("count_mismatch", f"declared {declared} subjects, found {len(subjects)}")
    return CaptionAnalysis(tuple(subjects), declared)
