"""Rewards, metrics and data tooling for audio-visual spatio-temporal grounding.

The package covers the tagged answer grammar models are trained to emit, the
rule-based rewards computed from it, a GRPO objective with a toy policy used
to check its gradients, the evaluation metric suite, and the deterministic
parts of the benchmark construction pipeline.
"""

from avground.grammar import (
    BoundingBox,
    CaptionAnalysis,
    FormatError,
    Label,
    ObjectTrack,
    StructuredAnswer,
    TaskKind,
    TimeInterval,
    check_format,
    parse_answer,
    parse_caption_analysis,
    serialize_answer,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CaptionAnalysis",
    "FormatError",
    "Label",
    "ObjectTrack",
    "StructuredAnswer",
    "TaskKind",
    "TimeInterval",
    "check_format",
    "parse_answer",
    "parse_caption_analysis",
    "serialize_answer",
]
