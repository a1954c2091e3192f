"""Word-embedding table loaded from word2vec text files, plus name similarity."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_STOPWORDS = frozenset({"a", "an", "the", "of", "group", "some", "and", "with"})


class EmbeddingFormatError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class OutOfVocabulary(LookupError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no embedding for {name!r}")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _tokens(name: str) -> list[str]:
    return [t.strip(".,;:!?\"'()") for t in name.lower().split() if t.strip(".,;:!?\"'()")]


def trigram_jaccard(a: str, b: str) -> float:
    """Jaccard overlap of character trigrams of the space-padded, lowercased names."""

    def grams(s):
        s = f" {' '.join(_tokens(s))} "
        return {s[i:i + 3] for i in range(len(s) - 2)} if s.strip() else set()

    ga, gb = grams(a), grams(b)
    if not ga or not gb:
        return 0.0
    return len(ga & gb) / len(ga | gb)


@dataclass(frozen=True)
class EmbeddingTable:
    dimension: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension <= 0:
            raise EmbeddingFormatError("dimension must be positive")
        for token, vec in self.entries.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dimension,):
                raise EmbeddingFormatError(f"{token!r} has shape {vec.shape}, expected ({self.dimension},)")
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"{token!r} has non-finite components")
            if not np.any(vec):
                raise EmbeddingFormatError(f"{token!r} is a zero vector")
            vec.setflags(write=False)
            self.entries[token] = vec

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def phrase_vector(self, name: str, stopwords=DEFAULT_STOPWORDS) -> np.ndarray:
        """Vector for a possibly multi-word name.

        Tries the name itself and its underscore-joined form, then the mean of
        the in-vocabulary tokens left after stop-word removal (all tokens if
        every token is a stop word).
        """
        tokens = _tokens(name)
        for key in (name.strip().lower(), "_".join(tokens)):
            if key in self.entries:
                return self.entries[key]
        content = [t for t in tokens if t not in stopwords] or tokens
        vecs = [self.entries[t] for t in content if t in self.entries]
        if not vecs:
            raise OutOfVocabulary(name)
        return np.mean(vecs, axis=0)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        """Read a word2vec text file: a ``count dim`` header, then ``token v1 .. vD`` lines."""
        path = Path(path)
        with path.open(encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2 or not all(h.isdigit() for h in header):
                raise EmbeddingFormatError(f"{path}: header must be 'count dim'")
            count, dim = int(header[0]), int(header[1])
            entries = {}
            for lineno, line in enumerate(f, start=2):
                parts = line.rstrip("\n").rstrip().split(" ")
                if parts == [""]:
                    continue
                if len(parts) != dim + 1:
                    raise EmbeddingFormatError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
                try:
                    values = [float(v) for v in parts[1:]]
                except ValueError:
                    raise EmbeddingFormatError(f"{path}:{lineno}: unreadable value") from None
                if any(math.isnan(v) for v in values):
                    raise EmbeddingFormatError(f"{path}:{lineno}: NaN in vector for {parts[0]!r}")
                entries[parts[0]] = np.array(values)
        if len(entries) != count:
            raise EmbeddingFormatError(f"{path}: header declares {count} vectors, file has {len(entries)}")
        try:
            return cls(dim, entries)
        except EmbeddingFormatError as exc:
            raise EmbeddingFormatError(f"{path}: {exc}") from None

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            f.write(f"{len(self.entries)} {self.dimension}\n")
            for token, vec in self.entries.items():
                f.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def name_similarity(
    pred: str,
    gold: str,
    table: EmbeddingTable | None,
    fallback: str = "error",
    stopwords=DEFAULT_STOPWORDS,
) -> float:
    """Similarity between a predicted and a gold object name.

    Identical names score 1. Otherwise cosine similarity of phrase vectors is
    used. When a name has no embedding, ``fallback="jaccard"`` switches to
    character-trigram Jaccard; ``fallback="error"`` raises for an unknown gold
    name and scores an unknown predicted name 0, because model output must
    never abort training.
    """
    if fallback not in ("error", "jaccard"):
        raise ValueError(f"unknown fallback policy {fallback!r}")
    if pred.strip().lower() == gold.strip().lower():
        return 1.0
    gold_vec = pred_vec = None
    if table is not None:
        try:
            gold_vec = table.phrase_vector(gold, stopwords)
        except OutOfVocabulary:
            if fallback == "error":
                raise
        try:
            pred_vec = table.phrase_vector(pred, stopwords)
        except OutOfVocabulary:
            pass
    elif fallback == "error":
        raise OutOfVocabulary(gold)
    if gold_vec is not None and pred_vec is not None:
        return cosine_similarity(pred_vec, gold_vec)
    if fallback == "jaccard":
        return trigram_jaccard(pred, gold)
    return 0.0
