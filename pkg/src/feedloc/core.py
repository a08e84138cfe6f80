"""Domain types and span geometry shared across the package."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class FeedlocError(Exception):
    """Base class for all package errors."""


class DegenerateSpan(FeedlocError):
    pass


class InvalidSpan(FeedlocError, ValueError):
    pass


class ShapeMismatch(FeedlocError, ValueError):
    pass


class ConfigError(FeedlocError, ValueError):
    pass


class UnknownToken(FeedlocError, KeyError):
    pass


class Temporal(str, enum.Enum):
    BEFORE = "Before"
    AFTER = "After"
    NONE = "None"

    def flipped(self) -> "Temporal":
        if self is Temporal.BEFORE:
            return Temporal.AFTER
        if self is Temporal.AFTER:
            return Temporal.BEFORE
        return self


class RefKind(str, enum.Enum):
    RANDOM_SPAN = "RandomSpan"
    SIMILAR_SPAN = "SimilarSpan"
    MODEL_FAILURE = "ModelFailure"
    OTHER_QUERY_SPAN = "OtherQuerySpan"
    SIMPLE_TEMPORAL = "SimpleTemporal"

    @property
    def query_relevant(self) -> bool:
        return self in (RefKind.SIMILAR_SPAN, RefKind.MODEL_FAILURE)


@dataclass(frozen=True, order=True)
class Span:
    """Half-open interval ``[start, end)`` measured in clips."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise InvalidSpan(f"non-finite span {self.start!r}, {self.end!r}")
        if self.start < 0 or self.start >= self.end:
            raise InvalidSpan(f"invalid span [{self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def within(self, m: int) -> bool:
        return self.end <= m

    def to_list(self) -> list[float]:
        return [float(self.start), float(self.end)]


def span_duration(a: Span) -> float:
    return a.end - a.start


def intersection(a: Span, b: Span) -> float:
    return max(0.0, min(a.end, b.end) - max(a.start, b.start))


def tiou(a: Span, b: Span) -> float:
    inter = intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = span_duration(a) + span_duration(b) - inter
    return inter / union


def clips_in_span(a: Span, m: int) -> list[int]:
    """Indices of clips ``[i, i+1)`` overlapping ``a`` by strictly more than half a clip."""
    lo = max(0, int(math.floor(a.start)))
    hi = min(m, int(math.ceil(a.end)))
    out = []
    for i in range(lo, hi):
        if min(a.end, i + 1) - max(a.start, i) > 0.5:
            out.append(i)
    return out


def require_clips(a: Span, m: int) -> list[int]:
    idx = clips_in_span(a, m)
    if not idx:
        raise DegenerateSpan(f"span [{a.start}, {a.end}) covers no clip of a {m}-clip episode")
    return idx


@dataclass(frozen=True)
class QueryRecord:
    id: str
    terms: tuple[str, ...]
    embedding_tokens: np.ndarray
    gt_span: Span
    # synthetic-world bookkeeping: the event token targeted and, for
    # what-questions, the attribute token that answers the query
    target_event: str = ""
    answer_token: str | None = None

    @property
    def is_what_question(self) -> bool:
        return self.answer_token is not None

    @property
    def explanation(self) -> tuple[str, ...]:
        extra = (self.answer_token,) if self.answer_token else ()
        return tuple(self.terms) + extra


@dataclass(frozen=True)
class EpisodeRecord:
    id: str
    clip_events: tuple[tuple[str, ...], ...]
    features: np.ndarray
    queries: tuple[QueryRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        m = len(self.clip_events)
        if m < 1:
            raise ConfigError(f"episode {self.id} has no clips")
        if self.features.ndim != 2 or self.features.shape[0] != m:
            raise ShapeMismatch(
                f"episode {self.id}: features {self.features.shape} vs {m} clips"
            )
        if not np.all(np.isfinite(self.features)):
            raise ConfigError(f"episode {self.id}: non-finite features")
        for q in self.queries:
            if not q.gt_span.within(m):
                raise InvalidSpan(f"query {q.id}: gt {q.gt_span} exceeds {m} clips")

    @property
    def m(self) -> int:
        return len(self.clip_events)

    def query(self, qid: str) -> QueryRecord:
        for q in self.queries:
            if q.id == qid:
                return q
        raise KeyError(qid)


@dataclass(frozen=True)
class ClauseSet:
    contains: tuple[str, ...] = ()
    not_contains: tuple[str, ...] = ()
    temporal: Temporal = Temporal.NONE

    def __post_init__(self):
        overlap = set(self.contains) & set(self.not_contains)
        if overlap:
            raise ValueError(f"clause tokens both contained and excluded: {sorted(overlap)}")

    @property
    def has_contains(self) -> bool:
        return bool(self.contains)

    @property
    def has_not_contains(self) -> bool:
        return bool(self.not_contains)

    @property
    def has_temporal(self) -> bool:
        return self.temporal is not Temporal.NONE

    @property
    def empty(self) -> bool:
        return not (self.has_contains or self.has_not_contains or self.has_temporal)


@dataclass(frozen=True)
class FeedbackSample:
    query_id: str
    ref_span: Span
    clauses: ClauseSet
    text: str
    embedding_tokens: np.ndarray
    ref_kind: RefKind
    episode_id: str = ""

    def __post_init__(self):
        if self.embedding_tokens.ndim != 2 or self.embedding_tokens.shape[0] == 0:
            raise ShapeMismatch("feedback embedding must be a nonempty matrix")
