"""Reference-span sampling: random, similarity-mined, model-failure and other-query spans."""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    EpisodeRecord,
    FeedlocError,
    QueryRecord,
    RefKind,
    Span,
    clips_in_span,
    span_duration,
    tiou,
)
from .synthworld import span_embedding


class DegenerateDurations(FeedlocError):
    pass


class SamplingExhausted(FeedlocError):
    pass


class NoCandidate(FeedlocError):
    pass


MAX_ATTEMPTS = 100
_EDGE = 1e-6


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float
    dur_min: float
    dur_max: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b) and self.a > 0 and self.b > 0):
            raise DegenerateDurations(f"beta parameters must be finite and positive: {self.a}, {self.b}")
        if not self.dur_min < self.dur_max:
            raise DegenerateDurations("dur_min must be below dur_max")

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "dur_min": self.dur_min, "dur_max": self.dur_max}


def fit_beta(durations: Sequence[float]) -> BetaParams:
    """Method-of-moments beta fit to min-max normalised durations."""
    x = np.asarray(durations, dtype=np.float64)
    if len(np.unique(x)) < 3:
        raise DegenerateDurations("need at least three distinct durations")
    lo, hi = float(x.min()), float(x.max())
    u = (x - lo) / (hi - lo)
    u = np.clip(u, _EDGE, 1.0 - _EDGE)
    mu = float(u.mean())
    var = float(u.var())
    if var <= 0.0:
        raise DegenerateDurations("zero variance")
    common = mu * (1.0 - mu) / var - 1.0
    a, b = mu * common, (1.0 - mu) * common
    if a <= 0 or b <= 0:
        raise DegenerateDurations(f"moments give non-positive parameters a={a}, b={b}")
    return BetaParams(a, b, lo, hi)


def sample_random_span(ep: EpisodeRecord, gt: Span, beta: BetaParams,
                       rng_seed: int | np.random.Generator) -> Span:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    m = float(ep.m)
    for _ in range(MAX_ATTEMPTS):
        dur = beta.dur_min + rng.beta(beta.a, beta.b) * (beta.dur_max - beta.dur_min)
        center = rng.uniform(0.0, m)
        start = max(0.0, center - dur / 2.0)
        end = min(m, center + dur / 2.0)
        if end - start <= 0.0:
            continue
        cand = Span(start, end)
        if not clips_in_span(cand, ep.m):
            continue
        if tiou(cand, gt) == 0.0:
            return cand
    raise SamplingExhausted(f"no disjoint span found in {MAX_ATTEMPTS} attempts for gt {gt}")


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def strided_candidates(ep: EpisodeRecord, gt: Span) -> list[Span]:
    width = span_duration(gt)
    stride = max(1, int(math.floor(width / 4)))
    out = []
    start = 0.0
    while start + width <= ep.m:
        out.append(Span(start, start + width))
        start += stride
    return out


def sample_similar_span(ep: EpisodeRecord, gt: Span) -> Span:
    """Window of gt's length, disjoint from gt, whose mean feature is most cosine-similar to gt's."""
    target = span_embedding(ep, gt)
    best, best_score = None, -np.inf
    for cand in strided_candidates(ep, gt):
        if tiou(cand, gt) != 0.0:
            continue
        score = _cosine(span_embedding(ep, cand), target)
        if score > best_score:
            best, best_score = cand, score
    if best is None:
        raise NoCandidate(f"every window of width {span_duration(gt)} overlaps gt {gt}")
    return best


class FailureMode(str, enum.Enum):
    RECALL5 = "Recall5"
    TOP1 = "Top1"


def collect_failure_spans(preds: Mapping[str, Sequence[Span]], gts: Mapping[str, Span],
                          mode: FailureMode | str = FailureMode.RECALL5,
                          iou_thresh: float = 0.3) -> dict[str, Span]:
    """Top-1 predictions of queries the host got wrong.

    ``preds`` maps a query id to its ranked spans (best first).
    """
    mode = FailureMode(mode)
    depth = 5 if mode is FailureMode.RECALL5 else 1
    out = {}
    for qid, ranked in preds.items():
        if not ranked:
            raise ValueError(f"query {qid} has no predictions")
        gt = gts[qid]
        if all(tiou(s, gt) < iou_thresh for s in list(ranked)[:depth]):
            out[qid] = ranked[0]
    return out


def other_query_spans(ep: EpisodeRecord, q: QueryRecord) -> list[Span]:
    return [o.gt_span for o in ep.queries
            if o.id != q.id and tiou(o.gt_span, q.gt_span) == 0.0]


@dataclass
class ReferencePool:
    """Candidate reference spans for one query, grouped by relevance."""

    query_id: str
    episode_id: str
    relevant: list[tuple[Span, RefKind]]
    irrelevant: list[tuple[Span, RefKind]]
    skipped: list[str]


def query_rng(seed: int, query_id: str, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(query_id.encode("utf-8")), stream]))


def sample_reference_pools(episodes: Sequence[EpisodeRecord], beta: BetaParams, seed: int,
                           n_random: int = 4,
                           failures: Mapping[str, Span] | None = None) -> dict[str, ReferencePool]:
    """Build every query's candidate reference spans.

    Sampling failures are recorded in ``skipped`` instead of aborting the episode.
    """
    failures = failures or {}
    pools = {}
    for ep in episodes:
        for q in ep.queries:
            rel: list[tuple[Span, RefKind]] = []
            irr: list[tuple[Span, RefKind]] = []
            skipped: list[str] = []
            if q.id in failures:
                rel.append((failures[q.id], RefKind.MODEL_FAILURE))
            try:
                rel.append((sample_similar_span(ep, q.gt_span), RefKind.SIMILAR_SPAN))
            except NoCandidate as exc:
                skipped.append(f"SimilarSpan: {exc}")
            rng = query_rng(seed, q.id)
            for _ in range(n_random):
                try:
                    irr.append((sample_random_span(ep, q.gt_span, beta, rng), RefKind.RANDOM_SPAN))
                except SamplingExhausted as exc:
                    skipped.append(f"RandomSpan: {exc}")
                    break
            irr.extend((s, RefKind.OTHER_QUERY_SPAN) for s in other_query_spans(ep, q))
            pools[q.id] = ReferencePool(q.id, ep.id, rel, irr, skipped)
    return pools
