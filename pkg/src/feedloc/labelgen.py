"""Clip-level alignment pseudo-labels from feedback clauses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    EpisodeRecord,
    FeedbackSample,
    QueryRecord,
    Span,
    Temporal,
    require_clips,
)
from .synthworld import Embedder, embed_terms

DEFAULT_SMOOTH_SIGMA = 2.0
# slack on the threshold so float rounding in the mean cannot flip a tie
_TIE_EPS = 1e-12


@dataclass(frozen=True)
class AlignmentLabels:
    s_c: np.ndarray
    s_k: np.ndarray
    l_c: np.ndarray
    l_k: np.ndarray
    l_t: np.ndarray
    l: np.ndarray
    has_contains: bool
    has_not_contains: bool
    has_temporal: bool

    @property
    def m(self) -> int:
        return len(self.l)

    def to_dict(self) -> dict:
        return {
            "s_c": self.s_c.tolist(), "s_k": self.s_k.tolist(),
            "l_c": self.l_c.astype(int).tolist(), "l_k": self.l_k.astype(int).tolist(),
            "l_t": self.l_t.astype(int).tolist(), "l": self.l.astype(int).tolist(),
            "present": {"has_contains": self.has_contains,
                        "has_not_contains": self.has_not_contains,
                        "has_temporal": self.has_temporal},
        }


def clause_similarity(emb: Embedder, clause_terms: Sequence[str], ep: EpisodeRecord) -> np.ndarray:
    if not clause_terms:
        raise ValueError("clause_terms must be nonempty")
    terms = embed_terms(emb, clause_terms).astype(np.float64)
    feats = ep.features.astype(np.float64)
    terms = terms / np.linalg.norm(terms, axis=1, keepdims=True)
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    cos = feats @ terms.T
    return (cos.mean(axis=1) + 1.0) / 2.0


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_and_normalize(scores: np.ndarray, sigma: float = DEFAULT_SMOOTH_SIGMA) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    kernel = gaussian_kernel(sigma)
    r = len(kernel) // 2
    if r:
        # edge-inclusive mirror (d c b a | a b c d), numpy's "symmetric" mode
        x = np.convolve(np.pad(x, r, mode="symmetric"), kernel, mode="valid")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def invert_not_contains(s_n: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(s_n, dtype=np.float64)


def binarize(scores: np.ndarray, gt: Span) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    inside = scores[require_clips(gt, len(scores))]
    delta = inside.mean() - 3.0 * inside.std()
    return scores >= delta - _TIE_EPS


def temporal_labels(ref: Span, direction: Temporal, m: int) -> np.ndarray:
    i = np.arange(m)
    if direction is Temporal.BEFORE:
        return (i + 1) <= ref.start
    if direction is Temporal.AFTER:
        return i >= ref.end
    return np.ones(m, dtype=bool)


def make_labels(sample: FeedbackSample, query: QueryRecord, ep: EpisodeRecord, emb: Embedder,
                sigma: float = DEFAULT_SMOOTH_SIGMA) -> AlignmentLabels:
    m = ep.m
    cl = sample.clauses
    ones = np.ones(m, dtype=bool)
    if cl.has_contains:
        s_c = smooth_and_normalize(clause_similarity(emb, cl.contains, ep), sigma)
        l_c = binarize(s_c, query.gt_span)
    else:
        s_c, l_c = np.zeros(m), ones
    if cl.has_not_contains:
        s_n = smooth_and_normalize(clause_similarity(emb, cl.not_contains, ep), sigma)
        s_k = invert_not_contains(s_n)
        l_k = binarize(s_k, query.gt_span)
    else:
        s_k, l_k = np.zeros(m), ones
    l_t = temporal_labels(sample.ref_span, cl.temporal, m)
    return AlignmentLabels(
        s_c=s_c, s_k=s_k, l_c=l_c, l_k=l_k, l_t=l_t, l=l_c & l_k & l_t,
        has_contains=cl.has_contains, has_not_contains=cl.has_not_contains,
        has_temporal=cl.has_temporal,
    )
