"""Feedback synthesis: span captions, clause composition, template rendering and dataset assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import (
    ClauseSet,
    EpisodeRecord,
    FeedbackSample,
    FeedlocError,
    QueryRecord,
    RefKind,
    Span,
    Temporal,
    require_clips,
    tiou,
)
from .refsample import ReferencePool, query_rng
from .synthworld import AFTER_TOKEN, BEFORE_TOKEN, Embedder, embed_terms


class NoSignal(FeedlocError):
    pass


class OverlapError(FeedlocError):
    pass


DIRECTION_TOKEN = {Temporal.BEFORE: BEFORE_TOKEN, Temporal.AFTER: AFTER_TOKEN}


@dataclass(frozen=True)
class FeedbackTemplateBank:
    contains_templates: tuple[str, ...] = (
        "I mean the one with {terms}",
        "Look for {terms}",
        "There should be {terms} in it",
        "It had {terms}",
    )
    not_contains_templates: tuple[str, ...] = (
        "not the one with {terms}",
        "there was no {terms}",
        "skip anything showing {terms}",
    )
    temporal_templates: tuple[str, ...] = (
        "It was {direction} this",
        "Search {direction} that moment",
        "Go {direction} this part",
    )
    combo_templates: tuple[str, ...] = (
        "{a}. {b}",
        "{a}, {b}",
        "{a}; {b}",
    )
    simple_temporal_pool: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: {
        "Before": ("I think it was before this", "Before this moment", "look before this",
                   "Earlier than this, before it"),
        "After": ("I think it was after this", "After this moment", "look after this",
                  "Later than this, after it"),
    })

    def __post_init__(self):
        for name in ("contains_templates", "not_contains_templates",
                     "temporal_templates", "combo_templates"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        for key in ("Before", "After"):
            if not self.simple_temporal_pool.get(key):
                raise ValueError(f"simple_temporal_pool[{key!r}] must be nonempty")


# probability of each terse-user rendering style; keys name which components survive
DEFAULT_DROP_PROBS = {
    "keep_all": 0.4,
    "drop_contrastive": 0.2,
    "drop_contains": 0.2,
    "temporal_only": 0.2,
}


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def caption_span(ep: EpisodeRecord, s: Span) -> list[str]:
    toks: set[str] = set()
    for i in require_clips(s, ep.m):
        toks.update(ep.clip_events[i])
    return sorted(toks)


def explain(query: QueryRecord) -> list[str]:
    """What makes the ground-truth span answer the query (query terms plus the answer token)."""
    return list(query.explanation)


def relative_order(gt: Span, ref: Span) -> Temporal:
    if gt.end <= ref.start:
        return Temporal.BEFORE
    if gt.start >= ref.end:
        return Temporal.AFTER
    return Temporal.NONE


def compose_clauses(gt: Span, ref: Span, D_q: Sequence[str], D_f: Sequence[str],
                    query_terms: Sequence[str], explanation: Sequence[str] = ()) -> ClauseSet:
    if gt == ref:
        raise ValueError("reference span equals the ground truth")
    hidden = set(query_terms) | set(explanation)
    dq = set(D_q)
    contains = tuple(sorted(dq - hidden))
    not_contains = tuple(sorted(set(D_f) - dq))
    clauses = ClauseSet(contains, not_contains, relative_order(gt, ref))
    if clauses.empty:
        raise NoSignal(f"no contains, not-contains or temporal cue for gt {gt} vs ref {ref}")
    return clauses


def _join(terms: Sequence[str]) -> str:
    return " and ".join(terms)


def _drop(clauses: ClauseSet, style: str) -> ClauseSet:
    if style == "keep_all":
        kept = clauses
    elif style == "drop_contrastive":
        kept = ClauseSet(clauses.contains, (), clauses.temporal)
    elif style == "drop_contains":
        kept = ClauseSet((), clauses.not_contains, clauses.temporal)
    elif style == "temporal_only":
        kept = ClauseSet((), (), clauses.temporal)
    else:
        raise ValueError(f"unknown rendering style {style!r}")
    return clauses if kept.empty else kept


def render_feedback(clauses: ClauseSet, bank: FeedbackTemplateBank, rng_seed,
                    drop_probs: Mapping[str, float] | None = None) -> tuple[str, ClauseSet]:
    """Render clauses to text, possibly dropping components; returns what was actually said."""
    if clauses.empty:
        raise NoSignal("cannot render empty clauses")
    rng = _as_rng(rng_seed)
    probs = drop_probs or DEFAULT_DROP_PROBS
    styles = list(probs)
    p = np.array([probs[s] for s in styles], dtype=np.float64)
    style = styles[int(rng.choice(len(styles), p=p / p.sum()))]
    kept = _drop(clauses, style)

    parts = []
    if kept.has_temporal:
        tpl = bank.temporal_templates[int(rng.integers(len(bank.temporal_templates)))]
        parts.append(tpl.format(direction=kept.temporal.value.lower()))
    if kept.has_contains:
        tpl = bank.contains_templates[int(rng.integers(len(bank.contains_templates)))]
        parts.append(tpl.format(terms=_join(kept.contains)))
    if kept.has_not_contains:
        tpl = bank.not_contains_templates[int(rng.integers(len(bank.not_contains_templates)))]
        parts.append(tpl.format(terms=_join(kept.not_contains)))
    text = parts[0]
    for part in parts[1:]:
        tpl = bank.combo_templates[int(rng.integers(len(bank.combo_templates)))]
        text = tpl.format(a=text, b=part)
    return text + ".", kept


_TERMS_RE = r"(?P<terms>[\w<>]+(?: and [\w<>]+)*)"


def _template_regex(tpl: str) -> re.Pattern:
    head, tail = tpl.split("{terms}")
    return re.compile(re.escape(head) + _TERMS_RE + re.escape(tail))


def extract_clauses(text: str, bank: FeedbackTemplateBank | None = None) -> ClauseSet:
    """Recover the clause set from text rendered with ``bank``."""
    bank = bank or FeedbackTemplateBank()
    rest = text
    found: dict[str, list[str]] = {"not": [], "contains": []}
    for key, templates in (("not", bank.not_contains_templates),
                           ("contains", bank.contains_templates)):
        for tpl in templates:
            rx = _template_regex(tpl)
            for mt in rx.finditer(rest):
                found[key].extend(mt.group("terms").split(" and "))
            rest = rx.sub(" ", rest)
    low = rest.lower()
    has_before = re.search(r"\bbefore\b", low) is not None
    has_after = re.search(r"\bafter\b", low) is not None
    if has_before and not has_after:
        temporal = Temporal.BEFORE
    elif has_after and not has_before:
        temporal = Temporal.AFTER
    else:
        temporal = Temporal.NONE
    return ClauseSet(tuple(sorted(set(found["contains"]))),
                     tuple(sorted(set(found["not"]))), temporal)


def feedback_embedding(emb: Embedder, clauses: ClauseSet) -> np.ndarray:
    """Token rows for a clause set; excluded terms enter with negated embeddings."""
    rows = [embed_terms(emb, clauses.contains), -embed_terms(emb, clauses.not_contains)]
    if clauses.has_temporal:
        rows.append(embed_terms(emb, [DIRECTION_TOKEN[clauses.temporal]]))
    return np.concatenate(rows, axis=0).astype(np.float32)


def make_simple_temporal(gt: Span, ref: Span, bank: FeedbackTemplateBank, rng_seed, *,
                         emb: Embedder, query_id: str = "", episode_id: str = "",
                         flip: bool = False) -> FeedbackSample:
    """Before/after-only feedback. ``flip`` deliberately states the wrong direction."""
    order = relative_order(gt, ref)
    if order is Temporal.NONE:
        raise OverlapError(f"gt {gt} overlaps ref {ref}")
    if flip:
        order = order.flipped()
    rng = _as_rng(rng_seed)
    pool = bank.simple_temporal_pool[order.value]
    text = pool[int(rng.integers(len(pool)))]
    clauses = ClauseSet((), (), order)
    return FeedbackSample(query_id=query_id, ref_span=ref, clauses=clauses, text=text,
                          embedding_tokens=feedback_embedding(emb, clauses),
                          ref_kind=RefKind.SIMPLE_TEMPORAL, episode_id=episode_id)


class SynthesizerBackend(Protocol):
    def caption(self, ep: EpisodeRecord, span: Span) -> list[str]: ...

    def explain(self, query: QueryRecord) -> list[str]: ...

    def feedback(self, D_q: Sequence[str], D_f: Sequence[str], E_q: Sequence[str],
                 order: tuple[Span, Span], query_terms: Sequence[str],
                 rng: np.random.Generator) -> tuple[str, ClauseSet]: ...


@dataclass
class TemplateSynthesizer:
    """Deterministic stand-in for the captioning/explanation/feedback language models."""

    bank: FeedbackTemplateBank = field(default_factory=FeedbackTemplateBank)
    drop_probs: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_DROP_PROBS))

    def caption(self, ep: EpisodeRecord, span: Span) -> list[str]:
        return caption_span(ep, span)

    def explain(self, query: QueryRecord) -> list[str]:
        return explain(query)

    def feedback(self, D_q, D_f, E_q, order, query_terms, rng):
        gt, ref = order
        clauses = compose_clauses(gt, ref, D_q, D_f, query_terms, E_q)
        return render_feedback(clauses, self.bank, rng, self.drop_probs)


@dataclass(frozen=True)
class FeedbackConfig:
    seed: int = 0
    train_relevant: int = 1
    train_irrelevant: int = 1
    train_simple: int = 0
    # train split only: keep this many of the quota's references per query, drawn at random
    train_per_query: int | None = 1
    eval_relevant: int = 2
    eval_irrelevant: int = 2
    eval_simple: int = 1
    n_random: int = 4
    drop_probs: tuple[tuple[str, float], ...] = tuple(DEFAULT_DROP_PROBS.items())

    def quota(self, split: str) -> tuple[int, int, int]:
        if split == "train":
            return self.train_relevant, self.train_irrelevant, self.train_simple
        return self.eval_relevant, self.eval_irrelevant, self.eval_simple


@dataclass
class QnfDataset:
    samples: list[FeedbackSample]
    errors: dict[str, list[str]]

    def by_query(self) -> dict[str, list[FeedbackSample]]:
        out: dict[str, list[FeedbackSample]] = {}
        for s in self.samples:
            out.setdefault(s.query_id, []).append(s)
        return out


def _disjoint(gt: Span, ref: Span) -> bool:
    return tiou(gt, ref) == 0.0 and relative_order(gt, ref) is not Temporal.NONE


def build_qnf_dataset(episodes: Sequence[EpisodeRecord], pools: Mapping[str, ReferencePool],
                      emb: Embedder, cfg: FeedbackConfig = FeedbackConfig(), split: str = "train",
                      synth: SynthesizerBackend | None = None) -> QnfDataset:
    """Assemble feedback samples per query under the split's (relevant, irrelevant, simple) quota.

    A short relevant pool is topped up from the irrelevant pool.
    """
    synth = synth or TemplateSynthesizer(drop_probs=dict(cfg.drop_probs))
    bank = getattr(synth, "bank", FeedbackTemplateBank())
    n_rel, n_irr, n_simple = cfg.quota(split)
    samples: list[FeedbackSample] = []
    errors: dict[str, list[str]] = {}
    for ep in episodes:
        for q in ep.queries:
            pool = pools.get(q.id)
            if pool is None:
                errors[q.id] = ["no reference pool"]
                continue
            errs = list(pool.skipped)
            rng = query_rng(cfg.seed, q.id, stream=1)
            rel = list(pool.relevant[:n_rel])
            irr_needed = n_irr + (n_rel - len(rel))
            irr = list(pool.irrelevant[:irr_needed])
            if len(irr) < irr_needed:
                errs.append(f"irrelevant pool short: {len(irr)} < {irr_needed}")
            D_q = synth.caption(ep, q.gt_span)
            E_q = synth.explain(q)
            refs = rel + irr
            if split == "train" and cfg.train_per_query is not None and len(refs) > cfg.train_per_query:
                keep = sorted(rng.choice(len(refs), size=cfg.train_per_query, replace=False))
                refs = [refs[i] for i in keep]
            for ref, kind in refs:
                D_f = synth.caption(ep, ref)
                try:
                    text, clauses = synth.feedback(D_q, D_f, E_q, (q.gt_span, ref), q.terms, rng)
                except NoSignal as exc:
                    if _disjoint(q.gt_span, ref):
                        samples.append(make_simple_temporal(q.gt_span, ref, bank, rng, emb=emb,
                                                            query_id=q.id, episode_id=ep.id))
                    else:
                        errs.append(str(exc))
                    continue
                samples.append(FeedbackSample(
                    query_id=q.id, ref_span=ref, clauses=clauses, text=text,
                    embedding_tokens=feedback_embedding(emb, clauses),
                    ref_kind=kind, episode_id=ep.id))
            disjoint_refs = [r for r, _ in pool.irrelevant + pool.relevant if _disjoint(q.gt_span, r)]
            for k in range(n_simple):
                if not disjoint_refs:
                    errs.append("no disjoint reference for simple temporal feedback")
                    break
                ref = disjoint_refs[k % len(disjoint_refs)]
                samples.append(make_simple_temporal(q.gt_span, ref, bank, rng, emb=emb,
                                                    query_id=q.id, episode_id=ep.id))
            if errs:
                errors[q.id] = errs
    return QnfDataset(samples, errors)
