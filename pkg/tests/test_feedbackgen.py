import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedloc.core import ClauseSet, RefKind, Span, Temporal, clips_in_span
from feedloc.feedbackgen import (
    DEFAULT_DROP_PROBS,
    FeedbackConfig,
    FeedbackTemplateBank,
    NoSignal,
    OverlapError,
    build_qnf_dataset,
    caption_span,
    compose_clauses,
    extract_clauses,
    feedback_embedding,
    make_simple_temporal,
    relative_order,
    render_feedback,
)
from feedloc.refsample import ReferencePool, fit_beta, sample_reference_pools
from feedloc.synthworld import AFTER_TOKEN, BEFORE_TOKEN, embed_terms

BANK = FeedbackTemplateBank()
TERMS = st.lists(st.sampled_from([f"at{i:03d}" for i in range(12)]), min_size=0, max_size=3, unique=True)


def test_caption_span(small_world):
    ep = small_world["train"][0]
    q = ep.queries[0]
    idx = clips_in_span(q.gt_span, ep.m)
    assert caption_span(ep, q.gt_span) == sorted(set(ep.clip_events[idx[0]]))
    wider = Span(q.gt_span.start, q.gt_span.end + 1) if q.gt_span.end < ep.m else \
        Span(q.gt_span.start - 1, q.gt_span.end)
    union = set()
    for i in clips_in_span(wider, ep.m):
        union |= set(ep.clip_events[i])
    assert caption_span(ep, wider) == sorted(union)


def test_compose_examples():
    assert compose_clauses(Span(2, 5), Span(10, 14), ["x"], ["y"], []).temporal is Temporal.BEFORE
    c = compose_clauses(Span(10, 14), Span(2, 5), ["mug", "blue"], ["mug", "white"], ["mug"])
    assert set(c.contains) <= {"blue"} and set(c.not_contains) <= {"white"}
    assert c.temporal is Temporal.AFTER
    c = compose_clauses(Span(2, 6), Span(4, 9), ["mug", "blue"], ["mug", "white"], ["mug"])
    assert c.temporal is Temporal.NONE and c.contains == ("blue",)


def test_compose_never_leaks_answer():
    c = compose_clauses(Span(2, 6), Span(10, 12), ["ev1", "at1", "at2"], ["ev1"],
                        ["<what>", "ev1"], explanation=["<what>", "ev1", "at1"])
    assert "at1" not in c.contains and c.contains == ("at2",)


def test_compose_no_signal():
    with pytest.raises(NoSignal):
        compose_clauses(Span(2, 6), Span(4, 9), ["ev1"], ["ev1"], ["ev1"])


def test_render_temporal_only_and_deterministic():
    cl = ClauseSet((), (), Temporal.BEFORE)
    text, kept = render_feedback(cl, BANK, 3)
    assert kept == cl and "before" in text
    assert render_feedback(cl, BANK, 3) == (text, kept)


def test_render_presence_frequencies():
    cl = ClauseSet(("at001",), ("at002",), Temporal.AFTER)
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.zeros(3)
    for _ in range(n):
        _, kept = render_feedback(cl, BANK, rng)
        counts += [kept.has_contains, kept.has_not_contains, kept.has_temporal]
    p = DEFAULT_DROP_PROBS
    want = [p["keep_all"] + p["drop_contrastive"], p["keep_all"] + p["drop_contains"], 1.0]
    assert np.all(np.abs(counts / n - want) <= 0.02)


@settings(max_examples=200, deadline=None)
@given(TERMS, TERMS, st.sampled_from(list(Temporal)), st.integers(0, 2**31))
def test_render_is_clause_faithful(contains, excluded, temporal, seed):
    excluded = [t for t in excluded if t not in contains]
    cl = ClauseSet(tuple(sorted(contains)), tuple(sorted(excluded)), temporal)
    if cl.empty:
        return
    text, kept = render_feedback(cl, BANK, seed)
    assert extract_clauses(text, BANK) == kept
    assert set(kept.contains) <= set(cl.contains) and set(kept.not_contains) <= set(cl.not_contains)


def test_simple_temporal(emb):
    s = make_simple_temporal(Span(2, 5), Span(10, 12), BANK, 0, emb=emb)
    assert s.text in BANK.simple_temporal_pool["Before"] and s.ref_kind is RefKind.SIMPLE_TEMPORAL
    assert s.clauses == ClauseSet((), (), Temporal.BEFORE)
    a = make_simple_temporal(Span(20, 25), Span(10, 12), BANK, 0, emb=emb)
    assert a.text in BANK.simple_temporal_pool["After"]
    f = make_simple_temporal(Span(20, 25), Span(10, 12), BANK, 0, emb=emb, flip=True)
    assert f.clauses.temporal is Temporal.BEFORE
    with pytest.raises(OverlapError):
        make_simple_temporal(Span(2, 5), Span(4, 12), BANK, 0, emb=emb)


def test_feedback_embedding_rows(emb):
    cl = ClauseSet(("at001",), ("at002", "at003"), Temporal.AFTER)
    e = feedback_embedding(emb, cl)
    assert e.shape == (4, emb.dim)
    assert np.array_equal(e[0], embed_terms(emb, ["at001"])[0])
    assert np.array_equal(e[1:3], -embed_terms(emb, ["at002", "at003"]))
    assert np.array_equal(e[3], emb.row(AFTER_TOKEN))
    assert np.array_equal(feedback_embedding(emb, ClauseSet((), (), Temporal.BEFORE))[0],
                          emb.row(BEFORE_TOKEN))


def test_eval_split_has_five_per_query(small_world, small_qnf):
    by_q = small_qnf["test"].by_query()
    for ep in small_world["test"]:
        for q in ep.queries:
            fbs = by_q[q.id]
            assert len(fbs) == 5
            assert sum(f.ref_kind is RefKind.SIMPLE_TEMPORAL for f in fbs) >= 1


def test_train_quota(small_world, small_qnf, emb):
    by_q = small_qnf["train"].by_query()
    assert all(len(v) == FeedbackConfig().train_per_query for v in by_q.values())
    kinds = {s.ref_kind.query_relevant for s in small_qnf["train"].samples}
    assert kinds == {True, False}
    eps = small_world["train"]
    beta = fit_beta([q.gt_span.duration for ep in eps for q in ep.queries])
    uncapped = build_qnf_dataset(eps, sample_reference_pools(eps, beta, 0), emb,
                                 FeedbackConfig(train_per_query=None), split="train")
    cfg = FeedbackConfig()
    assert all(len(v) == cfg.train_relevant + cfg.train_irrelevant
               for v in uncapped.by_query().values())


def test_relevant_shortfall_filled_from_irrelevant(small_world, emb):
    ep = small_world["test"][0]
    q = ep.queries[0]
    beta = fit_beta([x.gt_span.duration for e in small_world["train"] for x in e.queries])
    pool = sample_reference_pools([ep], beta, 0)[q.id]
    starved = ReferencePool(q.id, ep.id, [], pool.irrelevant, [])
    ds = build_qnf_dataset([ep], {q.id: starved}, emb, FeedbackConfig(), split="test")
    assert len([s for s in ds.samples if s.query_id == q.id]) == 5
    assert all(not s.ref_kind.query_relevant for s in ds.samples)


def test_empty_world(emb):
    ds = build_qnf_dataset([], {}, emb, FeedbackConfig(), split="test")
    assert ds.samples == [] and ds.errors == {}


def test_dataset_invariants(small_world, small_qnf):
    eps = {ep.id: ep for split in small_world.values() for ep in split}
    for ds in small_qnf.values():
        for s in ds.samples:
            q = eps[s.episode_id].query(s.query_id)
            assert s.embedding_tokens.shape[0] >= 1
            if q.answer_token:
                assert q.answer_token not in s.clauses.contains
            if s.clauses.has_temporal:
                assert relative_order(q.gt_span, s.ref_span) is s.clauses.temporal
            if s.ref_kind is not RefKind.SIMPLE_TEMPORAL:
                assert extract_clauses(s.text) == s.clauses


def test_dataset_deterministic(small_world, emb):
    eps = small_world["test"]
    beta = fit_beta([q.gt_span.duration for ep in small_world["train"] for q in ep.queries])
    pools = sample_reference_pools(eps, beta, 0)
    a = build_qnf_dataset(eps, pools, emb, FeedbackConfig(), split="test")
    b = build_qnf_dataset(eps, pools, emb, FeedbackConfig(), split="test")
    assert [(s.text, s.ref_span) for s in a.samples] == [(s.text, s.ref_span) for s in b.samples]
