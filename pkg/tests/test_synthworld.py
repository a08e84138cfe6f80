import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedloc.core import ConfigError, DegenerateSpan, Span, UnknownToken, clips_in_span, tiou
from feedloc.synthworld import (
    RESERVED_TOKENS,
    WorldConfig,
    embed_terms,
    embedder_for,
    generate_world,
    span_embedding,
    world_tokens,
)


def _runs(ep, token):
    """Maximal runs of clips carrying ``token`` as (start, end)."""
    out, start = [], None
    for i, toks in enumerate(ep.clip_events + ((),)):
        if token in toks and start is None:
            start = i
        elif token not in toks and start is not None:
            out.append((start, i))
            start = None
    return out


def test_world_is_deterministic():
    cfg = WorldConfig(seed=3, episodes=5)
    a, b = generate_world(cfg), generate_world(cfg)
    for x, y in zip(a, b):
        assert x.id == y.id and x.clip_events == y.clip_events
        assert x.features.tobytes() == y.features.tobytes()
        for qa, qb in zip(x.queries, y.queries):
            assert qa.terms == qb.terms and qa.gt_span == qb.gt_span
            assert qa.embedding_tokens.tobytes() == qb.embedding_tokens.tobytes()


def test_seed_changes_world():
    a = generate_world(WorldConfig(seed=1, episodes=2))
    b = generate_world(WorldConfig(seed=2, episodes=2))
    assert a[0].features.tobytes() != b[0].features.tobytes()


def test_structural_predicates_seed7():
    eps = generate_world(WorldConfig(seed=7, episodes=50, clips_per_episode=(40, 80)))
    assert len(eps) == 50
    for ep in eps:
        assert 40 <= ep.m <= 80
        assert np.allclose(np.linalg.norm(ep.features, axis=1), 1.0, atol=1e-5)
        assert np.all(np.isfinite(ep.features))


def test_full_ambiguity_duplicates_every_target_event():
    eps = generate_world(WorldConfig(seed=5, episodes=20, ambiguity_rate=1.0))
    for ep in eps:
        for q in ep.queries:
            assert len(_runs(ep, q.target_event)) >= 2


def test_gt_clips_carry_target_event_and_answer(small_world):
    for eps in small_world.values():
        for ep in eps:
            for q in ep.queries:
                idx = clips_in_span(q.gt_span, ep.m)
                assert idx
                assert all(q.target_event in ep.clip_events[i] for i in idx)
                if q.answer_token:
                    assert all(q.answer_token in ep.clip_events[i] for i in idx)
                # distractor runs share the event but not the gt's attribute set
                gt_attrs = set(ep.clip_events[idx[0]][1:])
                for s, e in _runs(ep, q.target_event):
                    if (s, e) != (int(q.gt_span.start), int(q.gt_span.end)):
                        assert tiou(Span(s, e), q.gt_span) == 0.0
                        assert set(ep.clip_events[s][1:]) != gt_attrs


def test_clip_tokens_in_vocabulary(small_world, emb):
    for eps in small_world.values():
        assert all(t in emb for t in world_tokens(eps))


def test_separability_floor(world_cfg, emb):
    eps = generate_world(world_cfg.with_split("sep", 30), emb)
    table = emb.token_table.astype(np.float64)
    good = total = 0
    for ep in eps:
        cos = ep.features.astype(np.float64) @ table.T
        for i, toks in enumerate(ep.clip_events):
            own = cos[i, emb.index[toks[0]]]
            members = {emb.index[t] for t in toks}
            others = np.delete(cos[i], sorted(members))
            good += own > others.max()
            total += 1
    assert good / total >= 0.95


def test_embedder_rows_unit_norm_and_deterministic(world_cfg):
    a, b = embedder_for(world_cfg), embedder_for(world_cfg)
    assert np.allclose(np.linalg.norm(a.token_table, axis=1), 1.0, atol=1e-6)
    assert a.token_table.tobytes() == b.token_table.tobytes()
    assert all(t in a for t in RESERVED_TOKENS)


def test_embed_terms_examples(emb):
    assert embed_terms(emb, []).shape == (0, emb.dim)
    a = embed_terms(emb, ["ev001", "ev001"])
    assert np.array_equal(a[0], a[1])
    b = embed_terms(emb, ["ev001", "at002"])
    assert np.array_equal(b[0], emb.row("ev001")) and np.array_equal(b[1], emb.row("at002"))
    with pytest.raises(UnknownToken):
        embed_terms(emb, ["mug"])


def test_span_embedding(small_world):
    ep = small_world["train"][0]
    assert np.array_equal(span_embedding(ep, Span(3, 4)), ep.features[3])
    assert np.allclose(span_embedding(ep, Span(3, 5)), (ep.features[3] + ep.features[4]) / 2)
    loop = np.zeros(ep.features.shape[1])
    for i in range(4):
        loop += ep.features[i]
    assert np.allclose(span_embedding(ep, Span(0, 4)), loop / 4, atol=1e-6)
    with pytest.raises(DegenerateSpan):
        span_embedding(ep, Span(3.2, 3.6))


@pytest.mark.parametrize("kw", [
    dict(clips_per_episode=(50, 40)),
    dict(embed_dim=4),
    dict(ambiguity_rate=1.5),
    dict(noise_sigma=-0.1),
    dict(vocab_size=20),
])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        WorldConfig(**kw)


def test_infeasible_run_lengths():
    with pytest.raises(ConfigError):
        generate_world(WorldConfig(episodes=1, clips_per_episode=(10, 12), run_length=(6, 8)))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_any_seed_gives_valid_episode(seed):
    (ep,) = generate_world(WorldConfig(seed=seed, episodes=1))
    for q in ep.queries:
        assert q.gt_span.within(ep.m)
        assert q.embedding_tokens.shape == (len(q.terms), 32)
