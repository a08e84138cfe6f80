"""Seeded synthetic episodes with engineered query ambiguity, plus the token embedder."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from .core import (
    ConfigError,
    EpisodeRecord,
    QueryRecord,
    Span,
    UnknownToken,
    require_clips,
)

BEFORE_TOKEN = "<before>"
AFTER_TOKEN = "<after>"
WHAT_TOKEN = "<what>"
WHERE_TOKEN = "<where>"
RESERVED_TOKENS = (BEFORE_TOKEN, AFTER_TOKEN, WHAT_TOKEN, WHERE_TOKEN)

# repulsion schedule for the token tables; spreads tokens over their
# subspace so worst-case pairwise cosine stays well below the iid level
_REPULSION_STEPS = 200
_REPULSION_POWER = 5
_REPULSION_LR = 0.05


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    vocab_size: int = 256
    embed_dim: int = 32
    episodes: int = 500
    clips_per_episode: tuple[int, int] = (40, 80)
    events_per_episode: tuple[int, int] = (10, 16)
    run_length: tuple[int, int] = (2, 5)
    queries_per_episode: int = 2
    ambiguity_rate: float = 0.8
    distractors: tuple[int, int] = (2, 5)
    what_rate: float = 0.5
    noise_sigma: float = 0.1
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "clips_per_episode", tuple(self.clips_per_episode))
        object.__setattr__(self, "events_per_episode", tuple(self.events_per_episode))
        object.__setattr__(self, "run_length", tuple(self.run_length))
        object.__setattr__(self, "distractors", tuple(self.distractors))
        for name in ("clips_per_episode", "events_per_episode", "run_length", "distractors"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if self.embed_dim < 8:
            raise ConfigError("embed_dim must be at least 8")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError("ambiguity_rate must lie in [0, 1]")
        if not 0.0 <= self.what_rate <= 1.0:
            raise ConfigError("what_rate must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.episodes < 0 or self.queries_per_episode < 1:
            raise ConfigError("episodes must be >= 0 and queries_per_episode >= 1")
        if self.clips_per_episode[0] < 1 or self.run_length[0] < 1:
            raise ConfigError("clip counts and run lengths must be positive")
        if self.vocab_size < 2 * self.events_per_episode[1]:
            raise ConfigError("vocab_size must be at least twice the maximum events per episode")
        n_ev, n_attr = _vocab_partition(self.vocab_size)
        if n_ev < self.queries_per_episode + 1:
            raise ConfigError("vocabulary too small for the requested number of queries")
        if n_attr < 2 + 2 * self.distractors[1]:
            raise ConfigError("vocabulary has too few attribute tokens for the distractor range")

    def with_split(self, split: str, episodes: int) -> "WorldConfig":
        d = asdict(self)
        d.update(split=split, episodes=episodes)
        return WorldConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def _vocab_partition(vocab_size: int) -> tuple[int, int]:
    n_free = vocab_size - len(RESERVED_TOKENS)
    n_events = max(1, n_free // 4)
    return n_events, n_free - n_events


def build_vocabulary(vocab_size: int) -> tuple[list[str], list[str], list[str]]:
    """Return (all tokens, event tokens, attribute tokens)."""
    n_events, n_attr = _vocab_partition(vocab_size)
    events = [f"ev{i:03d}" for i in range(n_events)]
    attrs = [f"at{i:03d}" for i in range(n_attr)]
    return list(RESERVED_TOKENS) + events + attrs, events, attrs


@dataclass(frozen=True)
class Embedder:
    tokens: tuple[str, ...]
    token_table: np.ndarray
    index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.index:
            object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def dim(self) -> int:
        return self.token_table.shape[1]

    def row(self, token: str) -> np.ndarray:
        try:
            return self.token_table[self.index[token]]
        except KeyError:
            raise UnknownToken(token) from None

    def __contains__(self, token: str) -> bool:
        return token in self.index


def _spread(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    table = rng.normal(size=(n, dim))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    for _ in range(_REPULSION_STEPS):
        gram = table @ table.T
        np.fill_diagonal(gram, 0.0)
        peak = np.abs(gram).max()
        if peak == 0.0:
            break
        weights = np.sign(gram) * (np.abs(gram) / peak) ** _REPULSION_POWER
        table = table - _REPULSION_LR * (weights @ table)
        table /= np.linalg.norm(table, axis=1, keepdims=True)
    return table


def make_embedder(seed: int, vocab_size: int, dim: int) -> Embedder:
    """Unit-norm token table; events and reserved tokens occupy the first
    ``3*dim//8`` coordinates, attributes the remaining ones."""
    tokens, events, attrs = build_vocabulary(vocab_size)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x454D42]))
    k = max(4, (3 * dim) // 8)
    n_head = len(RESERVED_TOKENS) + len(events)
    table = np.zeros((len(tokens), dim))
    table[:n_head, :k] = _spread(rng, n_head, k)
    table[n_head:, k:] = _spread(rng, len(attrs), dim - k)
    return Embedder(tuple(tokens), table.astype(np.float32))


def embedder_for(cfg: WorldConfig) -> Embedder:
    return make_embedder(cfg.seed, cfg.vocab_size, cfg.embed_dim)


def embed_terms(emb: Embedder, terms: Sequence[str]) -> np.ndarray:
    if len(terms) == 0:
        return np.zeros((0, emb.dim), dtype=np.float32)
    rows = [emb.row(t) for t in terms]
    return np.stack(rows).astype(np.float32)


def span_embedding(ep: EpisodeRecord, s: Span) -> np.ndarray:
    idx = require_clips(s, ep.m)
    return ep.features[idx].mean(axis=0)


def _episode_rng(cfg: WorldConfig, index: int) -> np.random.Generator:
    split_code = zlib.crc32(cfg.split.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, split_code, index]))


def _layout(rng: np.random.Generator, n_query_runs: int, n_background: int) -> list[int]:
    """Order runs so that no two query runs touch.

    Runs ``0..n_query_runs-1`` are query runs, the rest background runs; each
    query run gets its own gap between consecutive background runs.
    """
    gaps = rng.choice(n_background + 1, size=n_query_runs, replace=False)
    slot_of = {int(g): i for i, g in enumerate(gaps)}
    order: list[int] = []
    for g in range(n_background + 1):
        if g in slot_of:
            order.append(slot_of[g])
        if g < n_background:
            order.append(n_query_runs + g)
    return order


def _make_episode(cfg: WorldConfig, index: int, emb: Embedder,
                  events: list[str], attrs: list[str]) -> EpisodeRecord:
    rng = _episode_rng(cfg, index)
    m = int(rng.integers(cfg.clips_per_episode[0], cfg.clips_per_episode[1] + 1))
    n_runs_total = int(rng.integers(cfg.events_per_episode[0], cfg.events_per_episode[1] + 1))

    q_event_ids = rng.choice(len(events), size=cfg.queries_per_episode, replace=False)
    attr_pool = np.arange(len(attrs))

    # query runs: (query index, is target, attribute ids)
    runs: list[dict] = []
    used_attrs: set[int] = set()
    for qi, ev in enumerate(q_event_ids):
        ambiguous = rng.random() < cfg.ambiguity_rate
        n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1)) if ambiguous else 0
        free = np.array([a for a in attr_pool if a not in used_attrs])
        tgt_attrs = [int(a) for a in rng.choice(free, size=2, replace=False)]
        used_attrs.update(tgt_attrs)
        runs.append(dict(query=qi, event=int(ev), attrs=tgt_attrs, target=True))
        for _ in range(n_dis):
            free = np.array([a for a in attr_pool if a not in used_attrs])
            k = int(rng.integers(1, 3))
            dis_attrs = [int(a) for a in rng.choice(free, size=k, replace=False)]
            used_attrs.update(dis_attrs)
            runs.append(dict(query=qi, event=int(ev), attrs=dis_attrs, target=False))

    n_query_runs = len(runs)
    n_background = max(n_runs_total - n_query_runs, n_query_runs + 1)
    lengths = [int(rng.integers(cfg.run_length[0], cfg.run_length[1] + 1)) for _ in runs]
    while m - sum(lengths) < n_background and max(lengths) > cfg.run_length[0]:
        lengths[int(np.argmax(lengths))] -= 1
    remaining = m - sum(lengths)
    if remaining < n_background:
        raise ConfigError(
            f"episode {index}: {m} clips cannot hold {n_query_runs} query runs "
            f"of total length {sum(lengths)} plus {n_background} background runs"
        )
    # split remaining clips over background runs, each at least one clip
    cuts = np.sort(rng.choice(np.arange(1, remaining), size=n_background - 1, replace=False)) \
        if n_background > 1 else np.array([], dtype=int)
    bg_lengths = np.diff(np.concatenate([[0], cuts, [remaining]])).astype(int).tolist()

    bg_event_pool = np.array([e for e in range(len(events)) if e not in set(q_event_ids.tolist())])
    for L in bg_lengths:
        ev = int(rng.choice(bg_event_pool))
        k = int(rng.integers(0, 3))
        free = np.array([a for a in attr_pool if a not in used_attrs])
        bg_attrs = [int(a) for a in rng.choice(free, size=k, replace=False)] if k else []
        runs.append(dict(query=None, event=ev, attrs=bg_attrs, target=False))
        lengths.append(L)

    order = _layout(rng, n_query_runs, n_background)

    clip_tokens: list[tuple[str, ...]] = []
    gt_of_query: dict[int, Span] = {}
    cursor = 0
    for rid in order:
        run = runs[rid]
        toks = (events[run["event"]],) + tuple(attrs[a] for a in run["attrs"])
        for _ in range(lengths[rid]):
            clip_tokens.append(toks)
        if run["target"]:
            gt_of_query[run["query"]] = Span(float(cursor), float(cursor + lengths[rid]))
        cursor += lengths[rid]
    assert cursor == m

    noise_scale = cfg.noise_sigma / np.sqrt(cfg.embed_dim)
    feats = np.empty((m, cfg.embed_dim), dtype=np.float64)
    for i, toks in enumerate(clip_tokens):
        v = np.mean([emb.row(t).astype(np.float64) for t in toks], axis=0)
        v = v + rng.normal(0.0, noise_scale, size=cfg.embed_dim)
        feats[i] = v / np.linalg.norm(v)

    queries = []
    ep_id = f"{cfg.split}-{index:05d}"
    for qi, ev in enumerate(q_event_ids):
        tgt = next(r for r in runs if r["query"] == qi and r["target"])
        is_what = rng.random() < cfg.what_rate
        terms = (WHAT_TOKEN if is_what else WHERE_TOKEN, events[int(ev)])
        queries.append(QueryRecord(
            id=f"{ep_id}-q{qi}",
            terms=terms,
            embedding_tokens=embed_terms(emb, terms),
            gt_span=gt_of_query[qi],
            target_event=events[int(ev)],
            answer_token=attrs[tgt["attrs"][0]] if is_what else None,
        ))

    return EpisodeRecord(
        id=ep_id,
        clip_events=tuple(clip_tokens),
        features=feats.astype(np.float32),
        queries=tuple(queries),
    )


def generate_world(cfg: WorldConfig, emb: Embedder | None = None) -> list[EpisodeRecord]:
    """Generate ``cfg.episodes`` episodes for ``cfg.split``; pure in ``cfg``."""
    emb = emb if emb is not None else embedder_for(cfg)
    _, events, attrs = build_vocabulary(cfg.vocab_size)
    max_runs = cfg.queries_per_episode * (1 + (cfg.distractors[1] if cfg.ambiguity_rate > 0 else 0))
    min_needed = cfg.run_length[0] * max_runs + max_runs + 1
    if min_needed > cfg.clips_per_episode[0]:
        raise ConfigError(
            f"run lengths exceed clips_per_episode: worst case needs {min_needed} clips"
        )
    return [_make_episode(cfg, i, emb, events, attrs) for i in range(cfg.episodes)]


DEFAULT_SPLITS = {"train": 500, "val": 100, "test": 200}


def generate_splits(cfg: WorldConfig, sizes: dict[str, int] | None = None,
                    emb: Embedder | None = None) -> dict[str, list[EpisodeRecord]]:
    sizes = sizes or DEFAULT_SPLITS
    emb = emb if emb is not None else embedder_for(cfg)
    return {name: generate_world(cfg.with_split(name, n), emb) for name, n in sizes.items()}


def world_tokens(episodes: Iterable[EpisodeRecord]) -> set[str]:
    out: set[str] = set()
    for ep in episodes:
        for toks in ep.clip_events:
            out.update(toks)
    return out
