"""Recall metrics and experiment runners (single-turn, multi-turn, noisy feedback)."""

from __future__ import annotations

import csv
import enum
import io
import json
import zlib
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import EpisodeRecord, FeedbackSample, FeedlocError, QueryRecord, RefKind, Span, tiou
from .feedbackgen import FeedbackTemplateBank, OverlapError, make_simple_temporal
from .falm import FalmModel
from .localizer import (
    EmAdapter,
    HostModel,
    SpanPrediction,
    adapter_apply,
    decode_single,
    encode_single,
    falm_scores_batch,
    late_fusion,
)
from .synthworld import Embedder
from .tensor.checkpoint import atomic_write_bytes

THRESHOLDS = (0.3, 0.5)
KS = (1, 5)
METRICS = tuple(f"R{k}@{t}" for k in KS for t in THRESHOLDS)


class EmptyPredictions(FeedlocError):
    pass


class InsufficientFeedback(FeedlocError):
    pass


class Mode(str, enum.Enum):
    QUERY_ONLY = "QueryOnly"
    WITH_FEEDBACK = "WithFeedback"


def _spans(preds) -> list[Span]:
    return list(preds.spans) if isinstance(preds, SpanPrediction) else list(preds)


def recall_at_k(preds: SpanPrediction | Sequence[Span], gt: Span, k: int, tiou_thresh: float) -> int:
    spans = _spans(preds)
    if not spans:
        raise EmptyPredictions("recall needs at least one predicted span")
    return int(any(tiou(s, gt) >= tiou_thresh for s in spans[:k]))


def recall_row(preds, gt: Span) -> dict[str, float]:
    return {f"R{k}@{t}": float(recall_at_k(preds, gt, k, t)) for k in KS for t in THRESHOLDS}


def rank_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with tied scores given average ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    if scores.shape != positive.shape:
        raise ValueError(f"scores {scores.shape} vs labels {positive.shape}")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative items")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size)
    bounds = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [s.size]])
    for a, b in zip(starts, ends):
        ranks[a:b] = 0.5 * (a + b + 1)
    r = np.empty_like(ranks)
    r[order] = ranks
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _mean_rows(rows: Sequence[dict[str, float]]) -> dict[str, float]:
    if not rows:
        return {m: float("nan") for m in METRICS}
    return {m: float(np.mean([r[m] for r in rows])) for m in METRICS}


@dataclass
class EvalDataset:
    """Queries paired with their feedback pools; queries without feedback are left out."""

    episodes: dict[str, EpisodeRecord]
    queries: list[tuple[str, str]]
    feedback: dict[str, list[FeedbackSample]]

    @classmethod
    def build(cls, episodes: Sequence[EpisodeRecord], samples: Sequence[FeedbackSample]) -> "EvalDataset":
        by_q: dict[str, list[FeedbackSample]] = {}
        for s in samples:
            by_q.setdefault(s.query_id, []).append(s)
        eps = {ep.id: ep for ep in episodes}
        queries = [(ep.id, q.id) for ep in episodes for q in ep.queries if q.id in by_q]
        return cls(eps, queries, by_q)

    def __len__(self) -> int:
        return len(self.queries)

    def subset(self, query_ids) -> "EvalDataset":
        keep = set(query_ids)
        return EvalDataset(self.episodes, [k for k in self.queries if k[1] in keep],
                           {q: f for q, f in self.feedback.items() if q in keep})

    def items(self):
        for eid, qid in self.queries:
            ep = self.episodes[eid]
            yield ep, ep.query(qid), self.feedback[qid]


class Runner(Protocol):
    def predict_many(self, requests: Sequence[tuple[EpisodeRecord, QueryRecord,
                                                    Sequence[FeedbackSample]]]) -> list[SpanPrediction]:
        """An empty feedback list means query-only prediction."""


def _fb_key(s: FeedbackSample) -> tuple:
    return (s.query_id, tuple(s.ref_span.to_list()), s.embedding_tokens.tobytes())


class RefocusRunner:
    """ReFocus(host) inference with per-feedback caching.

    Host encoding and decoding run one request at a time so a prediction never depends on
    what else is being evaluated; only FALM scoring is batched.
    """

    def __init__(self, host: HostModel, falm: FalmModel | None = None, adapter: EmAdapter | None = None,
                 batch_size: int = 64):
        self.host = host
        self.falm = falm
        self.adapter = adapter or EmAdapter()
        self.batch_size = batch_size
        self._fused: dict[tuple, np.ndarray] = {}
        self._scores: dict[tuple, np.ndarray] = {}

    def _query_key(self, ep, q):
        return (ep.id, q.id, None)

    def _prepare(self, pairs: Sequence[tuple[EpisodeRecord, QueryRecord, FeedbackSample | None]]) -> None:
        need_scores = []
        seen = set()
        for ep, q, f in pairs:
            if f is not None and _fb_key(f) not in self._scores and _fb_key(f) not in seen:
                seen.add(_fb_key(f))
                need_scores.append((ep, q, f))
        if need_scores:
            if self.falm is None:
                raise FeedlocError("feedback given but the runner has no FALM")
            for (ep, q, f), p in zip(need_scores, falm_scores_batch(self.falm, need_scores, self.batch_size)):
                self._scores[_fb_key(f)] = p
        for ep, q, f in pairs:
            key = self._query_key(ep, q) if f is None else (ep.id, q.id) + _fb_key(f)
            if key in self._fused:
                continue
            p_hat = None if f is None else adapter_apply(self.adapter, self._scores[_fb_key(f)])
            self._fused[key] = encode_single(self.host, ep.features, q.embedding_tokens, p_hat)

    def fused(self, ep: EpisodeRecord, q: QueryRecord, f: FeedbackSample | None) -> np.ndarray:
        self._prepare([(ep, q, f)])
        key = self._query_key(ep, q) if f is None else (ep.id, q.id) + _fb_key(f)
        return self._fused[key]

    def predict_many(self, requests):
        pairs = []
        for ep, q, fbs in requests:
            pairs.extend((ep, q, f) for f in fbs) if fbs else pairs.append((ep, q, None))
        self._prepare(pairs)
        out = []
        for ep, q, fbs in requests:
            if fbs:
                fused = late_fusion([self.fused(ep, q, f) for f in fbs])
            else:
                fused = self.fused(ep, q, None)
            out.append(decode_single(self.host, fused))
        return out

    def predict(self, ep, q, fbs=()) -> SpanPrediction:
        return self.predict_many([(ep, q, tuple(fbs))])[0]


@dataclass
class MetricTable:
    mode: Mode
    n_queries: int
    n_instances: int
    metrics: dict[str, float]
    by_kind: dict[str, dict[str, float]] = field(default_factory=dict)
    by_relevance: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "n_queries": self.n_queries, "n_instances": self.n_instances,
                "metrics": self.metrics, "by_kind": self.by_kind, "by_relevance": self.by_relevance}


def evaluate_split(runner: Runner, dataset: EvalDataset, mode: Mode | str) -> MetricTable:
    mode = Mode(mode)
    items = list(dataset.items())
    if mode is Mode.QUERY_ONLY:
        preds = runner.predict_many([(ep, q, ()) for ep, q, _ in items])
        rows = [recall_row(p, q.gt_span) for p, (_, q, _) in zip(preds, items)]
        return MetricTable(mode, len(items), len(items), _mean_rows(rows))
    requests = [(ep, q, (f,)) for ep, q, fbs in items for f in fbs]
    preds = iter(runner.predict_many(requests))
    per_query, kinds, rel = [], {}, {"QueryRelevant": [], "QueryIrrelevant": []}
    for ep, q, fbs in items:
        rows = []
        for f in fbs:
            row = recall_row(next(preds), q.gt_span)
            rows.append(row)
            kinds.setdefault(f.ref_kind.value, []).append(row)
            if f.ref_kind is not RefKind.SIMPLE_TEMPORAL:
                rel["QueryRelevant" if f.ref_kind.query_relevant else "QueryIrrelevant"].append(row)
        per_query.append(_mean_rows(rows))
    return MetricTable(mode, len(items), len(requests), _mean_rows(per_query),
                       {k: _mean_rows(v) for k, v in sorted(kinds.items())},
                       {k: _mean_rows(v) for k, v in rel.items() if v})


@dataclass
class Comparison:
    query_only: MetricTable
    feedback: MetricTable

    @property
    def delta(self) -> dict[str, float]:
        return {m: self.feedback.metrics[m] - self.query_only.metrics[m] for m in METRICS}

    def to_dict(self) -> dict:
        return {"query_only": self.query_only.to_dict(), "feedback": self.feedback.to_dict(),
                "delta": self.delta}


def compare(runner: Runner, dataset: EvalDataset) -> Comparison:
    """Both modes on the identical query set."""
    return Comparison(evaluate_split(runner, dataset, Mode.QUERY_ONLY),
                      evaluate_split(runner, dataset, Mode.WITH_FEEDBACK))


def _sampling_rng(seed: int, query_id: str, sampling: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(query_id.encode()), sampling]))


def feedback_orders(dataset: EvalDataset, n_max: int, samplings: int, seed: int,
                    replace: bool = False) -> dict[str, list[list[int]]]:
    """Per query, ``samplings`` index sequences; their n-prefixes are the n-feedback subsets."""
    out = {}
    for _, qid in dataset.queries:
        pool = len(dataset.feedback[qid])
        if not replace and pool < n_max:
            raise InsufficientFeedback(f"query {qid} has {pool} feedbacks, {n_max} needed")
        orders = []
        for s in range(samplings):
            rng = _sampling_rng(seed, qid, s)
            idx = rng.choice(pool, size=n_max, replace=True) if replace else rng.permutation(pool)[:n_max]
            orders.append([int(i) for i in idx])
        out[qid] = orders
    return out


@dataclass
class Curve:
    """Rows of (n, metric, mean, std over samplings)."""

    label: str
    rows: list[tuple[int, str, float, float]]
    query_ids: list[str] = field(default_factory=list)

    def value(self, n: int, metric: str) -> float:
        for r in self.rows:
            if r[0] == n and r[1] == metric:
                return r[2]
        raise KeyError((n, metric))

    def to_dict(self) -> dict:
        return {"label": self.label, "n_queries": len(self.query_ids),
                "rows": [{"n": n, "metric": m, "mean": mu, "std": sd} for n, m, mu, sd in self.rows]}


def _curve_from_sequences(runner: Runner, dataset: EvalDataset,
                          sequences: dict[str, list[list[FeedbackSample]]], n_max: int,
                          samplings: int, label: str) -> Curve:
    items = [(ep, q) for ep, q, _ in dataset.items() if q.id in sequences]
    per = np.zeros((samplings, n_max, len(METRICS)))
    for s in range(samplings):
        for n in range(1, n_max + 1):
            preds = runner.predict_many([(ep, q, tuple(sequences[q.id][s][:n])) for ep, q in items])
            rows = [recall_row(p, q.gt_span) for p, (_, q) in zip(preds, items)]
            per[s, n - 1] = [np.mean([r[m] for r in rows]) for m in METRICS]
    rows = []
    for n in range(1, n_max + 1):
        for j, m in enumerate(METRICS):
            rows.append((n, m, float(per[:, n - 1, j].mean()), float(per[:, n - 1, j].std())))
    return Curve(label, rows, [q.id for _, q in items])


def multi_turn_eval(runner: Runner, dataset: EvalDataset, n_max: int, samplings: int = 5,
                    seed: int = 0, replace: bool = False) -> Curve:
    orders = feedback_orders(dataset, n_max, samplings, seed, replace)
    seqs = {qid: [[dataset.feedback[qid][i] for i in o] for o in ords] for qid, ords in orders.items()}
    return _curve_from_sequences(runner, dataset, seqs, n_max, samplings, "multi-turn")


def noisy_sequences(dataset: EvalDataset, emb: Embedder, turns: int = 4, samplings: int = 5,
                    seed: int = 0, flip: bool = True,
                    bank: FeedbackTemplateBank | None = None) -> dict[str, list[list[FeedbackSample]]]:
    """Turn 1 is a direction-flipped simple temporal feedback on the first sampled feedback's
    reference span; later turns append the remaining sampled (correct) feedbacks.

    With ``flip`` off the first sampled feedback is used unchanged, which reproduces the
    multi-turn sequences exactly. Queries whose references all overlap the gt cannot carry a
    wrong-direction turn and are skipped in both settings, keeping the comparison paired.
    """
    bank = bank or FeedbackTemplateBank()
    orders = feedback_orders(dataset, turns, samplings, seed)
    out = {}
    for eid, qid in dataset.queries:
        q = dataset.episodes[eid].query(qid)
        pool = dataset.feedback[qid]
        seqs = []
        for s, order in enumerate(orders[qid]):
            seq = [pool[i] for i in order]
            rng = _sampling_rng(seed + 1, qid, s)
            refs = [seq[0].ref_span] + [f.ref_span for f in pool if f.ref_kind is RefKind.SIMPLE_TEMPORAL]
            noisy = None
            for ref in refs:
                try:
                    noisy = make_simple_temporal(q.gt_span, ref, bank, rng, emb=emb, query_id=qid,
                                                 episode_id=eid, flip=True)
                    break
                except OverlapError:
                    continue
            if noisy is None:
                seqs = None
                break
            seqs.append([noisy] + seq[1:] if flip else seq)
        if seqs is not None:
            out[qid] = seqs
    return out


def noisy_recovery_eval(runner: Runner, dataset: EvalDataset, emb: Embedder, seed: int = 0,
                        turns: int = 4, samplings: int = 5, flip: bool = True) -> Curve:
    seqs = noisy_sequences(dataset, emb, turns, samplings, seed, flip)
    return _curve_from_sequences(runner, dataset, seqs, turns, samplings,
                                 "noisy" if flip else "noisy-control")


def table1_rows(cmp: Comparison, name: str = "ReFocus(host)") -> list[dict]:
    """Query-only and feedback rows with delta columns, one row per method."""
    qo, fb, d = cmp.query_only.metrics, cmp.feedback.metrics, cmp.delta
    rows = [{"method": "host (query-only)", **{m: 100 * qo[m] for m in METRICS},
             **{f"d_{m}": 0.0 for m in METRICS}},
            {"method": name, **{m: 100 * fb[m] for m in METRICS},
             **{f"d_{m}": 100 * d[m] for m in METRICS}}]
    return rows


def write_csv(path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def curve_rows(curve: Curve) -> list[dict]:
    return [{"n": n, "metric": m, "mean": mu, "std": sd} for n, m, mu, sd in curve.rows]


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))
