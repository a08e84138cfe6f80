"""Host localizer (cross-modal encoder + anchor-free span decoder), the EM adapter, and
feedback-conditioned prediction with late fusion over multiple turns."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    EpisodeRecord,
    FeedbackSample,
    FeedlocError,
    QueryRecord,
    ShapeMismatch,
    Span,
    clips_in_span,
    tiou,
)
from .falm import FalmModel, build_reference_embedding, collate, pad_stack
from .tensor import autograd as ag
from .tensor.autograd import Tensor
from .tensor.nn import EncoderLayer, LayerNorm, Linear, Module, sinusoidal_positions

NMS_THRESH = 0.5
TOP_K = 5
# decoded half-widths never fall below this, so every span has positive length
_MIN_HALF_WIDTH = 0.25


class EmptyFeedbackList(FeedlocError):
    pass


@dataclass(frozen=True)
class HostConfig:
    d_in: int = 32
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    head_hidden: int = 64
    reg_weight: float = 1.0
    shared_input: bool = False
    tied_attn_init: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpanPrediction:
    spans: list[Span] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.spans) != len(self.scores):
            raise ShapeMismatch("spans and scores differ in length")

    def __len__(self):
        return len(self.spans)

    @property
    def top1(self) -> Span:
        return self.spans[0]

    def to_dict(self) -> dict:
        return {"spans": [s.to_list() for s in self.spans], "scores": [float(x) for x in self.scores]}


class EmAdapter(Module):
    """Learned affine rescaling of alignment scores, clamped to [0, 1]."""

    def __init__(self, alpha: float = 1.0, beta: float = 0.0):
        self.alpha = Tensor(np.array([alpha]), requires_grad=True)
        self.beta = Tensor(np.array([beta]), requires_grad=True)

    def __call__(self, p: Tensor) -> Tensor:
        return ag.clamp(self.alpha * p + self.beta, 0.0, 1.0)


def adapter_apply(ad: EmAdapter, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    a = ad.alpha.data.astype(p.dtype)[0]
    b = ad.beta.data.astype(p.dtype)[0]
    return np.clip(a * p + b, 0.0, 1.0)


class HostModel(Module):
    def __init__(self, cfg: HostConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x4057]))
        d = cfg.d_model
        self.video_proj = Linear(cfg.d_in, d, rng)
        if not cfg.shared_input:
            self.query_proj = Linear(cfg.d_in, d, rng)
        self.type_embed = Tensor(rng.normal(0.0, 0.02, size=(2, d)), requires_grad=True)
        self.encoder = [EncoderLayer(d, cfg.heads, rng) for _ in range(cfg.layers)]
        if cfg.tied_attn_init:
            for layer in self.encoder:
                layer.attn.k.weight.data = layer.attn.q.weight.data.copy()
        self.norm = LayerNorm(d)
        self.cls_fc1 = Linear(d, cfg.head_hidden, rng)
        self.cls_fc2 = Linear(cfg.head_hidden, 1, rng)
        self.reg_fc1 = Linear(d, cfg.head_hidden, rng)
        self.reg_fc2 = Linear(cfg.head_hidden, 2, rng)

    def encode(self, video: Tensor, video_mask: np.ndarray, query: np.ndarray,
               query_mask: np.ndarray) -> Tensor:
        """Cross-modal encoder over [query tokens; clip tokens]; returns fused clip tokens."""
        b, m, _ = video.shape
        lq = query.shape[1]
        d = self.cfg.d_model
        v = self.video_proj(video) + Tensor(sinusoidal_positions(m, d, unit=True)[None])
        v = v + self.type_embed[1]
        query_proj = self.video_proj if self.cfg.shared_input else self.query_proj
        q = query_proj(Tensor(query)) + self.type_embed[0]
        x = ag.concat([q, v], axis=1)
        mask = np.concatenate([query_mask, video_mask], axis=1)
        for layer in self.encoder:
            x = layer(x, mask)
        return self.norm(x[:, lq:, :])

    def decode(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        """Per-clip foreground logits (B, M) and (left, right) offsets (B, M, 2)."""
        logits = self.cls_fc2(ag.relu(self.cls_fc1(fused)))
        offsets = self.reg_fc2(ag.relu(self.reg_fc1(fused)))
        return logits.reshape(logits.shape[:-1]), offsets


def reweight(video: Tensor, p_hat: Tensor | np.ndarray) -> Tensor:
    """Scale each clip's feature row by its alignment score."""
    p_hat = p_hat if isinstance(p_hat, Tensor) else Tensor(p_hat)
    return ag.mul(video, p_hat.reshape(p_hat.shape + (1,)))


def nms(spans: Sequence[Span], scores: Sequence[float], thresh: float = NMS_THRESH,
        top_k: int = TOP_K) -> SpanPrediction:
    order = sorted(range(len(spans)), key=lambda i: (-scores[i], spans[i].start, spans[i].end))
    kept: list[int] = []
    for i in order:
        if all(tiou(spans[i], spans[j]) <= thresh for j in kept):
            kept.append(i)
            if len(kept) == top_k:
                break
    return SpanPrediction([spans[i] for i in kept], [float(scores[i]) for i in kept])


def decode_spans(logits: np.ndarray, offsets: np.ndarray, m: int) -> SpanPrediction:
    """Turn one sample's per-clip outputs into ranked, NMS-filtered spans."""
    scores = 1.0 / (1.0 + np.exp(-logits[:m].astype(np.float64)))
    centres = np.arange(m) + 0.5
    left = np.maximum(offsets[:m, 0].astype(np.float64), _MIN_HALF_WIDTH)
    right = np.maximum(offsets[:m, 1].astype(np.float64), _MIN_HALF_WIDTH)
    starts = np.clip(centres - left, 0.0, m)
    ends = np.clip(centres + right, 0.0, m)
    spans = [Span(float(s), float(e)) for s, e in zip(starts, ends)]
    return nms(spans, scores.tolist())


def host_targets(gt: Span, m: int, m_pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Foreground labels, offset targets and offset mask for one query."""
    fg = np.zeros(m_pad, dtype=np.float32)
    reg = np.zeros((m_pad, 2), dtype=np.float32)
    reg_mask = np.zeros((m_pad, 2), dtype=bool)
    for i in clips_in_span(gt, m):
        fg[i] = 1.0
        reg[i] = (i + 0.5 - gt.start, gt.end - (i + 0.5))
        reg_mask[i] = True
    return fg, reg, reg_mask


def host_forward(model: HostModel, e_v: np.ndarray, e_q: np.ndarray,
                 p_hat: np.ndarray | None = None) -> tuple[np.ndarray, SpanPrediction]:
    m = e_v.shape[0]
    if e_v.ndim != 2 or e_v.shape[1] != model.cfg.d_in or e_q.ndim != 2 or e_q.shape[1] != model.cfg.d_in:
        raise ShapeMismatch(f"e_v {e_v.shape}, e_q {e_q.shape} vs d_in {model.cfg.d_in}")
    if p_hat is not None and np.shape(p_hat) != (m,):
        raise ShapeMismatch(f"p_hat {np.shape(p_hat)} vs {m} clips")
    fused = encode_single(model, e_v, e_q, p_hat)
    return fused, decode_single(model, fused)


def encode_single(model: HostModel, e_v: np.ndarray, e_q: np.ndarray,
                  p_hat: np.ndarray | None = None) -> np.ndarray:
    with ag.no_grad():
        video = Tensor(e_v[None])
        if p_hat is not None:
            video = reweight(video, np.asarray(p_hat, dtype=video.dtype)[None])
        fused = model.encode(video, np.ones((1, e_v.shape[0]), bool), e_q[None],
                             np.ones((1, e_q.shape[0]), bool))
    return fused.data[0]


def decode_single(model: HostModel, fused: np.ndarray) -> SpanPrediction:
    with ag.no_grad():
        logits, offsets = model.decode(Tensor(fused[None]))
    return decode_spans(logits.data[0], offsets.data[0], fused.shape[0])


def falm_scores(falm: FalmModel, ep: EpisodeRecord, query: QueryRecord,
                feedback: FeedbackSample) -> np.ndarray:
    with ag.no_grad():
        batch = collate([(ep.features, query.embedding_tokens, feedback.embedding_tokens,
                          build_reference_embedding(ep, feedback.ref_span), feedback.ref_span)])
        out = falm.forward(batch)
    return out.p.data[0]


def falm_scores_batch(falm: FalmModel, items: Sequence[tuple[EpisodeRecord, QueryRecord, FeedbackSample]],
                      batch_size: int = 64) -> list[np.ndarray]:
    """Batched inference; results match :func:`falm_scores` up to float reassociation."""
    out: list[np.ndarray] = []
    with ag.no_grad():
        for lo in range(0, len(items), batch_size):
            chunk = items[lo:lo + batch_size]
            batch = collate([(ep.features, q.embedding_tokens, f.embedding_tokens,
                              build_reference_embedding(ep, f.ref_span), f.ref_span)
                             for ep, q, f in chunk])
            p = falm.forward(batch).p.data
            out.extend(p[i, : ep.m].copy() for i, (ep, _, _) in enumerate(chunk))
    return out


def refocus_encode(host: HostModel, falm: FalmModel, adapter: EmAdapter, ep: EpisodeRecord,
                   query: QueryRecord, feedback: FeedbackSample | None) -> np.ndarray:
    if feedback is None:
        return encode_single(host, ep.features, query.embedding_tokens)
    p_hat = adapter_apply(adapter, falm_scores(falm, ep, query, feedback))
    return encode_single(host, ep.features, query.embedding_tokens, p_hat)


def refocus_predict(host: HostModel, falm: FalmModel, adapter: EmAdapter, ep: EpisodeRecord,
                    query: QueryRecord, feedback: FeedbackSample | None = None) -> SpanPrediction:
    return decode_single(host, refocus_encode(host, falm, adapter, ep, query, feedback))


def late_fusion(fused: Sequence[np.ndarray]) -> np.ndarray:
    """Order-invariant mean of per-feedback encoder outputs.

    Summing in a canonical (byte-sorted) order makes the result bitwise independent of the
    order feedback arrived in. Accumulating in float64 keeps ``n * x / n == x`` exact, so
    repeated feedback reproduces the single-feedback output bit for bit.
    """
    if not fused:
        raise EmptyFeedbackList("late fusion needs at least one feedback turn")
    ordered = sorted(fused, key=lambda a: np.ascontiguousarray(a).tobytes())
    total = ordered[0].astype(np.float64)
    for a in ordered[1:]:
        total = total + a
    return (total / len(ordered)).astype(ordered[0].dtype)


def refocus_predict_multi(host: HostModel, falm: FalmModel, adapter: EmAdapter, ep: EpisodeRecord,
                          query: QueryRecord, feedbacks: Sequence[FeedbackSample]) -> SpanPrediction:
    if not feedbacks:
        raise EmptyFeedbackList(f"query {query.id}: no feedback given")
    fused = [refocus_encode(host, falm, adapter, ep, query, f) for f in feedbacks]
    return decode_single(host, late_fusion(fused))


def host_batch_inputs(eps: Sequence[EpisodeRecord], queries: Sequence[QueryRecord]):
    video, vmask = pad_stack([ep.features for ep in eps])
    query, qmask = pad_stack([q.embedding_tokens for q in queries])
    return video, vmask, query, qmask


def host_predict_batch(host: HostModel, eps: Sequence[EpisodeRecord], queries: Sequence[QueryRecord],
                       p_hats: Sequence[np.ndarray | None] | None = None,
                       batch_size: int = 64) -> list[SpanPrediction]:
    """Batched query-only / reweighted predictions for evaluation sweeps."""
    preds: list[SpanPrediction] = []
    with ag.no_grad():
        for lo in range(0, len(eps), batch_size):
            e_chunk, q_chunk = eps[lo:lo + batch_size], queries[lo:lo + batch_size]
            video, vmask, query, qmask = host_batch_inputs(e_chunk, q_chunk)
            v = Tensor(video)
            if p_hats is not None:
                scale_rows = np.ones(vmask.shape, dtype=video.dtype)
                for i, ph in enumerate(p_hats[lo:lo + batch_size]):
                    if ph is not None:
                        scale_rows[i, : len(ph)] = ph
                v = reweight(v, scale_rows)
            fused = host.encode(v, vmask, query, qmask)
            logits, offsets = host.decode(fused)
            for i, ep in enumerate(e_chunk):
                preds.append(decode_spans(logits.data[i], offsets.data[i], ep.m))
    return preds
