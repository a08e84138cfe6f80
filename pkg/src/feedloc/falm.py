"""Feedback alignment model: per-clip scores from (video, query, reference span, feedback)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import EpisodeRecord, ShapeMismatch, Span, require_clips
from .labelgen import AlignmentLabels
from .tensor import autograd as ag
from .tensor.autograd import Tensor
from .tensor.nn import DecoderLayer, EncoderLayer, LayerNorm, Linear, MLPHead, Module, sinusoidal_positions

# segment ids inside the context encoder
SEG_QUERY, SEG_FEEDBACK, SEG_REF = 0, 1, 2
# keeps float32 sigmoid outputs strictly inside (0, 1)
_PROB_EPS = 1e-6


@dataclass(frozen=True)
class FalmConfig:
    d_in: int = 32
    d_model: int = 64
    heads: int = 4
    t_q_layers: int = 2
    t_v_layers: int = 2
    t_m_layers: int = 2
    head_hidden: int = 64
    lam: float = 1.0
    lam_t: float = 0.5
    lam_c: float = 0.25
    lam_n: float = 0.25
    positional: bool = True
    ref_positions: bool = False
    shared_input: bool = False
    tied_cross_init: bool = False
    seg_init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if min(self.lam, self.lam_t, self.lam_c, self.lam_n) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def build_reference_embedding(ep: EpisodeRecord, ref: Span) -> np.ndarray:
    idx = require_clips(ref, ep.m)
    f = ep.features
    return np.stack([f[idx[0]], f[idx[-1]], f[idx].mean(axis=0)]).astype(np.float32)


def pad_stack(mats: Sequence[np.ndarray], dtype=np.float32,
              length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack (L_i, d) matrices into (B, L_max, d) plus a (B, L_max) validity mask."""
    b = len(mats)
    lmax = max([m.shape[0] for m in mats] + [length or 0])
    d = mats[0].shape[1]
    out = np.zeros((b, lmax, d), dtype=dtype)
    mask = np.zeros((b, lmax), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = True
    return out, mask


@dataclass
class FalmBatch:
    video: np.ndarray       # (B, M, d)
    video_mask: np.ndarray  # (B, M)
    ctx: np.ndarray         # (B, L, d)
    ctx_mask: np.ndarray    # (B, L)
    ctx_seg: np.ndarray     # (B, L, 3) one-hot segment ids
    ref_pos: np.ndarray     # (B, 3) clip indices of ref start/end/centre

    @property
    def size(self) -> int:
        return self.video.shape[0]


def collate(items: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, Span]],
            video_len: int | None = None) -> FalmBatch:
    """``items`` holds (e_v, e_q, e_f, e_r, ref_span) tuples."""
    video, vmask = pad_stack([it[0] for it in items], length=video_len)
    ctx_rows, segs, refpos = [], [], []
    for e_v, e_q, e_f, e_r, ref in items:
        for name, mat in (("e_q", e_q), ("e_f", e_f), ("e_r", e_r)):
            if mat.ndim != 2 or mat.shape[1] != e_v.shape[1]:
                raise ShapeMismatch(f"{name} has shape {mat.shape}, expected (*, {e_v.shape[1]})")
        ctx_rows.append(np.concatenate([e_q, e_f, e_r], axis=0))
        seg = np.zeros((len(ctx_rows[-1]), 3), dtype=np.float32)
        seg[: len(e_q), SEG_QUERY] = 1
        seg[len(e_q): len(e_q) + len(e_f), SEG_FEEDBACK] = 1
        seg[len(e_q) + len(e_f):, SEG_REF] = 1
        segs.append(seg)
        idx = require_clips(ref, e_v.shape[0])
        refpos.append([idx[0], idx[-1], idx[len(idx) // 2]])
    ctx, cmask = pad_stack(ctx_rows)
    seg, _ = pad_stack(segs)
    return FalmBatch(video, vmask, ctx, cmask, seg, np.asarray(refpos, dtype=np.int64))


@dataclass
class FalmOutput:
    p: Tensor
    p_c: Tensor
    p_k: Tensor
    p_t: Tensor
    e_a: Tensor
    mask: np.ndarray | None = None


class FalmModel(Module):
    def __init__(self, cfg: FalmConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xFA1]))
        d = cfg.d_model
        self.video_proj = Linear(cfg.d_in, d, rng)
        if not cfg.shared_input:
            self.ctx_proj = Linear(cfg.d_in, d, rng)
        self.seg_embed = Tensor(rng.normal(0.0, cfg.seg_init_std, size=(3, d)), requires_grad=True)
        self.t_q = [EncoderLayer(d, cfg.heads, rng) for _ in range(cfg.t_q_layers)]
        self.t_v = [EncoderLayer(d, cfg.heads, rng) for _ in range(cfg.t_v_layers)]
        self.t_m = [DecoderLayer(d, cfg.heads, rng) for _ in range(cfg.t_m_layers)]
        if cfg.tied_cross_init:
            for layer in self.t_m:
                layer.cross_attn.k.weight.data = layer.cross_attn.q.weight.data.copy()
        self.ctx_norm = LayerNorm(d)
        self.norm = LayerNorm(d)
        self.head_p = MLPHead(d, cfg.head_hidden, rng)
        self.head_c = MLPHead(d, cfg.head_hidden, rng)
        self.head_k = MLPHead(d, cfg.head_hidden, rng)
        self.head_t = MLPHead(d, cfg.head_hidden, rng)

    def forward(self, batch: FalmBatch) -> FalmOutput:
        b, m, _ = batch.video.shape
        d = self.cfg.d_model
        video = self.video_proj(Tensor(batch.video))
        if self.cfg.positional:
            video = video + Tensor(sinusoidal_positions(m, d, unit=True)[None])
        ctx_proj = self.video_proj if self.cfg.shared_input else self.ctx_proj
        ctx = ctx_proj(Tensor(batch.ctx)) + ag.matmul(Tensor(batch.ctx_seg), self.seg_embed)
        if self.cfg.ref_positions:
            pe = sinusoidal_positions(m, d, unit=True)
            extra = np.zeros((b, batch.ctx.shape[1], d))
            for i in range(b):
                ref_rows = np.flatnonzero(batch.ctx_seg[i, :, SEG_REF])
                extra[i, ref_rows] = pe[batch.ref_pos[i]]
            ctx = ctx + Tensor(extra)
        for layer in self.t_q:
            ctx = layer(ctx, batch.ctx_mask)
        for layer in self.t_v:
            video = layer(video, batch.video_mask)
        ctx = self.ctx_norm(ctx)
        x = video
        for layer in self.t_m:
            x = layer(x, ctx, batch.video_mask, batch.ctx_mask)
        e_a = self.norm(x)
        heads = [ag.clamp(h(e_a), _PROB_EPS, 1.0 - _PROB_EPS)
                 for h in (self.head_p, self.head_c, self.head_k, self.head_t)]
        return FalmOutput(*heads, e_a, batch.video_mask)


def falm_forward(model: FalmModel, e_v: np.ndarray, e_q: np.ndarray, e_f: np.ndarray,
                 e_r: np.ndarray, ref: Span | None = None) -> FalmOutput:
    """Single-sample forward; returns length-m score vectors."""
    if e_v.ndim != 2 or e_v.shape[0] < 1:
        raise ShapeMismatch(f"e_v must be (m, d) with m >= 1, got {e_v.shape}")
    if e_v.shape[1] != model.cfg.d_in:
        raise ShapeMismatch(f"input dim {e_v.shape[1]} vs model d_in {model.cfg.d_in}")
    ref = ref if ref is not None else Span(0.0, 1.0)
    out = model.forward(collate([(e_v, e_q, e_f, e_r, ref)]))
    return FalmOutput(out.p[0], out.p_c[0], out.p_k[0], out.p_t[0], out.e_a[0], None)


@dataclass
class LabelBatch:
    l: np.ndarray
    l_t: np.ndarray
    s_c: np.ndarray
    s_k: np.ndarray
    has_c: np.ndarray
    has_k: np.ndarray
    has_t: np.ndarray

    @classmethod
    def stack(cls, labels: Sequence[AlignmentLabels], m: int | None = None) -> "LabelBatch":
        m = m or max(lb.m for lb in labels)
        b = len(labels)
        arrs = {k: np.zeros((b, m), dtype=np.float32) for k in ("l", "l_t", "s_c", "s_k")}
        for i, lb in enumerate(labels):
            arrs["l"][i, : lb.m] = lb.l
            arrs["l_t"][i, : lb.m] = lb.l_t
            arrs["s_c"][i, : lb.m] = lb.s_c
            arrs["s_k"][i, : lb.m] = lb.s_k
        flags = lambda attr: np.array([getattr(lb, attr) for lb in labels], dtype=bool)
        return cls(has_c=flags("has_contains"), has_k=flags("has_not_contains"),
                   has_t=flags("has_temporal"), **arrs)


def falm_loss_batch(out: FalmOutput, labels: LabelBatch, cfg: FalmConfig) -> Tensor:
    vm = out.mask if out.mask is not None else np.ones(out.p.shape, dtype=bool)
    if labels.l.shape != out.p.shape:
        raise ShapeMismatch(f"labels {labels.l.shape} vs predictions {out.p.shape}")
    loss = ag.scale(ag.bce_loss(out.p, labels.l, vm), cfg.lam)
    loss = loss + ag.scale(ag.bce_loss(out.p_t, labels.l_t, vm & labels.has_t[:, None]), cfg.lam_t)
    loss = loss + ag.scale(ag.mse_loss(out.p_c, labels.s_c, vm & labels.has_c[:, None]), cfg.lam_c)
    loss = loss + ag.scale(ag.mse_loss(out.p_k, labels.s_k, vm & labels.has_k[:, None]), cfg.lam_n)
    return loss


def falm_loss(out: FalmOutput, labels: AlignmentLabels, cfg: FalmConfig | None = None) -> Tensor:
    """Weighted four-term objective for one sample; absent clause terms contribute nothing."""
    cfg = cfg or FalmConfig()
    if out.p.shape != (labels.m,):
        raise ShapeMismatch(f"labels for {labels.m} clips vs predictions {out.p.shape}")
    one = lambda x: x.reshape(1, -1)
    batched = FalmOutput(one(out.p), one(out.p_c), one(out.p_k), one(out.p_t), out.e_a, None)
    return falm_loss_batch(batched, LabelBatch.stack([labels]), cfg)
