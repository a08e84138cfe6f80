"""Training loops: FALM pretraining, host pretraining, and joint fine-tuning with the adapter."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ConfigError, EpisodeRecord, FeedbackSample, FeedlocError, QueryRecord
from .falm import FalmConfig, FalmModel, LabelBatch, build_reference_embedding, collate, falm_loss_batch
from .feedbackgen import FeedbackTemplateBank, OverlapError, make_simple_temporal
from .labelgen import DEFAULT_SMOOTH_SIGMA, AlignmentLabels, make_labels
from .localizer import EmAdapter, HostConfig, HostModel, falm_scores_batch, host_batch_inputs, host_targets, reweight
from .synthworld import Embedder
from .tensor import autograd as ag
from .tensor import checkpoint
from .tensor.autograd import NumericFault, Tensor
from .tensor.optim import Adam

log = logging.getLogger(__name__)


class NonFiniteLoss(FeedlocError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    mixed_sampling: bool = True
    temporal_aug_rate: float = 0.2
    falm_frozen: bool = True
    rotation_aug: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.temporal_aug_rate <= 1.0:
            raise ConfigError(f"temporal_aug_rate must lie in [0, 1], got {self.temporal_aug_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FalmExample:
    ep: EpisodeRecord
    query: QueryRecord
    sample: FeedbackSample
    labels: AlignmentLabels


def falm_examples(episodes: Sequence[EpisodeRecord], samples: Sequence[FeedbackSample], emb: Embedder,
                  sigma: float = DEFAULT_SMOOTH_SIGMA) -> list[FalmExample]:
    by_id = {ep.id: ep for ep in episodes}
    out = []
    for s in samples:
        ep = by_id[s.episode_id]
        q = ep.query(s.query_id)
        out.append(FalmExample(ep, q, s, make_labels(s, q, ep, emb, sigma)))
    return out


@dataclass
class EpochStats:
    epoch: int
    loss: float
    batches: int
    extra: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    curve: list[EpochStats]

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.curve]


def epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, phase, epoch]))


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def bucketed_batches(order: np.ndarray, lengths: Sequence[int], size: int,
                     rng: np.random.Generator, window: int = 16) -> list[np.ndarray]:
    """Batches of similar-length samples to limit padding; batch order is reshuffled."""
    out = []
    span = size * window
    for lo in range(0, len(order), span):
        chunk = order[lo:lo + span]
        chunk = chunk[np.argsort([lengths[i] for i in chunk], kind="stable")]
        out.extend(_batches(chunk, size))
    return [out[i] for i in rng.permutation(len(out))]


def _step(loss_fn: Callable[[], Tensor], opt: Adam, batch_id: str) -> float:
    opt.zero_grad()
    try:
        loss = loss_fn()
        # parameters outside this batch's graph (e.g. the adapter on a query-only batch) keep
        # grad None and are skipped by the optimizer
        ag.backward(loss)
    except NumericFault as exc:
        raise NonFiniteLoss(f"non-finite value in batch {batch_id}: {exc}") from exc
    opt.step()
    return float(loss.data)


def write_curve(path: str | Path, curve: Sequence[EpochStats], split: str = "train") -> None:
    rows = [["epoch", "split", "loss"]] + [[e.epoch, split, repr(float(e.loss))] for e in curve]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    checkpoint.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def anchored_rotation(rng: np.random.Generator, anchors: np.ndarray) -> np.ndarray:
    """Random orthogonal d x d matrix that fixes every vector in span(anchors).

    Applied to all inputs of a sample it preserves every cosine (so labels are unchanged)
    while hiding token identity, except for the anchor tokens.
    """
    d = anchors.shape[1]
    basis, _ = np.linalg.qr(anchors.T.astype(np.float64))
    proj = basis @ basis.T
    comp, _ = np.linalg.qr((np.eye(d) - proj) @ rng.normal(size=(d, d)))
    comp = comp[:, : d - basis.shape[1]]
    r, tri = np.linalg.qr(rng.normal(size=(comp.shape[1],) * 2))
    r = r * np.sign(np.diag(tri))
    return proj + comp @ r @ comp.T


def rotate_batch(arrays: Sequence[np.ndarray], rng: np.random.Generator,
                 anchors: np.ndarray) -> None:
    """In place: row block ``i`` of every (B, L, d) array is multiplied by rotation ``R_i``."""
    for i in range(arrays[0].shape[0]):
        rot = anchored_rotation(rng, anchors).astype(arrays[0].dtype)
        for a in arrays:
            a[i] = a[i] @ rot


def falm_batch(examples: Sequence[FalmExample], rng: np.random.Generator | None = None,
               anchors: np.ndarray | None = None):
    batch = collate([(ex.ep.features, ex.query.embedding_tokens, ex.sample.embedding_tokens,
                      build_reference_embedding(ex.ep, ex.sample.ref_span), ex.sample.ref_span)
                     for ex in examples])
    if rng is not None:
        rotate_batch([batch.video, batch.ctx], rng, anchors)
    return batch, LabelBatch.stack([ex.labels for ex in examples], m=batch.video.shape[1])


def pretrain_falm(cfg: TrainConfig, model_cfg: FalmConfig, examples: Sequence[FalmExample],
                  model: FalmModel | None = None,
                  anchors: np.ndarray | None = None) -> tuple[FalmModel, TrainResult]:
    """``anchors`` (k x d) are the embeddings kept fixed by rotation augmentation."""
    if not examples:
        raise ConfigError("FALM pretraining needs a nonempty labelled dataset")
    if cfg.rotation_aug and anchors is None:
        raise ConfigError("rotation augmentation needs anchor embeddings")
    model = model or FalmModel(model_cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    lengths = [ex.ep.m for ex in examples]
    curve = []
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, 1, epoch)
        losses = []
        for b, idx in enumerate(bucketed_batches(rng.permutation(len(examples)), lengths,
                                                 cfg.batch_size, rng)):
            batch, labels = falm_batch([examples[i] for i in idx],
                                       rng if cfg.rotation_aug else None, anchors)
            losses.append(_step(lambda: falm_loss_batch(model.forward(batch), labels, model.cfg),
                                opt, f"{epoch}:{b}"))
        curve.append(EpochStats(epoch, float(np.mean(losses)), len(losses)))
        log.info("falm epoch %d loss %.5f", epoch, curve[-1].loss)
    return model, TrainResult(curve)


def host_loss(host: HostModel, eps: Sequence[EpisodeRecord], queries: Sequence[QueryRecord],
              p_hat: Tensor | None = None, rng: np.random.Generator | None = None,
              anchors: np.ndarray | None = None) -> Tensor:
    """BCE on per-clip foreground scores plus L1 on offsets of clips inside the gt span."""
    video, vmask, query, qmask = host_batch_inputs(eps, queries)
    if rng is not None:
        rotate_batch([video, query], rng, anchors)
    m_pad = video.shape[1]
    targets = [host_targets(q.gt_span, ep.m, m_pad) for ep, q in zip(eps, queries)]
    fg = np.stack([t[0] for t in targets])
    reg = np.stack([t[1] for t in targets])
    reg_mask = np.stack([t[2] for t in targets])
    v = Tensor(video)
    if p_hat is not None:
        v = reweight(v, p_hat)
    logits, offsets = host.decode(host.encode(v, vmask, query, qmask))
    loss = ag.bce_loss(ag.sigmoid(logits), fg, vmask)
    return loss + ag.scale(ag.l1_loss(offsets, reg, reg_mask), host.cfg.reg_weight)


def pretrain_host(cfg: TrainConfig, model_cfg: HostConfig,
                  samples: Sequence[tuple[EpisodeRecord, QueryRecord]],
                  model: HostModel | None = None,
                  anchors: np.ndarray | None = None) -> tuple[HostModel, TrainResult]:
    if not samples:
        raise ConfigError("host pretraining needs a nonempty query set")
    if cfg.rotation_aug and anchors is None:
        raise ConfigError("rotation augmentation needs anchor embeddings")
    model = model or HostModel(model_cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    lengths = [ep.m for ep, _ in samples]
    curve = []
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, 2, epoch)
        losses = []
        for b, idx in enumerate(bucketed_batches(rng.permutation(len(samples)), lengths,
                                                 cfg.batch_size, rng)):
            eps = [samples[i][0] for i in idx]
            qs = [samples[i][1] for i in idx]
            losses.append(_step(lambda: host_loss(model, eps, qs, None,
                                                  rng if cfg.rotation_aug else None, anchors),
                                opt, f"{epoch}:{b}"))
        curve.append(EpochStats(epoch, float(np.mean(losses)), len(losses)))
        log.info("host epoch %d loss %.5f", epoch, curve[-1].loss)
    return model, TrainResult(curve)


def _fb_key(s: FeedbackSample) -> tuple:
    return (s.query_id, tuple(s.ref_span.to_list()), s.embedding_tokens.tobytes())


class FrozenScoreCache:
    """Memoised FALM scores; valid only while FALM parameters stay fixed."""

    def __init__(self, falm: FalmModel, batch_size: int = 64):
        self.falm = falm
        self.batch_size = batch_size
        self._cache: dict[tuple, np.ndarray] = {}

    def get(self, items: Sequence[tuple[EpisodeRecord, QueryRecord, FeedbackSample]]) -> list[np.ndarray]:
        missing = [it for it in items if _fb_key(it[2]) not in self._cache]
        if missing:
            for it, p in zip(missing, falm_scores_batch(self.falm, missing, self.batch_size)):
                self._cache[_fb_key(it[2])] = p
        return [self._cache[_fb_key(it[2])] for it in items]


def augment_temporal(ep: EpisodeRecord, q: QueryRecord, s: FeedbackSample, bank: FeedbackTemplateBank,
                     rng: np.random.Generator, emb: Embedder) -> FeedbackSample | None:
    """Regenerate a feedback sample as simple temporal feedback on the same reference span."""
    try:
        return make_simple_temporal(q.gt_span, s.ref_span, bank, rng, emb=emb,
                                    query_id=q.id, episode_id=ep.id)
    except OverlapError:
        return None


def finetune_refocus(cfg: TrainConfig, host: HostModel, falm: FalmModel, samples: Sequence[FeedbackSample],
                     episodes: Sequence[EpisodeRecord], emb: Embedder, adapter: EmAdapter | None = None,
                     bank: FeedbackTemplateBank | None = None,
                     anchors: np.ndarray | None = None) -> tuple[EmAdapter, TrainResult]:
    """Joint adapter + host training on a 50/50 mix of query-only and query+feedback samples.

    ``host`` (and ``falm`` when ``cfg.falm_frozen`` is false) are updated in place.
    """
    if not samples:
        raise ConfigError("fine-tuning needs feedback samples")
    if cfg.rotation_aug and anchors is None:
        raise ConfigError("rotation augmentation needs anchor embeddings")
    adapter = adapter or EmAdapter()
    bank = bank or FeedbackTemplateBank()
    by_id = {ep.id: ep for ep in episodes}
    fb_items = [(by_id[s.episode_id], by_id[s.episode_id].query(s.query_id), s) for s in samples]
    qo_items = [(ep, q) for ep in episodes for q in ep.queries]
    params = adapter.parameters() + host.parameters()
    if not cfg.falm_frozen:
        params += falm.parameters()
    opt = Adam(params, lr=cfg.lr)
    cache = FrozenScoreCache(falm) if cfg.falm_frozen else None
    curve = []
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, 3, epoch)
        n_fb = len(fb_items)
        fb_order = rng.permutation(n_fb)
        epoch_fb = []
        n_aug = 0
        for i in fb_order:
            ep, q, s = fb_items[i]
            if rng.random() < cfg.temporal_aug_rate:
                aug = augment_temporal(ep, q, s, bank, rng, emb)
                if aug is not None:
                    s = aug
                    n_aug += 1
            epoch_fb.append((ep, q, s))
        n_qo = n_fb if cfg.mixed_sampling else 0
        qo_pick = rng.choice(len(qo_items), size=n_qo, replace=n_qo > len(qo_items)) if n_qo else []
        pool = [("fb", it) for it in epoch_fb] + [("qo", qo_items[i] + (None,)) for i in qo_pick]
        lengths = [it[0].m for _, it in pool]
        losses = []
        n_qo_seen = 0
        for b, idx in enumerate(bucketed_batches(rng.permutation(len(pool)), lengths,
                                                 cfg.batch_size, rng)):
            chunk = [pool[i] for i in idx]
            # feedback rows first so FALM scores occupy a contiguous block
            fb = [it for tag, it in chunk if tag == "fb"]
            qo = [it for tag, it in chunk if tag == "qo"]
            n_qo_seen += len(qo)
            rows = fb + qo
            eps = [r[0] for r in rows]
            qs = [r[1] for r in rows]
            m_pad = max(ep.m for ep in eps)

            def loss_fn():
                p_rows = []
                if fb:
                    if cache is not None:
                        p = np.ones((len(fb), m_pad), dtype=np.float32)
                        for j, pj in enumerate(cache.get(fb)):
                            p[j, : len(pj)] = pj
                        p_fb = Tensor(p)
                    else:
                        batch = collate([(ep.features, q.embedding_tokens, s.embedding_tokens,
                                          build_reference_embedding(ep, s.ref_span), s.ref_span)
                                         for ep, q, s in fb], video_len=m_pad)
                        p_fb = falm.forward(batch).p
                    p_rows.append(adapter(p_fb))
                if qo:
                    p_rows.append(Tensor(np.ones((len(qo), m_pad), dtype=np.float32)))
                p_hat = p_rows[0] if len(p_rows) == 1 else ag.concat(p_rows, axis=0)
                return host_loss(host, eps, qs, p_hat, rng if cfg.rotation_aug else None, anchors)

            losses.append(_step(loss_fn, opt, f"{epoch}:{b}"))
        stats = {"feedback": n_fb, "query_only": n_qo_seen, "temporal_aug": n_aug,
                 "alpha": float(adapter.alpha.data[0]), "beta": float(adapter.beta.data[0])}
        curve.append(EpochStats(epoch, float(np.mean(losses)), len(losses), stats))
        log.info("finetune epoch %d loss %.5f %s", epoch, curve[-1].loss, stats)
    return adapter, TrainResult(curve)


def save_model(path, model, meta: dict) -> None:
    checkpoint.save(path, model.state_dict(), meta)


def load_into(path, model) -> dict:
    state, meta = checkpoint.load(path)
    model.load_state_dict(state)
    return meta
