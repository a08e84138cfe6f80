"""Pipeline stages over a work directory: gen, refs, feedback, labels, training, eval, report.

Each stage reads the artifacts of earlier stages from the work directory and writes its own
atomically. Every artifact carries the hash of the full pipeline config and its seed.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import artifacts as art
from .core import ConfigError, EpisodeRecord
from .evalkit import (
    METRICS,
    Curve,
    EvalDataset,
    Mode,
    RefocusRunner,
    compare,
    curve_rows,
    evaluate_split,
    multi_turn_eval,
    noisy_recovery_eval,
    table1_rows,
    write_csv,
    write_json,
)
from .falm import FalmConfig, FalmModel
from .feedbackgen import FeedbackConfig, build_qnf_dataset
from .labelgen import DEFAULT_SMOOTH_SIGMA, make_labels
from .localizer import EmAdapter, HostConfig, HostModel
from .refsample import fit_beta, sample_reference_pools
from .synthworld import RESERVED_TOKENS, WorldConfig, embed_terms, embedder_for, generate_world
from .tensor import checkpoint
from .trainer import (
    FalmExample,
    TrainConfig,
    finetune_refocus,
    load_into,
    pretrain_falm,
    pretrain_host,
    save_model,
    write_curve,
)

log = logging.getLogger(__name__)

CONFIG_DIR_ENV = "FEEDLOC_CONFIG_DIR"
SPLITS = ("train", "val", "test")
EVAL_MODES = ("query-only", "feedback", "multi-turn", "noisy")


def _falm_default() -> FalmConfig:
    return FalmConfig(ref_positions=True, shared_input=True, tied_cross_init=True)


def _host_default() -> HostConfig:
    return HostConfig(shared_input=True, tied_attn_init=True)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    sizes: dict = field(default_factory=lambda: {"train": 500, "val": 100, "test": 200})
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    label_sigma: float = DEFAULT_SMOOTH_SIGMA
    falm: FalmConfig = field(default_factory=_falm_default)
    falm_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, lr=2e-3, rotation_aug=True))
    host: HostConfig = field(default_factory=_host_default)
    host_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, lr=3e-3, rotation_aug=True))
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=12, lr=3e-3, rotation_aug=True))
    eval_split: str = "test"
    samplings: int = 5
    multi_turn_n: int = 5
    noisy_turns: int = 4

    def __post_init__(self):
        for name in SPLITS:
            if name not in self.sizes or int(self.sizes[name]) < 1:
                raise ConfigError(f"sizes.{name} must be a positive episode count")
        if self.eval_split not in SPLITS:
            raise ConfigError(f"eval_split must be one of {SPLITS}")

    def seeded(self, seed: int) -> "PipelineConfig":
        """Propagates one seed into the world, reference sampling, models and training."""
        t = lambda c: replace(c, seed=seed)
        return replace(self, seed=seed, world=t(self.world), feedback=t(self.feedback),
                       falm=t(self.falm), falm_train=t(self.falm_train), host=t(self.host),
                       host_train=t(self.host_train), finetune=t(self.finetune))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        d["feedback"]["drop_probs"] = [list(p) for p in self.feedback.drop_probs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub = {"world": WorldConfig, "feedback": FeedbackConfig, "falm": FalmConfig,
               "falm_train": TrainConfig, "host": HostConfig, "host_train": TrainConfig,
               "finetune": TrainConfig}
        kw: dict[str, Any] = {}
        for k, v in d.items():
            if k in sub:
                v = dict(v)
                if k == "feedback" and "drop_probs" in v:
                    v["drop_probs"] = tuple(tuple(p) for p in v["drop_probs"])
                try:
                    v = sub[k](**v)
                except TypeError as exc:
                    raise ConfigError(f"{k}: {exc}") from exc
            kw[k] = v
        return cls(**kw)

    @property
    def hash(self) -> str:
        return art.config_hash(self.to_dict())


def resolve_config_path(name: str | None) -> Path | None:
    """A bare name is looked up in the config directory (``$FEEDLOC_CONFIG_DIR``)."""
    if name is None:
        base = os.environ.get(CONFIG_DIR_ENV)
        cand = Path(base) / "default.json" if base else None
        return cand if cand is not None and cand.exists() else None
    p = Path(name)
    if p.exists() or p.is_absolute() or os.sep in name:
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        for cand in (Path(base) / name, Path(base) / f"{name}.json"):
            if cand.exists():
                return cand
    return p


def load_config(name: str | None = None) -> PipelineConfig:
    path = resolve_config_path(name)
    if path is None:
        return PipelineConfig()
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise art.DataError(f"{path}: invalid JSON ({exc.msg})") from exc
    return PipelineConfig.from_dict(d)


class Workspace:
    """Paths and typed loaders for one pipeline run."""

    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.emb = embedder_for(cfg.world)
        self.anchors = embed_terms(self.emb, RESERVED_TOKENS)
        self._worlds: dict[str, list[EpisodeRecord]] = {}

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.hash, "seed": self.cfg.seed}

    def _args(self) -> tuple[dict, int]:
        return self.cfg.to_dict(), self.cfg.seed

    def _check(self, header: dict, path) -> None:
        if header.get("config_hash") != self.cfg.hash:
            raise art.DataError(f"{path}: produced by config {header.get('config_hash')}, "
                                f"current config is {self.cfg.hash}")

    def path(self, name: str) -> Path:
        return self.root / name

    def world(self, split: str) -> list[EpisodeRecord]:
        if split not in self._worlds:
            eps, header = art.load_world(self.root, split)
            self._check(header, self.path(f"episodes_{split}.jsonl"))
            self._worlds[split] = eps
        return self._worlds[split]

    def pools(self, split: str):
        pools, header = art.load_pools(self.path(f"refs_{split}.jsonl"))
        self._check(header, self.path(f"refs_{split}.jsonl"))
        return pools

    def feedback(self, split: str):
        samples, header = art.load_feedback(self.path(f"feedback_{split}.jsonl"))
        self._check(header, self.path(f"feedback_{split}.jsonl"))
        return samples

    def labels(self, split: str):
        rows, header = art.load_labels(self.path(f"labels_{split}.jsonl"))
        self._check(header, self.path(f"labels_{split}.jsonl"))
        return rows

    def _load_model(self, model, name: str):
        meta = load_into(self.path(name), model)
        if meta.get("config_hash") != self.cfg.hash:
            raise art.DataError(f"{self.path(name)}: checkpoint from config {meta.get('config_hash')}")
        return model

    def falm_model(self) -> FalmModel:
        return self._load_model(FalmModel(self.cfg.falm), "falm.ckpt")

    def host_model(self, name: str = "host.ckpt") -> HostModel:
        return self._load_model(HostModel(self.cfg.host), name)

    def adapter(self) -> EmAdapter:
        return self._load_model(EmAdapter(), "adapter.ckpt")


def stage_gen(ws: Workspace) -> None:
    cfg, seed = ws._args()
    for split in SPLITS:
        eps = generate_world(ws.cfg.world.with_split(split, int(ws.cfg.sizes[split])), ws.emb)
        art.save_world(ws.root, split, eps, cfg, seed)
    art.atomic_write_bytes(ws.path("config.json"),
                           (json.dumps({**ws.meta, "config": cfg}, indent=2, sort_keys=True) + "\n")
                           .encode("utf-8"))


def stage_sample_refs(ws: Workspace) -> None:
    cfg, seed = ws._args()
    beta = fit_beta([q.gt_span.duration for ep in ws.world("train") for q in ep.queries])
    for split in SPLITS:
        pools = sample_reference_pools(ws.world(split), beta, ws.cfg.feedback.seed,
                                       n_random=ws.cfg.feedback.n_random)
        art.save_pools(ws.path(f"refs_{split}.jsonl"), pools, cfg, seed)


def stage_make_feedback(ws: Workspace) -> dict[str, dict[str, list[str]]]:
    cfg, seed = ws._args()
    errors = {}
    for split in SPLITS:
        ds = build_qnf_dataset(ws.world(split), ws.pools(split), ws.emb, ws.cfg.feedback, split=split)
        art.save_feedback(ws.path(f"feedback_{split}.jsonl"), ds.samples, cfg, seed)
        errors[split] = ds.errors
    write_json(ws.path("feedback_errors.json"), {**ws.meta, "errors": errors})
    return errors


def stage_make_labels(ws: Workspace, splits=("train", "val")) -> None:
    cfg, seed = ws._args()
    for split in splits:
        eps = {ep.id: ep for ep in ws.world(split)}
        rows = []
        for s in ws.feedback(split):
            ep = eps[s.episode_id]
            q = ep.query(s.query_id)
            rows.append((s.query_id, s.ref_span, make_labels(s, q, ep, ws.emb, ws.cfg.label_sigma)))
        art.save_labels(ws.path(f"labels_{split}.jsonl"), rows, cfg, seed)


def falm_examples_from_disk(ws: Workspace, split: str) -> list[FalmExample]:
    eps = {ep.id: ep for ep in ws.world(split)}
    samples = ws.feedback(split)
    labels = ws.labels(split)
    if len(samples) != len(labels):
        raise art.DataError(f"{ws.path(f'labels_{split}.jsonl')}: {len(labels)} label records for "
                            f"{len(samples)} feedback samples")
    out = []
    for i, (s, (qid, ref, lb)) in enumerate(zip(samples, labels)):
        if qid != s.query_id or ref != s.ref_span:
            raise art.DataError(f"{ws.path(f'labels_{split}.jsonl')}: record {i} does not match "
                                f"feedback record {i}")
        ep = eps[s.episode_id]
        out.append(FalmExample(ep, ep.query(qid), s, lb))
    return out


def stage_train_falm(ws: Workspace) -> None:
    model, res = pretrain_falm(ws.cfg.falm_train, ws.cfg.falm, falm_examples_from_disk(ws, "train"),
                               anchors=ws.anchors)
    save_model(ws.path("falm.ckpt"), model, ws.meta)
    write_curve(ws.path("falm_curve.csv"), res.curve)


def stage_train_host(ws: Workspace) -> None:
    samples = [(ep, q) for ep in ws.world("train") for q in ep.queries]
    model, res = pretrain_host(ws.cfg.host_train, ws.cfg.host, samples, anchors=ws.anchors)
    save_model(ws.path("host.ckpt"), model, ws.meta)
    write_curve(ws.path("host_curve.csv"), res.curve)


def stage_finetune(ws: Workspace) -> None:
    host = ws.host_model()
    falm = ws.falm_model()
    adapter, res = finetune_refocus(ws.cfg.finetune, host, falm, ws.feedback("train"), ws.world("train"),
                                    ws.emb, anchors=ws.anchors)
    save_model(ws.path("refocus_host.ckpt"), host, ws.meta)
    save_model(ws.path("adapter.ckpt"), adapter, ws.meta)
    if not ws.cfg.finetune.falm_frozen:
        save_model(ws.path("falm.ckpt"), falm, ws.meta)
    write_curve(ws.path("finetune_curve.csv"), res.curve)


def make_runner(ws: Workspace, bypass: bool = False) -> RefocusRunner:
    """``bypass`` pins the adapter to P_hat = 1, which must reproduce query-only output."""
    adapter = EmAdapter(alpha=0.0, beta=1.0) if bypass else ws.adapter()
    return RefocusRunner(ws.host_model("refocus_host.ckpt"), ws.falm_model(), adapter)


def eval_dataset(ws: Workspace) -> EvalDataset:
    split = ws.cfg.eval_split
    return EvalDataset.build(ws.world(split), ws.feedback(split))


def stage_eval(ws: Workspace, mode: str, bypass: bool = False) -> dict:
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; choose from {EVAL_MODES}")
    runner = make_runner(ws, bypass)
    ds = eval_dataset(ws)
    tag = mode + ("-bypass" if bypass else "")
    seed = ws.cfg.seed
    if mode in ("query-only", "feedback"):
        cmp = compare(runner, ds)
        result = {**ws.meta, "mode": mode, "bypass": bypass, **cmp.to_dict()}
        write_csv(ws.path(f"eval_{tag}.csv"), table1_rows(cmp))
    elif mode == "multi-turn":
        curve = multi_turn_eval(runner, ds, ws.cfg.multi_turn_n, ws.cfg.samplings, seed)
        result = {**ws.meta, "mode": mode, "bypass": bypass, "curve": curve.to_dict()}
        write_csv(ws.path(f"eval_{tag}.csv"), curve_rows(curve))
    else:
        noisy = noisy_recovery_eval(runner, ds, ws.emb, seed, ws.cfg.noisy_turns, ws.cfg.samplings)
        control = noisy_recovery_eval(runner, ds, ws.emb, seed, ws.cfg.noisy_turns, ws.cfg.samplings,
                                      flip=False)
        # query-only baseline on exactly the queries the noisy protocol could use
        qo = evaluate_split(runner, ds.subset(noisy.query_ids), Mode.QUERY_ONLY)
        result = {**ws.meta, "mode": mode, "bypass": bypass, "noisy": noisy.to_dict(),
                  "control": control.to_dict(), "query_only": qo.to_dict()}
        write_csv(ws.path(f"eval_{tag}.csv"),
                  [{"label": c.label, **r} for c in (noisy, control) for r in curve_rows(c)])
    write_json(ws.path(f"eval_{tag}.json"), result)
    return result


def _fmt(x: float) -> str:
    return f"{x:.1f}"


def stage_report(ws: Workspace) -> dict:
    """Merges every eval JSON in the work directory into report.json and report.md."""
    report: dict[str, Any] = {**ws.meta, "config": ws.cfg.to_dict()}
    lines = [f"config_hash {ws.cfg.hash}  seed {ws.cfg.seed}", ""]
    single = ws.path("eval_feedback.json")
    if not single.exists():
        single = ws.path("eval_query-only.json")
    if single.exists():
        d = json.loads(single.read_text(encoding="utf-8"))
        qo, fb, delta = d["query_only"]["metrics"], d["feedback"]["metrics"], d["delta"]
        report["table"] = {"query_only": qo, "feedback": fb, "delta": delta}
        head = "| Method | " + " | ".join(METRICS) + " | " + " | ".join(f"Δ{m}" for m in METRICS) + " |"
        lines += [head, "|" + "---|" * (1 + 2 * len(METRICS)),
                  "| host (query-only) | " + " | ".join(_fmt(100 * qo[m]) for m in METRICS) + " | "
                  + " | ".join("0.0" for _ in METRICS) + " |",
                  "| ReFocus(host) | " + " | ".join(_fmt(100 * fb[m]) for m in METRICS) + " | "
                  + " | ".join(f"{100 * delta[m]:+.1f}" for m in METRICS) + " |", ""]
        kinds = d["feedback"].get("by_relevance", {})
        if kinds:
            lines += ["| Reference span | " + " | ".join(METRICS) + " |", "|" + "---|" * (1 + len(METRICS))]
            lines += [f"| {k} | " + " | ".join(_fmt(100 * v[m]) for m in METRICS) + " |"
                      for k, v in kinds.items()]
            lines.append("")
    for name, key in (("eval_multi-turn.json", "curve"), ("eval_noisy.json", "noisy")):
        p = ws.path(name)
        if p.exists():
            d = json.loads(p.read_text(encoding="utf-8"))
            curve = Curve(d[key]["label"], [(r["n"], r["metric"], r["mean"], r["std"])
                                             for r in d[key]["rows"]])
            report[key if key == "noisy" else "multi_turn"] = d[key]
            lines += [f"{curve.label}: " + ", ".join(
                f"n={n} R1@0.3 {100 * curve.value(n, 'R1@0.3'):.1f} R5@0.3 {100 * curve.value(n, 'R5@0.3'):.1f}"
                for n in sorted({r[0] for r in curve.rows})), ""]
    write_json(ws.path("report.json"), report)
    art.atomic_write_bytes(ws.path("report.md"), ("\n".join(lines) + "\n").encode("utf-8"))
    return report


STAGES = {
    "gen": stage_gen,
    "sample-refs": stage_sample_refs,
    "make-feedback": stage_make_feedback,
    "make-labels": stage_make_labels,
    "train-falm": stage_train_falm,
    "train-host": stage_train_host,
    "finetune": stage_finetune,
}


def run_all(ws: Workspace, modes=("feedback",)) -> dict:
    ws.root.mkdir(parents=True, exist_ok=True)
    for name, fn in STAGES.items():
        log.info("stage %s", name)
        fn(ws)
    for mode in modes:
        stage_eval(ws, mode)
    return stage_report(ws)
