"""On-disk formats: JSONL records with a header line, features as raw little-endian float32.

Every JSONL file starts with a header record carrying the schema version, config hash and
seed. Feature matrices live in ``<name>.bin`` with a ``<name>.json`` sidecar holding rows,
cols, dtype and a SHA-256 checksum of the binary.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterator, Sequence

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
)
from .labelgen import AlignmentLabels
from .refsample import ReferencePool
from .tensor.checkpoint import atomic_write_bytes

SCHEMA_VERSION = 1
FEATURE_DTYPE = "<f4"


class DataError(FeedlocError):
    """Malformed artifact; the message names the file and, when relevant, the record index."""


class SchemaVersionMismatch(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def make_header(kind: str, config: dict, seed: int) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "config_hash": config_hash(config),
            "seed": int(seed)}


def write_jsonl(path, header: dict, records: Sequence[dict]) -> None:
    lines = [canonical_json(header)] + [canonical_json({"schema_version": SCHEMA_VERSION, **r})
                                        for r in records]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_jsonl(path, kind: str) -> tuple[dict, list[dict]]:
    """Returns (header, records); record indices in errors count from 0 after the header."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file, header missing")
    parsed = []
    for i, ln in enumerate(lines):
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError as exc:
            where = "header" if i == 0 else f"record {i - 1}"
            raise DataError(f"{path}: {where}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}: line {i + 1} is not an object")
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            where = "header" if i == 0 else f"record {i - 1}"
            raise SchemaVersionMismatch(
                f"{path}: {where}: schema_version {version!r}, supported {SCHEMA_VERSION}")
        parsed.append(obj)
    header = parsed[0]
    if header.get("kind") != kind:
        raise DataError(f"{path}: header kind {header.get('kind')!r}, expected {kind!r}")
    return header, parsed[1:]


def _checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_features(path_base, matrix: np.ndarray, header: dict) -> None:
    """Writes ``path_base.bin`` and its ``path_base.json`` sidecar."""
    base = Path(path_base)
    data = np.ascontiguousarray(matrix, dtype=FEATURE_DTYPE)
    if data.ndim != 2:
        raise DataError(f"{base}: feature matrix must be 2-D, got {data.shape}")
    raw = data.tobytes()
    sidecar = {**header, "rows": int(data.shape[0]), "cols": int(data.shape[1]),
               "dtype": FEATURE_DTYPE, "checksum": _checksum(raw)}
    atomic_write_bytes(base.with_suffix(".bin"), raw)
    atomic_write_bytes(base.with_suffix(".json"), (canonical_json(sidecar) + "\n").encode("utf-8"))


def read_features(path_base) -> tuple[np.ndarray, dict]:
    base = Path(path_base)
    bin_path, side_path = base.with_suffix(".bin"), base.with_suffix(".json")
    try:
        sidecar = json.loads(side_path.read_text(encoding="utf-8"))
        raw = bin_path.read_bytes()
    except OSError as exc:
        raise DataError(f"{exc.filename}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{side_path}: invalid JSON ({exc.msg})") from exc
    if sidecar.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{side_path}: schema_version {sidecar.get('schema_version')!r}, "
                                    f"supported {SCHEMA_VERSION}")
    if sidecar.get("dtype") != FEATURE_DTYPE:
        raise DataError(f"{side_path}: unsupported dtype {sidecar.get('dtype')!r}")
    rows, cols = int(sidecar["rows"]), int(sidecar["cols"])
    if _checksum(raw) != sidecar.get("checksum") or len(raw) != 4 * rows * cols:
        raise ChecksumMismatch(f"{bin_path}: checksum or size does not match {side_path.name}")
    return np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(rows, cols).astype(np.float32), sidecar


def _span(v) -> Span:
    if not (isinstance(v, list) and len(v) == 2):
        raise ValueError(f"span must be [start, end], got {v!r}")
    return Span(float(v[0]), float(v[1]))


def _matrix(v, cols: int | None = None) -> np.ndarray:
    a = np.asarray(v, dtype=np.float32)
    if a.ndim != 2 or (cols is not None and a.shape[1] != cols):
        raise ValueError(f"expected a matrix with {cols} columns, got shape {a.shape}")
    return a


class _Records:
    """Iterates records, re-raising any validation failure as a DataError with its index."""

    def __init__(self, path, records: list[dict]):
        self.path, self.records = path, records

    def __iter__(self) -> Iterator[tuple[int, dict]]:
        return iter(enumerate(self.records))

    def fail(self, i: int, exc: Exception) -> DataError:
        return DataError(f"{self.path}: record {i}: {exc}")


# episodes


def query_to_record(q: QueryRecord) -> dict:
    return {"id": q.id, "terms": list(q.terms), "gt": q.gt_span.to_list(),
            "target_event": q.target_event, "answer_token": q.answer_token,
            "embedding": q.embedding_tokens.astype(np.float32).tolist()}


def query_from_record(r: dict) -> QueryRecord:
    return QueryRecord(id=str(r["id"]), terms=tuple(r["terms"]),
                       embedding_tokens=_matrix(r["embedding"]), gt_span=_span(r["gt"]),
                       target_event=str(r.get("target_event", "")), answer_token=r.get("answer_token"))


def save_world(out_dir, split: str, episodes: Sequence[EpisodeRecord], config: dict, seed: int) -> None:
    out_dir = Path(out_dir)
    header = make_header("episodes", config, seed)
    records, offset = [], 0
    for ep in episodes:
        records.append({"id": ep.id, "clip_events": [list(c) for c in ep.clip_events],
                        "feature_rows": [offset, offset + ep.m],
                        "queries": [query_to_record(q) for q in ep.queries]})
        offset += ep.m
    dim = episodes[0].features.shape[1] if episodes else 0
    feats = np.concatenate([ep.features for ep in episodes]) if episodes else np.zeros((0, dim))
    write_features(out_dir / f"features_{split}", feats, make_header("features", config, seed))
    write_jsonl(out_dir / f"episodes_{split}.jsonl", header, records)


def load_world(in_dir, split: str) -> tuple[list[EpisodeRecord], dict]:
    in_dir = Path(in_dir)
    path = in_dir / f"episodes_{split}.jsonl"
    header, records = read_jsonl(path, "episodes")
    feats, side = read_features(in_dir / f"features_{split}")
    if side.get("config_hash") != header.get("config_hash"):
        raise DataError(f"{path}: config hash differs from its feature sidecar")
    recs = _Records(path, records)
    out = []
    for i, r in recs:
        try:
            lo, hi = (int(x) for x in r["feature_rows"])
            if not 0 <= lo < hi <= feats.shape[0]:
                raise ValueError(f"feature_rows {r['feature_rows']} outside 0..{feats.shape[0]}")
            out.append(EpisodeRecord(id=str(r["id"]),
                                     clip_events=tuple(tuple(c) for c in r["clip_events"]),
                                     features=feats[lo:hi].copy(),
                                     queries=tuple(query_from_record(q) for q in r["queries"])))
        except (KeyError, TypeError, ValueError, FeedlocError) as exc:
            raise recs.fail(i, exc) from exc
    return out, header


# reference pools


def save_pools(path, pools: dict[str, ReferencePool], config: dict, seed: int) -> None:
    recs = [{"query_id": p.query_id, "episode_id": p.episode_id,
             "relevant": [[*s.to_list(), k.value] for s, k in p.relevant],
             "irrelevant": [[*s.to_list(), k.value] for s, k in p.irrelevant],
             "skipped": list(p.skipped)} for p in pools.values()]
    write_jsonl(path, make_header("pools", config, seed), recs)


def load_pools(path) -> tuple[dict[str, ReferencePool], dict]:
    header, records = read_jsonl(path, "pools")
    recs = _Records(path, records)
    out = {}
    for i, r in recs:
        try:
            refs = lambda rows: [(_span(x[:2]), RefKind(x[2])) for x in rows]
            out[r["query_id"]] = ReferencePool(str(r["query_id"]), str(r["episode_id"]),
                                               refs(r["relevant"]), refs(r["irrelevant"]),
                                               list(r["skipped"]))
        except (KeyError, TypeError, ValueError, IndexError, FeedlocError) as exc:
            raise recs.fail(i, exc) from exc
    return out, header


# feedback


def feedback_to_record(s: FeedbackSample) -> dict:
    c = s.clauses
    return {"query_id": s.query_id, "episode_id": s.episode_id, "ref": s.ref_span.to_list(),
            "contains": list(c.contains), "not_contains": list(c.not_contains),
            "temporal": c.temporal.value, "text": s.text, "ref_kind": s.ref_kind.value,
            "embedding": s.embedding_tokens.astype(np.float32).tolist()}


def feedback_from_record(r: dict) -> FeedbackSample:
    clauses = ClauseSet(tuple(r["contains"]), tuple(r["not_contains"]), Temporal(r["temporal"]))
    return FeedbackSample(query_id=str(r["query_id"]), ref_span=_span(r["ref"]), clauses=clauses,
                          text=str(r["text"]), embedding_tokens=_matrix(r["embedding"]),
                          ref_kind=RefKind(r["ref_kind"]), episode_id=str(r.get("episode_id", "")))


def save_feedback(path, samples: Sequence[FeedbackSample], config: dict, seed: int) -> None:
    write_jsonl(path, make_header("feedback", config, seed), [feedback_to_record(s) for s in samples])


def load_feedback(path) -> tuple[list[FeedbackSample], dict]:
    header, records = read_jsonl(path, "feedback")
    recs = _Records(path, records)
    out = []
    for i, r in recs:
        try:
            out.append(feedback_from_record(r))
        except (KeyError, TypeError, ValueError, FeedlocError) as exc:
            raise recs.fail(i, exc) from exc
    return out, header


# labels


def labels_to_record(query_id: str, ref: Span, lb: AlignmentLabels) -> dict:
    return {"query_id": query_id, "ref": ref.to_list(), **lb.to_dict()}


def labels_from_record(r: dict) -> tuple[str, Span, AlignmentLabels]:
    arr = lambda k, dt: np.asarray(r[k], dtype=dt)
    present = r["present"]
    lb = AlignmentLabels(s_c=arr("s_c", np.float64), s_k=arr("s_k", np.float64),
                         l_c=arr("l_c", bool), l_k=arr("l_k", bool), l_t=arr("l_t", bool),
                         l=arr("l", bool), has_contains=bool(present["has_contains"]),
                         has_not_contains=bool(present["has_not_contains"]),
                         has_temporal=bool(present["has_temporal"]))
    lens = {len(getattr(lb, k)) for k in ("s_c", "s_k", "l_c", "l_k", "l_t", "l")}
    if len(lens) != 1:
        raise ValueError(f"label vectors have differing lengths {sorted(lens)}")
    return str(r["query_id"]), _span(r["ref"]), lb


def save_labels(path, rows: Sequence[tuple[str, Span, AlignmentLabels]], config: dict, seed: int) -> None:
    write_jsonl(path, make_header("labels", config, seed), [labels_to_record(*row) for row in rows])


def load_labels(path) -> tuple[list[tuple[str, Span, AlignmentLabels]], dict]:
    header, records = read_jsonl(path, "labels")
    recs = _Records(path, records)
    out = []
    for i, r in recs:
        try:
            out.append(labels_from_record(r))
        except (KeyError, TypeError, ValueError, FeedlocError) as exc:
            raise recs.fail(i, exc) from exc
    return out, header
