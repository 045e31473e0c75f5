"""File schemas: instances, pooling weights, result streams, CSV reports.

JSON is the primary encoding (auditable at desk scale); frame matrices may
optionally live in a raw little-endian float sidecar for bulk. Loaders
validate everything on the way in (shapes, ranges, finiteness) and name
the offending field with a JSON-pointer-style path. Saving and reloading
any object is value-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from .errors import SchemaValidationError
from .model import AttentionPoolParams
from .smo import GroundingResult, LossBreakdown, Segment

CSV_LOSS_TRACE_HEADER = ["step", "total", "contrastive", "exclusivity", "smoothness"]
CSV_PRETRAIN_LOSS_HEADER = ["step", "loss"]
CSV_SIMILARITY_HEADER = ["method", "instance_id", "query_idx", "similarity"]
CSV_MATCH_HEADER = ["instance_id", "query_idx", "start", "end", "confidence", "iou", "has_gt"]


@dataclass(frozen=True)
class Query:
    text: str
    embedding: np.ndarray


@dataclass(frozen=True)
class Span:
    query_idx: int
    start: int
    end: int


@dataclass(frozen=True)
class Instance:
    """One grounding problem: frames, ordered sub-action queries, optional GT."""

    id: str
    text: str
    frames: np.ndarray
    queries: list[Query]
    gt_segments: Optional[list[Span]] = None


def _reject_constant(token):
    raise SchemaValidationError(f"non-finite JSON constant {token!r}")


def load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh, parse_constant=_reject_constant)
        except json.JSONDecodeError as exc:
            raise SchemaValidationError(f"{path}: not valid JSON: {exc}") from exc


def _require(cond: bool, message: str, pointer: str):
    if not cond:
        raise SchemaValidationError(message, pointer)


def _finite_array(values, pointer: str, dtype=np.float64) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise SchemaValidationError(f"not a numeric array: {exc}", pointer) from exc
    _require(bool(np.all(np.isfinite(arr))), "contains NaN/Inf", pointer)
    return arr


def load_instance(path: str) -> Instance:
    """Load and validate one instance file (inline or binary frames)."""
    data = load_json(path)
    _require(isinstance(data.get("id"), str) and data["id"] != "", "missing or empty id", "/id")
    _require(isinstance(data.get("text"), str), "text must be a string", "/text")
    dim = data.get("dim")
    _require(isinstance(dim, int) and dim >= 1, "dim must be a positive integer", "/dim")

    if "frames" in data:
        frames = data["frames"]
        _require(isinstance(frames, list) and len(frames) >= 1, "frames must be a non-empty list", "/frames")
        for t, row in enumerate(frames):
            _require(isinstance(row, list) and len(row) == dim,
                     f"frame row must have {dim} entries", f"/frames/{t}")
        frames = _finite_array(frames, "/frames")
    elif "frames_bin" in data:
        ref = data["frames_bin"]
        _require(isinstance(ref, dict), "frames_bin must be an object", "/frames_bin")
        L = ref.get("L")
        _require(isinstance(L, int) and L >= 1, "L must be a positive integer", "/frames_bin/L")
        width = ref.get("width", 64)
        _require(width in (32, 64), "width must be 32 or 64", "/frames_bin/width")
        rel = ref.get("path")
        _require(isinstance(rel, str) and rel != "", "missing sidecar path", "/frames_bin/path")
        bin_path = os.path.join(os.path.dirname(os.path.abspath(path)), rel)
        dtype = "<f4" if width == 32 else "<f8"
        raw = np.fromfile(bin_path, dtype=dtype)
        _require(raw.size == L * dim,
                 f"sidecar holds {raw.size} values, expected {L}*{dim}", "/frames_bin/path")
        frames = _finite_array(raw.astype(np.float64).reshape(L, dim), "/frames_bin")
    else:
        raise SchemaValidationError("need frames or frames_bin", "/frames")

    L = frames.shape[0]
    raw_queries = data.get("queries")
    _require(isinstance(raw_queries, list) and len(raw_queries) >= 1,
             "queries must be a non-empty list", "/queries")
    queries = []
    for i, entry in enumerate(raw_queries):
        ptr = f"/queries/{i}"
        _require(isinstance(entry, dict), "query must be an object", ptr)
        _require(isinstance(entry.get("text"), str), "query text must be a string", f"{ptr}/text")
        emb = entry.get("embedding")
        _require(isinstance(emb, list) and len(emb) == dim,
                 f"embedding must have {dim} entries", f"{ptr}/embedding")
        emb = _finite_array(emb, f"{ptr}/embedding")
        _require(abs(float(np.linalg.norm(emb)) - 1.0) <= 1e-6,
                 "query embedding must be unit L2 norm", f"{ptr}/embedding")
        queries.append(Query(entry["text"], emb))

    gt = None
    if data.get("gt_segments") is not None:
        gt = []
        for i, entry in enumerate(data["gt_segments"]):
            ptr = f"/gt_segments/{i}"
            _require(isinstance(entry, dict), "gt segment must be an object", ptr)
            qi, start, end = entry.get("query_idx"), entry.get("start"), entry.get("end")
            _require(isinstance(qi, int) and 0 <= qi < len(queries),
                     f"query_idx out of range [0, {len(queries)})", f"{ptr}/query_idx")
            _require(isinstance(start, int) and 0 <= start < L, "start out of range", f"{ptr}/start")
            _require(isinstance(end, int) and start < end <= L,
                     f"end must satisfy start < end <= {L}", f"{ptr}/end")
            gt.append(Span(qi, start, end))

    return Instance(data["id"], data["text"], frames, queries, gt)


def save_instance(instance: Instance, path: str, frames_encoding: str = "json") -> None:
    """Write one instance file; `frames_encoding` is json, bin32 or bin64."""
    obj = {
        "id": instance.id,
        "text": instance.text,
        "dim": int(instance.frames.shape[1]),
        "queries": [
            {"text": q.text, "embedding": [float(x) for x in q.embedding]}
            for q in instance.queries
        ],
    }
    if instance.gt_segments is not None:
        obj["gt_segments"] = [
            {"query_idx": s.query_idx, "start": s.start, "end": s.end}
            for s in instance.gt_segments
        ]
    if frames_encoding == "json":
        obj["frames"] = [[float(x) for x in row] for row in instance.frames]
    elif frames_encoding in ("bin32", "bin64"):
        width = 32 if frames_encoding == "bin32" else 64
        sidecar = os.path.basename(path) + ".frames.bin"
        dtype = "<f4" if width == 32 else "<f8"
        instance.frames.astype(dtype).tofile(os.path.join(os.path.dirname(os.path.abspath(path)), sidecar))
        obj["frames_bin"] = {"path": sidecar, "L": int(instance.frames.shape[0]), "width": width}
    else:
        raise SchemaValidationError(f"unknown frames encoding {frames_encoding!r}")
    dump_json(obj, path)


def dump_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def save_weights(params: AttentionPoolParams, path: str, meta: dict) -> None:
    """Weights file: {"d", "wk", "wv", "q", "meta"}; meta must carry
    seed/steps/tau and may carry anything else (version, resolved config)."""
    for key in ("seed", "steps", "tau"):
        if key not in meta:
            raise SchemaValidationError(f"weights meta missing {key!r}", "/meta")
    obj = {
        "d": params.d,
        "wk": [[float(x) for x in row] for row in params.wk],
        "wv": [[float(x) for x in row] for row in params.wv],
        "q": [float(x) for x in params.q],
        "meta": meta,
    }
    dump_json(obj, path)


def load_weights(path: str) -> tuple[AttentionPoolParams, dict]:
    data = load_json(path)
    d = data.get("d")
    _require(isinstance(d, int) and d >= 1, "d must be a positive integer", "/d")
    wk = _finite_array(data.get("wk"), "/wk")
    wv = _finite_array(data.get("wv"), "/wv")
    q = _finite_array(data.get("q"), "/q")
    _require(wk.shape == (d, d), f"wk must be {d}x{d}", "/wk")
    _require(wv.shape == (d, d), f"wv must be {d}x{d}", "/wv")
    _require(q.shape == (d,), f"q must have {d} entries", "/q")
    meta = data.get("meta")
    _require(isinstance(meta, dict), "meta must be an object", "/meta")
    return AttentionPoolParams(wk, wv, q), meta


@dataclass(frozen=True)
class ResultRecord:
    """One grounded instance, as serialized to the results JSONL stream."""

    id: str
    k: int
    L: int
    param_count: int
    labels: list[int]
    segments: list[Segment]
    fragments: list[Segment]
    final_loss: LossBreakdown
    loss_trace_path: Optional[str] = None


def result_record(instance_id: str, result: GroundingResult,
                  loss_trace_path: Optional[str] = None) -> ResultRecord:
    k, L = result.masks.shape
    return ResultRecord(
        id=instance_id,
        k=k,
        L=L,
        param_count=k * L,
        labels=[int(x) for x in result.labels],
        segments=list(result.segments),
        fragments=list(result.fragments),
        final_loss=result.loss_trace[-1],
        loss_trace_path=loss_trace_path,
    )


def _segment_obj(seg: Segment) -> dict:
    return {"query_idx": seg.query_idx, "start": seg.start, "end": seg.end,
            "confidence": seg.confidence}


def _segment_from_obj(obj: dict, pointer: str) -> Segment:
    try:
        return Segment(int(obj["query_idx"]), int(obj["start"]), int(obj["end"]),
                       float(obj["confidence"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaValidationError(f"bad segment object: {exc}", pointer) from exc


def record_to_obj(record: ResultRecord) -> dict:
    obj = {
        "id": record.id,
        "k": record.k,
        "L": record.L,
        "param_count": record.param_count,
        "labels": record.labels,
        "segments": [_segment_obj(s) for s in record.segments],
        "fragments": [_segment_obj(s) for s in record.fragments],
        "final_loss": {
            "total": record.final_loss.total,
            "contrastive": record.final_loss.contrastive,
            "exclusivity": record.final_loss.exclusivity,
            "smoothness": record.final_loss.smoothness,
        },
    }
    if record.loss_trace_path is not None:
        obj["loss_trace_path"] = record.loss_trace_path
    return obj


def record_from_obj(obj: dict) -> ResultRecord:
    try:
        labels = [int(x) for x in obj["labels"]]
        fl = obj["final_loss"]
        record = ResultRecord(
            id=obj["id"],
            k=int(obj["k"]),
            L=int(obj["L"]),
            param_count=int(obj["param_count"]),
            labels=labels,
            segments=[_segment_from_obj(s, f"/segments/{i}") for i, s in enumerate(obj["segments"])],
            fragments=[_segment_from_obj(s, f"/fragments/{i}") for i, s in enumerate(obj["fragments"])],
            final_loss=LossBreakdown(float(fl["total"]), float(fl["contrastive"]),
                                     float(fl["exclusivity"]), float(fl["smoothness"])),
            loss_trace_path=obj.get("loss_trace_path"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaValidationError(f"bad result record: {exc}") from exc
    if record.param_count != record.k * record.L:
        raise SchemaValidationError("param_count must equal k*L", "/param_count")
    if len(labels) != record.L:
        raise SchemaValidationError("labels length must equal L", "/labels")
    return record


def append_result(fh: IO[str], record: ResultRecord) -> None:
    """One whole record per line; the single write keeps partial lines out."""
    fh.write(json.dumps(record_to_obj(record), sort_keys=True, allow_nan=False) + "\n")
    fh.flush()


def write_run_header(fh: IO[str], command: str, version: str, config: dict) -> None:
    header = {"run": {"command": command, "version": version, "config": config}}
    fh.write(json.dumps(header, sort_keys=True, allow_nan=False) + "\n")
    fh.flush()


def read_results(path: str) -> tuple[Optional[dict], list[ResultRecord]]:
    """Read a results stream; returns (run header if present, records)."""
    header = None
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
            except json.JSONDecodeError as exc:
                raise SchemaValidationError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if "run" in obj and "id" not in obj:
                header = obj["run"]
            else:
                records.append(record_from_obj(obj))
    return header, records


def _write_csv(path: str, header: list[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_loss_trace_csv(path: str, trace: Sequence[LossBreakdown]) -> None:
    _write_csv(path, CSV_LOSS_TRACE_HEADER,
               ((i, b.total, b.contrastive, b.exclusivity, b.smoothness)
                for i, b in enumerate(trace)))


def write_pretrain_loss_csv(path: str, losses: Sequence[float]) -> None:
    _write_csv(path, CSV_PRETRAIN_LOSS_HEADER, ((i, v) for i, v in enumerate(losses)))


def write_similarity_csv(path: str, rows) -> None:
    _write_csv(path, CSV_SIMILARITY_HEADER,
               ((r.method, r.instance_id, r.query_idx, r.similarity) for r in rows))


def write_match_csv(path: str, records) -> None:
    _write_csv(path, CSV_MATCH_HEADER,
               ((r.instance_id, r.query_idx, r.start, r.end, r.confidence, r.iou,
                 int(r.has_gt)) for r in records))


def write_eval_report(path: str, report, run: Optional[dict] = None,
                      similarity_summary=None) -> None:
    obj = eval_report_obj(report, run, similarity_summary)
    dump_json(obj, path)


def eval_report_obj(report, run: Optional[dict] = None, similarity_summary=None) -> dict:
    obj = {
        "thresholds": list(report.thresholds),
        "ap_per_threshold": {f"{t:g}": v for t, v in report.ap_per_threshold.items()},
        "map_mean": report.map_mean,
        "per_instance": [
            {"instance_id": r.instance_id, "query_idx": r.query_idx, "start": r.start,
             "end": r.end, "confidence": r.confidence, "iou": r.iou, "has_gt": r.has_gt}
            for r in report.per_instance
        ],
    }
    if similarity_summary is not None:
        obj["similarity_summary"] = [
            {"method": s.method, "count": s.count, "min": s.minimum, "q1": s.q1,
             "median": s.median, "q3": s.q3, "max": s.maximum}
            for s in similarity_summary
        ]
    if run is not None:
        obj["run"] = run
    return obj
