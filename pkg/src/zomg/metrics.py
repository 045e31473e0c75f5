"""Temporal-IoU matching, ranked average precision over a threshold grid,
and the motion-text similarity report for grounded segments.

All intervals are half-open frame index ranges [start, end), so IoU is
exact integer arithmetic divided once at the end. Predictions are pooled
across instances, ranked by confidence, and greedily matched against the
single ground-truth span of the same (instance, query). Ties in the
ranking break on stable keys, never on arrival order, so shuffling the
input changes no reported number.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EvalInputError, InvalidInputError
from .model import AttentionPoolParams, attention_pool

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


@dataclass(frozen=True)
class GtSegment:
    instance_id: str
    query_idx: int
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise InvalidInputError(f"invalid GT span [{self.start}, {self.end})")


@dataclass(frozen=True)
class ScoredSegment:
    instance_id: str
    query_idx: int
    start: int
    end: int
    confidence: float


@dataclass(frozen=True)
class MatchRecord:
    """Per-prediction IoU against its own (instance, query) ground truth."""

    instance_id: str
    query_idx: int
    start: int
    end: int
    confidence: float
    iou: float
    has_gt: bool


@dataclass(frozen=True)
class EvalReport:
    thresholds: tuple
    ap_per_threshold: dict
    map_mean: float
    per_instance: list


def segment_iou(a: tuple, b: tuple) -> float:
    """Intersection-over-union of two half-open intervals; 0 when disjoint."""
    (a0, a1), (b0, b1) = a, b
    if a0 >= a1 or b0 >= b1:
        raise InvalidInputError(f"empty interval in IoU: {a} vs {b}")
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def _ranked(preds: Sequence[ScoredSegment]) -> list[ScoredSegment]:
    return sorted(
        preds,
        key=lambda p: (-p.confidence, p.instance_id, p.query_idx, p.start, p.end),
    )


def average_precision(preds: Sequence[ScoredSegment], gts: Sequence[GtSegment],
                      iou_threshold: float) -> float:
    """Detection-style ranked AP at one IoU threshold.

    Predictions from all instances are ranked by confidence; each one is a
    true positive if it overlaps the still-unmatched ground truth of its
    own (instance, query) with IoU >= threshold. AP is the sum of the
    precisions at the true-positive ranks divided by the GT count.
    """
    if not gts:
        raise EvalInputError("average_precision needs at least one ground-truth span")
    gt_index = {(g.instance_id, g.query_idx): g for g in gts}
    matched: set[tuple] = set()
    tp = 0
    ap = 0.0
    for rank, p in enumerate(_ranked(preds), start=1):
        key = (p.instance_id, p.query_idx)
        gt = gt_index.get(key)
        if gt is None or key in matched:
            continue
        if segment_iou((p.start, p.end), (gt.start, gt.end)) >= iou_threshold:
            matched.add(key)
            tp += 1
            ap += tp / rank
    return ap / len(gts)


def mean_ap(preds: Sequence[ScoredSegment], gts: Sequence[GtSegment],
            thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    """AP at every threshold plus their arithmetic mean and per-pair IoUs."""
    thresholds = tuple(thresholds)
    if not thresholds:
        raise EvalInputError("threshold grid is empty")
    ap = {t: average_precision(preds, gts, t) for t in thresholds}
    gt_index = {(g.instance_id, g.query_idx): g for g in gts}
    records = []
    for p in sorted(preds, key=lambda p: (p.instance_id, p.query_idx, p.start, p.end)):
        gt = gt_index.get((p.instance_id, p.query_idx))
        iou = segment_iou((p.start, p.end), (gt.start, gt.end)) if gt else 0.0
        records.append(MatchRecord(p.instance_id, p.query_idx, p.start, p.end,
                                   p.confidence, iou, gt is not None))
    return EvalReport(
        thresholds=thresholds,
        ap_per_threshold=ap,
        map_mean=float(np.mean(list(ap.values()))),
        per_instance=records,
    )


@dataclass(frozen=True)
class SimilarityRow:
    method: str
    instance_id: str
    query_idx: int
    similarity: float


def segment_similarity_rows(params: AttentionPoolParams, instances,
                            segments_by_instance: dict, method: str) -> list[SimilarityRow]:
    """Cosine between the pooled hard crop of each segment and its query.

    `segments_by_instance` maps instance id to (query_idx, start, end)
    triples. Empty or out-of-range spans are skipped with a log note.
    """
    by_id = {inst.id: inst for inst in instances}
    rows: list[SimilarityRow] = []
    for instance_id in sorted(segments_by_instance):
        inst = by_id.get(instance_id)
        if inst is None:
            log.warning("similarity report: no instance %r, skipping", instance_id)
            continue
        L = inst.frames.shape[0]
        for query_idx, start, end in segments_by_instance[instance_id]:
            if not (0 <= start < end <= L):
                log.warning("similarity report: empty/invalid span [%d, %d) in %r, skipped",
                            start, end, instance_id)
                continue
            emb = attention_pool(params, inst.frames[start:end])
            sim = float(emb @ inst.queries[query_idx].embedding)
            rows.append(SimilarityRow(method, instance_id, query_idx, sim))
    return rows


def semantic_similarity_report(params: AttentionPoolParams, instances, results,
                               method: str = "predicted") -> list[SimilarityRow]:
    """Similarity rows for grounded results (objects with .id and .segments)."""
    segs = {r.id: [(s.query_idx, s.start, s.end) for s in r.segments] for r in results}
    return segment_similarity_rows(params, instances, segs, method)


@dataclass(frozen=True)
class SimilaritySummary:
    method: str
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float


def summarize_similarity(rows: Sequence[SimilarityRow]) -> list[SimilaritySummary]:
    """Boxplot-ready quartiles of the similarity values per method label."""
    by_method: dict[str, list[float]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r.similarity)
    out = []
    for method in sorted(by_method):
        vals = np.array(by_method[method])
        q0, q1, q2, q3, q4 = np.percentile(vals, [0, 25, 50, 75, 100])
        out.append(SimilaritySummary(method, len(vals), float(q0), float(q1),
                                     float(q2), float(q3), float(q4)))
    return out
