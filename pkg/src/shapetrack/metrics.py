"""Recall-averaged tracking metrics: per-frame greedy matching, identity
switches, MOTAR per recall threshold, and the AMOTA / AMOTP sweep.

The sweep mirrors the standard tracking-devkit procedure: one unthresholded
matching pass yields the true-positive score curve, each recall target maps
to the highest confidence threshold still achieving it, and the CLEAR-style
counts are recomputed per threshold. Unreachable targets contribute MOTAR 0
and are excluded from the AMOTP mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import greedy_pairs

MATCH_GATE = 2.0  # meters, planar center distance
DEFAULT_RECALL_STEPS = 40


@dataclass(frozen=True)
class PredBox:
    """One predicted box in one frame."""

    track_id: int
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class GtBox:
    gt_id: int
    x: float
    y: float


@dataclass
class EvalFrame:
    """Predictions and ground truth for one frame of one scene."""

    scene: int
    frame: int
    preds: list[PredBox] = field(default_factory=list)
    gts: list[GtBox] = field(default_factory=list)


@dataclass
class FrameMatch:
    """Per-frame matching outcome: TP pairs with distances, FPs, FNs."""

    pairs: list[tuple[int, int, float]]  # (pred index, gt index, distance)
    unmatched_preds: list[int]
    unmatched_gts: list[int]


@dataclass
class ThresholdPoint:
    target_recall: float
    threshold: float | None  # None when the target recall is unreachable
    achieved_recall: float
    motar: float
    motp: float
    tp: int
    fp: int
    fn: int
    ids: int


@dataclass
class ClassResult:
    amota: float
    amotp: float  # NaN when no recall target was achieved
    tp: int
    fp: int
    fn: int
    ids: int
    gt_count: int
    points: list[ThresholdPoint]


@dataclass
class EvalReport:
    per_class: dict[str, ClassResult]
    amota: float
    amotp: float
    tp: int
    fp: int
    fn: int
    ids: int


def match_frame(
    preds: list[PredBox], gts: list[GtBox], gate: float = MATCH_GATE
) -> FrameMatch:
    """Greedy one-to-one matching by ascending planar center distance."""
    if not preds or not gts:
        return FrameMatch([], list(range(len(preds))), list(range(len(gts))))
    p = np.array([[b.x, b.y] for b in preds])
    g = np.array([[b.x, b.y] for b in gts])
    dists = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=2)
    pairs = greedy_pairs(dists, gate=gate)
    matched_p = {i for i, _ in pairs}
    matched_g = {j for _, j in pairs}
    return FrameMatch(
        pairs=[(i, j, float(dists[i, j])) for i, j in pairs],
        unmatched_preds=[i for i in range(len(preds)) if i not in matched_p],
        unmatched_gts=[j for j in range(len(gts)) if j not in matched_g],
    )


def motar(ids: int, fp: int, fn: int, recall: float, gt_count: int) -> float:
    """Recall-normalized MOTA at one operating point.

    max(0, 1 - (IDS + FP + FN - (1 - r) * GT) / (r * GT)).
    """
    if gt_count <= 0:
        raise ValueError("gt_count must be positive; skip classes without GT")
    if not 0.0 < recall <= 1.0:
        raise ValueError(f"recall must be in (0, 1], got {recall}")
    return max(
        0.0, 1.0 - (ids + fp + fn - (1.0 - recall) * gt_count) / (recall * gt_count)
    )


def _scenes_in_order(frames: list[EvalFrame]) -> dict[int, list[EvalFrame]]:
    by_scene: dict[int, list[EvalFrame]] = {}
    for f in frames:
        by_scene.setdefault(f.scene, []).append(f)
    for fs in by_scene.values():
        fs.sort(key=lambda f: f.frame)
    return by_scene


@dataclass
class _Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    dist_sum: float = 0.0
    tp_scores: list[float] = field(default_factory=list)


def _evaluate_at(by_scene: dict[int, list[EvalFrame]], threshold: float) -> _Counts:
    """CLEAR counts with predictions filtered to score >= threshold.

    An identity switch is counted when a GT identity's matched predicted ID
    differs from its most recent matched ID (gaps allowed).
    """
    c = _Counts()
    for frames in by_scene.values():
        last_id: dict[int, int] = {}
        for f in frames:
            kept = [p for p in f.preds if p.score >= threshold]
            m = match_frame(kept, f.gts)
            c.tp += len(m.pairs)
            c.fp += len(m.unmatched_preds)
            c.fn += len(m.unmatched_gts)
            for pi, gi, d in m.pairs:
                c.dist_sum += d
                c.tp_scores.append(kept[pi].score)
                gid = f.gts[gi].gt_id
                tid = kept[pi].track_id
                if gid in last_id and last_id[gid] != tid:
                    c.ids += 1
                last_id[gid] = tid
    return c


def amota_amotp(
    frames: list[EvalFrame], n: int = DEFAULT_RECALL_STEPS
) -> ClassResult:
    """Recall sweep over n-1 evenly spaced targets {1/(n-1), ..., 1}."""
    if n < 2:
        raise ValueError(f"need at least 2 recall steps, got {n}")
    gt_count = sum(len(f.gts) for f in frames)
    if gt_count == 0:
        raise ValueError("no ground truth; class must be skipped")
    by_scene = _scenes_in_order(frames)

    base = _evaluate_at(by_scene, -math.inf)
    tp_scores = sorted(base.tp_scores, reverse=True)

    points: list[ThresholdPoint] = []
    cache: dict[float, _Counts] = {}
    for i in range(1, n):
        r = i / (n - 1)
        need = math.ceil(r * gt_count)
        if need > len(tp_scores):
            points.append(
                ThresholdPoint(r, None, 0.0, 0.0, math.nan, 0, 0, gt_count, 0)
            )
            continue
        threshold = tp_scores[need - 1]
        if threshold not in cache:
            cache[threshold] = _evaluate_at(by_scene, threshold)
        c = cache[threshold]
        achieved = c.tp / gt_count
        # At the achieved recall r = tp/GT the FN mass cancels identically
        # (fn == GT - tp by construction), so the recall-normalized formula
        # reduces to the integer-exact max(0, 1 - (ids+fp)/tp). Evaluating it
        # this way keeps perfect runs at exactly 1.0 instead of 1 +- 1 ulp.
        value = max(0.0, 1.0 - (c.ids + c.fp) / c.tp) if c.tp > 0 else 0.0
        motp = c.dist_sum / c.tp if c.tp else math.nan
        points.append(
            ThresholdPoint(r, threshold, achieved, value, motp, c.tp, c.fp, c.fn, c.ids)
        )

    amota = sum(p.motar for p in points) / len(points)
    achieved_points = [p for p in points if p.threshold is not None and p.tp > 0]
    amotp = (
        sum(p.motp for p in achieved_points) / len(achieved_points)
        if achieved_points
        else math.nan
    )

    if achieved_points:
        best = max(achieved_points, key=lambda p: (p.motar, p.achieved_recall))
        counts = (best.tp, best.fp, best.fn, best.ids)
    else:
        counts = (base.tp, base.fp, base.fn, base.ids)

    return ClassResult(
        amota=amota,
        amotp=amotp,
        tp=counts[0],
        fp=counts[1],
        fn=counts[2],
        ids=counts[3],
        gt_count=gt_count,
        points=points,
    )


def evaluate(
    frames_by_class: dict[str, list[EvalFrame]], n: int = DEFAULT_RECALL_STEPS
) -> EvalReport:
    """Per-class sweep plus the unweighted cross-class aggregate.

    Classes without ground truth are skipped entirely.
    """
    per_class: dict[str, ClassResult] = {}
    for name, frames in sorted(frames_by_class.items()):
        if sum(len(f.gts) for f in frames) == 0:
            continue
        per_class[name] = amota_amotp(frames, n=n)
    if not per_class:
        raise ValueError("no class has ground truth")
    results = list(per_class.values())
    amotps = [r.amotp for r in results if not math.isnan(r.amotp)]
    return EvalReport(
        per_class=per_class,
        amota=sum(r.amota for r in results) / len(results),
        amotp=sum(amotps) / len(amotps) if amotps else math.nan,
        tp=sum(r.tp for r in results),
        fp=sum(r.fp for r in results),
        fn=sum(r.fn for r in results),
        ids=sum(r.ids for r in results),
    )
