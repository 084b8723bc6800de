"""Online track formation driven by affinity matrices.

Each frame runs, in order: affinity estimation, false-positive elimination,
false-negative propagation (pseudo-detections), greedy center matching,
newborn gating, dead-track termination, and sequential confidence refinement.
A tracker with no affinity provider and all mechanisms disabled degrades to
the classic greedy baseline (every unmatched detection births a track, tracks
age out after ``max_age`` missed frames).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .affinity import (
    AffinityModel,
    AffinityOutput,
    FramePair,
    build_gt_affinity,
    extract_descriptors,
)
from .core import (
    BoundingBox3D,
    ClassConfig,
    DetectionFrame,
    PaddedDetections,
    TrackState,
    TrackStatus,
    greedy_pairs,
    pad_or_sample,
)
from .residuals import bilinear_sample, extract_shape_descriptor

# Affinity-driven lifecycle mechanisms; disabling all of them (plus
# refinement) yields the no-affinity greedy baseline.
ALL_MECHANISMS = frozenset({"fp", "fn", "nb", "dt"})

DEFAULT_MAX_AGE = 3


# -- per-frame classification -------------------------------------------------


def classify_tracks(a_fm: np.ndarray, cfg: ClassConfig) -> tuple[np.ndarray, np.ndarray]:
    """DT / FN flags per previous-frame row of the forward matching matrix.

    Row i is DT-flagged iff A_fm(i, DT) > tau_dt and FN-flagged iff
    A_fm(i, FN) > tau_fn (strict; flags are not mutually exclusive here).
    Padded rows are all-zero and never flag.
    """
    n = a_fm.shape[1] - 2
    dt_flags = a_fm[:, n] > cfg.tau_dt
    fn_flags = a_fm[:, n + 1] > cfg.tau_fn
    return dt_flags, fn_flags


def classify_detections(
    a_bm: np.ndarray, cfg: ClassConfig
) -> tuple[np.ndarray, np.ndarray]:
    """FP-elimination / NB flags per current-frame column of the backward
    matching matrix. Elimination (A_bm(FP, j) > tau_fp, strict) takes
    precedence over the NB flag."""
    n = a_bm.shape[0] - 2
    eliminated = a_bm[n + 1, :] > cfg.tau_fp
    nb_flags = (a_bm[n, :] > cfg.tau_nb) & ~eliminated
    return eliminated, nb_flags


def propagate_fn(track: TrackState, delta_t: float) -> BoundingBox3D:
    """Velocity-propagated pseudo-detection for a track judged to be a missed
    detection: the 2D center moves by v * delta_t, everything else (z, dims,
    yaw) is carried over, and the confidence is inherited from the track."""
    box = track.box
    if not (math.isfinite(box.vx) and math.isfinite(box.vy)):
        raise ValueError(f"track {track.track_id} has non-finite velocity")
    if not math.isfinite(delta_t):
        raise ValueError(f"delta_t must be finite, got {delta_t!r}")
    return replace(
        box,
        x=box.x + box.vx * delta_t,
        y=box.y + box.vy * delta_t,
        confidence=track.c_trk,
    )


def refine_confidence(
    c_trk_prev: float,
    c_det: float,
    p_fp: float,
    cfg: ClassConfig,
    is_newborn: bool = False,
) -> float:
    """Sequential track-confidence update.

    c_trk = 1[p_fp < beta1] * beta2 * c_det + (1 - beta2) * c_trk_prev,
    with the second term dropped for newborn tracks; clamped to [0, 1].
    """
    for name, v in (("c_trk_prev", c_trk_prev), ("c_det", c_det), ("p_fp", p_fp)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    indicator = 1.0 if p_fp < cfg.beta1 else 0.0
    c = indicator * cfg.beta2 * c_det
    if not is_newborn:
        c += (1.0 - cfg.beta2) * c_trk_prev
    return min(1.0, max(0.0, c))


def greedy_match(
    track_centers: np.ndarray, det_centers: np.ndarray, cfg: ClassConfig
) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of planar centers within max_match_dist.

    Candidate pairs sort ascending by distance, ties broken by (track index,
    detection index); accepted when both sides are still free.
    """
    t = np.asarray(track_centers, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(det_centers, dtype=np.float64).reshape(-1, 2)
    if t.shape[0] == 0 or d.shape[0] == 0:
        return []
    dists = np.linalg.norm(t[:, None, :] - d[None, :, :], axis=2)
    return greedy_pairs(dists, gate=cfg.max_match_dist)


# -- affinity providers -------------------------------------------------------


class LearnedAffinity:
    """Runs a trained affinity model on (current tracks, current detections)."""

    def __init__(self, model: AffinityModel):
        self.model = model

    @property
    def descriptor_dim(self) -> int:
        return self.model.cfg.descriptor_dim

    def descriptor(self, frame: DetectionFrame, box: BoundingBox3D) -> np.ndarray:
        grid = frame.bev_grid
        if grid is None:
            return np.zeros(self.descriptor_dim)
        if self.model.cfg.descriptor_mode == "center":
            return bilinear_sample(grid, box.x, box.y)
        return extract_shape_descriptor(grid, box)

    def affinity(
        self,
        prev: PaddedDetections,
        prev_desc: np.ndarray,
        cur: PaddedDetections,
        frame: DetectionFrame,
        prev_timestamp: float | None,
    ) -> AffinityOutput:
        cur_desc = extract_descriptors(frame.bev_grid, cur, self.model.cfg)
        out, _ = self.model.forward(FramePair(prev, cur, prev_desc, cur_desc))
        return out


class OracleAffinity:
    """Replays ground-truth affinity matrices as if they were predictions.

    Keyed by exact frame timestamps, so the annotations must come from the
    same source as the detection frames.
    """

    descriptor_dim = 0

    def __init__(
        self,
        gt_by_timestamp: dict[float, list[tuple[int, BoundingBox3D]]],
        class_cfg: ClassConfig,
    ):
        self.gt_by_timestamp = gt_by_timestamp
        self.class_cfg = class_cfg

    def descriptor(self, frame: DetectionFrame, box: BoundingBox3D) -> np.ndarray:
        return np.zeros(0)

    def affinity(
        self,
        prev: PaddedDetections,
        prev_desc: np.ndarray,
        cur: PaddedDetections,
        frame: DetectionFrame,
        prev_timestamp: float | None,
    ) -> AffinityOutput:
        gt_prev = self.gt_by_timestamp.get(prev_timestamp, []) if prev_timestamp is not None else []
        gt_cur = self.gt_by_timestamp.get(frame.timestamp, [])
        a = build_gt_affinity(prev, cur, gt_prev, gt_cur, self.class_cfg)
        n = prev.n_max
        pv = np.concatenate([prev.valid_mask, [True, True]])
        cv = np.concatenate([cur.valid_mask, [True, True]])
        return AffinityOutput(
            A=a,
            A_fm=a[:n, :],
            A_bm=a[:, :n],
            fm_mask=prev.valid_mask[:, None] & cv[None, :],
            bm_mask=pv[:, None] & cur.valid_mask[None, :],
        )


# -- per-frame decision record ------------------------------------------------


@dataclass
class FrameDecision:
    """Everything the tracker decided about one frame, for inspection/tests.

    Detection entries align with the input frame's box order; track entries
    are keyed by track id. A detection is matched to at most one track and
    vice versa, and eliminated detections are never matched.
    """

    det_labels: list[str] = field(default_factory=list)  # kept | eliminated_fp | newborn_candidate
    det_probs: list[tuple[float, float]] = field(default_factory=list)  # (P_NB, P_FP)
    track_labels: dict[int, str] = field(default_factory=dict)  # kept | dt_candidate | fn_propagated
    track_probs: dict[int, tuple[float, float]] = field(default_factory=dict)  # (P_DT, P_FN)
    matches: list[tuple[int, int]] = field(default_factory=list)  # (track_id, det index)
    fn_matches: list[int] = field(default_factory=list)  # track ids matched to pseudo-detections
    born: list[int] = field(default_factory=list)
    terminated: list[int] = field(default_factory=list)


@dataclass
class StepResult:
    decision: FrameDecision
    emitted: list[TrackState]  # snapshots of tracks with box evidence this frame


# -- the tracker --------------------------------------------------------------


class Tracker:
    """Per-scene, single-class online tracker.

    ``provider`` supplies affinity matrices (learned model or ground-truth
    oracle); with ``provider=None`` no affinity information exists, so only
    mechanism-free behavior remains. ``mechanisms`` toggles the four
    affinity-driven lifecycle rules for ablations.
    """

    def __init__(
        self,
        class_cfg: ClassConfig,
        provider=None,
        mechanisms: frozenset = ALL_MECHANISMS,
        refine: bool = True,
        max_age: int = DEFAULT_MAX_AGE,
    ):
        unknown = set(mechanisms) - ALL_MECHANISMS
        if unknown:
            raise ValueError(f"unknown mechanisms {sorted(unknown)}")
        if max_age < 0:
            raise ValueError(f"max_age must be >= 0, got {max_age}")
        self.cfg = class_cfg
        self.provider = provider
        self.mechanisms = frozenset(mechanisms)
        self.refine = refine
        self.max_age = max_age
        self.tracks: list[TrackState] = []
        self.next_track_id = 1
        self.prev_timestamp: float | None = None

    # Tracks enter the affinity matrix as the "previous frame" side, padded
    # exactly like detections; slot -> track index comes back via
    # source_indices so flags survive over-capacity sampling.
    def _pad_tracks(self) -> PaddedDetections:
        frame = DetectionFrame(
            timestamp=self.prev_timestamp or 0.0,
            boxes=[t.box for t in self.tracks],
        )
        return pad_or_sample(frame, self.cfg)

    def _prev_descriptors(self, dim: int, padded: PaddedDetections) -> np.ndarray:
        out = np.zeros((padded.n_max, dim))
        for slot, track_idx in padded.source_indices.items():
            desc = self.tracks[track_idx].shape_descriptor
            if desc.shape == (dim,):
                out[slot] = desc
        return out

    def step(self, frame: DetectionFrame) -> StepResult:
        cfg = self.cfg
        dets = list(frame.boxes)
        if self.prev_timestamp is not None and frame.timestamp <= self.prev_timestamp:
            raise ValueError(
                f"timestamps must increase: {frame.timestamp} after {self.prev_timestamp}"
            )
        delta_t = (
            frame.timestamp - self.prev_timestamp
            if self.prev_timestamp is not None
            else 0.0
        )
        decision = FrameDecision(
            det_labels=["kept"] * len(dets),
            det_probs=[(0.0, 0.0)] * len(dets),
            track_labels={t.track_id: "kept" for t in self.tracks},
            track_probs={t.track_id: (0.0, 0.0) for t in self.tracks},
        )

        # (1) affinity on (tracks as previous side, current detections).
        cur_padded = pad_or_sample(frame, cfg)
        det_to_slot = {orig: slot for slot, orig in cur_padded.source_indices.items()}
        prev_padded = self._pad_tracks()
        out = None
        if self.provider is not None:
            prev_desc = self._prev_descriptors(self.provider.descriptor_dim, prev_padded)
            out = self.provider.affinity(
                prev_padded, prev_desc, cur_padded, frame, self.prev_timestamp
            )

        # (2) classify detections: eliminate FPs, flag NB candidates.
        eliminated = np.zeros(len(dets), dtype=bool)
        nb_flagged = np.zeros(len(dets), dtype=bool)
        if out is not None:
            slot_elim, slot_nb = classify_detections(out.A_bm, cfg)
            for slot, orig in cur_padded.source_indices.items():
                decision.det_probs[orig] = out.detection_anchor_probs(slot)
                if "fp" in self.mechanisms and slot_elim[slot]:
                    eliminated[orig] = True
                    decision.det_labels[orig] = "eliminated_fp"
                elif slot_nb[slot]:
                    nb_flagged[orig] = True
                    decision.det_labels[orig] = "newborn_candidate"

        # (3) classify tracks: DT candidates and FN propagation.
        dt_flags = np.zeros(len(self.tracks), dtype=bool)
        fn_flags = np.zeros(len(self.tracks), dtype=bool)
        if out is not None:
            slot_dt, slot_fn = classify_tracks(out.A_fm, cfg)
            for slot, track_idx in prev_padded.source_indices.items():
                tid = self.tracks[track_idx].track_id
                decision.track_probs[tid] = out.track_anchor_probs(slot)
                if "fn" in self.mechanisms and slot_fn[slot]:
                    fn_flags[track_idx] = True
                    decision.track_labels[tid] = "fn_propagated"
                elif "dt" in self.mechanisms and slot_dt[slot]:
                    dt_flags[track_idx] = True
                    decision.track_labels[tid] = "dt_candidate"

        pseudo_sources = [i for i in range(len(self.tracks)) if fn_flags[i]]
        pseudo_boxes = [propagate_fn(self.tracks[i], delta_t) for i in pseudo_sources]

        # (4) greedy matching over surviving real detections plus
        # pseudo-detections, against velocity-propagated track centers.
        real_pool = [j for j in range(len(dets)) if not eliminated[j]]
        queries = np.array(
            [
                [t.box.x + t.box.vx * delta_t, t.box.y + t.box.vy * delta_t]
                for t in self.tracks
            ]
        ).reshape(-1, 2)
        pool_xy = np.array(
            [[dets[j].x, dets[j].y] for j in real_pool]
            + [[b.x, b.y] for b in pseudo_boxes]
        ).reshape(-1, 2)
        pairs = greedy_match(queries, pool_xy, cfg)

        matched_tracks: dict[int, tuple[str, int]] = {}  # track idx -> (kind, pool idx)
        matched_dets: set[int] = set()
        for ti, pj in pairs:
            if pj < len(real_pool):
                matched_tracks[ti] = ("real", real_pool[pj])
                matched_dets.add(real_pool[pj])
            else:
                matched_tracks[ti] = ("pseudo", pj - len(real_pool))

        emitted: list[TrackState] = []
        dead: set[int] = set()

        # (5..7) update matched tracks, decide unmatched tracks.
        for i, track in enumerate(self.tracks):
            kind = matched_tracks.get(i)
            if kind is None:
                far = (
                    pool_xy.shape[0] == 0
                    or np.linalg.norm(pool_xy - queries[i], axis=1).min()
                    > cfg.max_match_dist
                )
                if dt_flags[i] and far:
                    track.status = TrackStatus.DEAD
                    dead.add(i)
                    decision.terminated.append(track.track_id)
                    continue
                track.misses += 1
                if track.misses > self.max_age:
                    track.status = TrackStatus.DEAD
                    dead.add(i)
                    decision.terminated.append(track.track_id)
                    continue
                # Coast silently: advance the center, emit nothing.
                track.box = replace(
                    track.box,
                    x=track.box.x + track.box.vx * delta_t,
                    y=track.box.y + track.box.vy * delta_t,
                )
                track.status = TrackStatus.PROPAGATED
                track.age += 1
                continue

            if kind[0] == "real":
                det = dets[kind[1]]
                old = track.box
                if delta_t > 0:
                    vx = (det.x - old.x) / delta_t
                    vy = (det.y - old.y) / delta_t
                else:
                    vx, vy = det.vx, det.vy
                _, p_fp = decision.det_probs[kind[1]]
                if self.refine:
                    track.c_trk = refine_confidence(
                        track.c_trk, det.confidence, p_fp, cfg
                    )
                else:
                    track.c_trk = det.confidence
                track.box = replace(det, vx=vx, vy=vy, confidence=track.c_trk)
                track.status = TrackStatus.ACTIVE
                track.misses = 0
                track.age += 1
                if self.provider is not None:
                    track.shape_descriptor = self.provider.descriptor(frame, det)
                decision.matches.append((track.track_id, kind[1]))
                emitted.append(self._snapshot(track))
            else:
                # Matched a pseudo-detection: propagated box, inherited
                # confidence (refinement resumes on the next real match). A
                # pseudo match is still a match, so the consecutive-unmatched
                # horizon does not advance: sustained FN flags carry a track
                # through arbitrarily long detector gaps. The track is not
                # emitted (only active tracks are), so a wrongly sustained
                # track coasts without polluting the output.
                track.box = replace(pseudo_boxes[kind[1]], confidence=track.c_trk)
                track.status = TrackStatus.PROPAGATED
                track.misses = 0
                track.age += 1
                decision.fn_matches.append(track.track_id)

        # (5) births: unmatched surviving detections.
        newborns: list[TrackState] = []
        for j in real_pool:
            if j in matched_dets:
                continue
            if "nb" in self.mechanisms:
                far = (
                    queries.shape[0] == 0
                    or np.linalg.norm(queries - [[dets[j].x, dets[j].y]], axis=1).min()
                    > cfg.max_match_dist
                )
                if not (nb_flagged[j] and far):
                    continue
            det = dets[j]
            _, p_fp = decision.det_probs[j]
            c0 = (
                refine_confidence(0.0, det.confidence, p_fp, cfg, is_newborn=True)
                if self.refine
                else det.confidence
            )
            desc = (
                self.provider.descriptor(frame, det)
                if self.provider is not None
                else np.zeros(0)
            )
            track = TrackState(
                track_id=self.next_track_id,
                box=replace(det, confidence=c0),
                c_trk=c0,
                age=0,
                status=TrackStatus.ACTIVE,
                class_id=det.class_id,
                misses=0,
                shape_descriptor=desc,
            )
            self.next_track_id += 1
            newborns.append(track)
            decision.born.append(track.track_id)
            emitted.append(self._snapshot(track))

        self.tracks = [t for i, t in enumerate(self.tracks) if i not in dead]
        self.tracks.extend(newborns)
        self.prev_timestamp = frame.timestamp
        return StepResult(decision=decision, emitted=emitted)

    @staticmethod
    def _snapshot(track: TrackState) -> TrackState:
        return replace(
            track,
            box=replace(track.box),
            shape_descriptor=np.array(track.shape_descriptor, copy=True),
        )


def run_scene(
    tracker: Tracker, frames: list[DetectionFrame]
) -> list[list[TrackState]]:
    """Track a whole scene; returns emitted track snapshots per frame."""
    return [tracker.step(f).emitted for f in frames]
