"""Domain types, per-class configuration, and detection padding shared by all modules."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# Tracking classes, indexed alphabetically.
CLASS_NAMES = ("bicycle", "bus", "car", "motorcycle", "pedestrian", "trailer", "truck")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

# Per-class blend weight for confidence refinement; 0.5 everywhere except the
# classes whose detectors systematically skew low (bicycle, trailer) or high (bus).
DEFAULT_BETA2 = {
    "bicycle": 0.4,
    "bus": 0.7,
    "car": 0.5,
    "motorcycle": 0.5,
    "pedestrian": 0.5,
    "trailer": 0.4,
    "truck": 0.5,
}


def normalize_yaw(angle: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi].

    Raises:
        ValueError: if the input is NaN or infinite.
    """
    if not math.isfinite(angle):
        raise ValueError(f"yaw must be finite, got {angle!r}")
    wrapped = math.fmod(angle, TWO_PI)
    if wrapped > math.pi:
        wrapped -= TWO_PI
    elif wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass
class BoundingBox3D:
    """7-DoF box (center, dims, yaw) plus planar velocity and detector confidence.

    Yaw is normalized to (-pi, pi] on construction. Real boxes must have
    strictly positive dimensions; confidence lives in [0, 1].
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    r_y: float
    vx: float = 0.0
    vy: float = 0.0
    confidence: float = 1.0
    class_id: int = CLASS_IDS["car"]

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "w", "l", "h", "vx", "vy", "confidence"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box field {name} must be finite, got {v!r}")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(
                f"box dimensions must be positive, got w={self.w} l={self.l} h={self.h}"
            )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        self.r_y = normalize_yaw(self.r_y)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def to_row(self) -> np.ndarray:
        """The (x, y, z, w, l, h, r_y) row used by padded arrays."""
        return np.array(
            [self.x, self.y, self.z, self.w, self.l, self.h, self.r_y],
            dtype=np.float64,
        )


@dataclass
class DetectionFrame:
    """One frame of detector output: timestamp, boxes, and (optionally) a BEV grid."""

    timestamp: float
    boxes: list[BoundingBox3D]
    bev_grid: "object | None" = None  # residuals.BevGrid; optional at inference


@dataclass
class PaddedDetections:
    """Fixed-size view of a frame: n_max slots, real boxes first, zero padding after.

    Padded slots are exactly zero in every array so masked math can assert on them.
    """

    boxes: np.ndarray  # (n_max, 7)
    velocities: np.ndarray  # (n_max, 2)
    confidences: np.ndarray  # (n_max,)
    valid_mask: np.ndarray  # (n_max,) bool
    source_indices: dict[int, int]  # padded slot -> original detection index

    @property
    def n_max(self) -> int:
        return self.boxes.shape[0]

    @property
    def count(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(frozen=True)
class ClassConfig:
    """Per-class tracker configuration.

    ``n_max`` caps the detections considered per frame (20..90 covers the
    production classes; tests may go smaller). ``beta1`` must not exceed
    ``tau_fp`` so the refinement indicator fires before elimination does.
    """

    n_max: int = 20
    tau_fp: float = 0.7
    tau_fn: float = 0.5
    tau_nb: float = 0.5
    tau_dt: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.5
    max_match_dist: float = 7.0

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        for name in ("tau_fp", "tau_fn", "tau_nb", "tau_dt", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.beta1 > self.tau_fp:
            raise ValueError(
                f"beta1 ({self.beta1}) must not exceed tau_fp ({self.tau_fp})"
            )
        if self.max_match_dist <= 0:
            raise ValueError(f"max_match_dist must be positive, got {self.max_match_dist}")


def default_class_config(class_name: str = "car", n_max: int = 20) -> ClassConfig:
    """Cross-validated thresholds shared by all classes, with per-class beta2."""
    if class_name not in CLASS_IDS:
        raise ValueError(f"unknown class {class_name!r}")
    return ClassConfig(n_max=n_max, beta2=DEFAULT_BETA2[class_name])


class TrackStatus(enum.Enum):
    ACTIVE = "active"
    PROPAGATED = "propagated"
    DEAD = "dead"


@dataclass
class TrackState:
    """One live track: identity, latest box, refined confidence, and lifecycle bits."""

    track_id: int
    box: BoundingBox3D
    c_trk: float
    age: int = 0
    status: TrackStatus = TrackStatus.ACTIVE
    class_id: int = CLASS_IDS["car"]
    # Frames since the last real-detection match; pseudo-detections do not reset it.
    misses: int = 0
    shape_descriptor: np.ndarray = field(default_factory=lambda: np.zeros(0))


def pad_or_sample(frame: DetectionFrame, cfg: ClassConfig) -> PaddedDetections:
    """Lay a frame out into n_max slots.

    At or under capacity the real boxes keep their original order followed by
    zero padding. Over capacity, the n_max highest-confidence boxes are kept
    (ties broken by original index ascending) and re-emitted in original order.
    """
    n_max = cfg.n_max
    boxes = np.zeros((n_max, 7), dtype=np.float64)
    velocities = np.zeros((n_max, 2), dtype=np.float64)
    confidences = np.zeros(n_max, dtype=np.float64)
    valid = np.zeros(n_max, dtype=bool)

    if len(frame.boxes) <= n_max:
        keep = list(range(len(frame.boxes)))
    else:
        order = sorted(
            range(len(frame.boxes)),
            key=lambda i: (-frame.boxes[i].confidence, i),
        )
        keep = sorted(order[:n_max])

    source_indices: dict[int, int] = {}
    for slot, idx in enumerate(keep):
        box = frame.boxes[idx]
        boxes[slot] = box.to_row()
        velocities[slot] = (box.vx, box.vy)
        confidences[slot] = box.confidence
        valid[slot] = True
        source_indices[slot] = idx

    return PaddedDetections(boxes, velocities, confidences, valid, source_indices)


def greedy_pairs(dists: np.ndarray, gate: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching on a distance matrix.

    Candidate (i, j) pairs with ``dists[i, j] <= gate`` are visited in
    ascending distance order (ties by i, then j) and accepted whenever both
    sides are still unmatched. NaN entries are ignored.
    """
    if dists.size == 0:
        return []
    ii, jj = np.nonzero(dists <= gate)
    if ii.size == 0:
        return []
    dd = dists[ii, jj]
    order = np.lexsort((jj, ii, dd))
    matched_i: set[int] = set()
    matched_j: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in matched_i or j in matched_j:
            continue
        matched_i.add(i)
        matched_j.add(j)
        pairs.append((i, j))
    return pairs
