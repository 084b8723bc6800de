"""Deterministic scenario generation: ground-truth trajectories, corrupted
detections, and a bird's-eye-view shape field standing in for a learned
point-cloud backbone.

Scenes are pure functions of (config, scene_index): every draw flows from
``numpy.random.default_rng([seed, scene_index])`` (plus a tagged per-frame
stream for rendering), so datasets regenerate bit-identically anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CLASS_IDS, BoundingBox3D, DetectionFrame, normalize_yaw
from .residuals import BevGrid

# Objects spawn at least this far apart, and clear of recent deaths, so that
# distance-gated matching stays unambiguous on clean data.
SPAWN_SEPARATION = 8.0
SPAWN_MARGIN = 2.0
# A dead object's last position keeps repelling spawns for this many frames,
# covering coasting tracks that have not aged out yet.
GUARD_FRAMES = 4
MAX_SPAWN_TRIES = 200
# Tag separating per-frame render streams from the trajectory stream.
RENDER_STREAM_TAG = 7
CONF_FLOOR = 0.01
CLUTTER_VEL_SIGMA = 1.0
# Car-like dimension priors (meters); clutter draws from the same priors so
# geometry alone cannot separate true and false detections.
WIDTH_RANGE = (1.7, 2.1)
LENGTH_RANGE = (4.0, 5.0)
HEIGHT_RANGE = (1.4, 1.8)


@dataclass(frozen=True)
class SimConfig:
    """Scenario generator parameters. Frozen: a config plus a scene index is
    the complete recipe for a scene."""

    seed: int = 0
    num_scenes: int = 1
    frames_per_scene: int = 40
    frame_rate: float = 2.0
    arena_size: float = 50.0
    objects_min: int = 3
    objects_max: int = 8
    speed_min: float = 0.5
    speed_max: float = 6.0
    turn_rate_max: float = 0.15
    birth_window: int = 0
    death_window: int = 0
    sigma_pos: float = 0.0
    sigma_dim: float = 0.0
    sigma_yaw: float = 0.0
    sigma_vel: float = 0.0
    fp_rate: float = 0.0
    fn_rate: float = 0.0
    occlusion: bool = False
    occlusion_factor: float = 4.0
    tp_conf_mean: float = 0.85
    tp_conf_sigma: float = 0.08
    fp_conf_mean: float = 0.65
    fp_conf_sigma: float = 0.15
    channels: int = 4
    cell_size: float = 1.0
    latent_scale: float = 1.0
    cell_noise: float = 0.05
    background_noise: float = 0.3
    class_name: str = "car"

    def __post_init__(self) -> None:
        if self.frames_per_scene < 2:
            raise ValueError(f"frames_per_scene must be >= 2, got {self.frames_per_scene}")
        if self.num_scenes < 1:
            raise ValueError(f"num_scenes must be >= 1, got {self.num_scenes}")
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        if self.arena_size <= 2 * SPAWN_MARGIN:
            raise ValueError(f"arena_size must exceed {2 * SPAWN_MARGIN}, got {self.arena_size}")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError(
                f"need 1 <= objects_min <= objects_max, got ({self.objects_min}, {self.objects_max})"
            )
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError(f"bad speed range ({self.speed_min}, {self.speed_max})")
        if self.turn_rate_max < 0:
            raise ValueError(f"turn_rate_max must be >= 0, got {self.turn_rate_max}")
        if self.birth_window < 0 or self.death_window < 0:
            raise ValueError("birth/death windows must be >= 0")
        if self.birth_window + self.death_window > self.frames_per_scene - 2:
            raise ValueError("birth/death windows leave no guaranteed lifetime")
        for name in ("sigma_pos", "sigma_dim", "sigma_yaw", "sigma_vel", "tp_conf_sigma",
                     "fp_conf_sigma", "cell_noise", "background_noise", "occlusion_factor",
                     "latent_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("fp_rate", "fn_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.class_name not in CLASS_IDS:
            raise ValueError(f"unknown class {self.class_name!r}")

    @property
    def delta_t(self) -> float:
        return 1.0 / self.frame_rate


@dataclass
class GroundTruthTrack:
    """One simulated object: exact per-frame boxes plus a latent shape vector
    that stays constant over the object's life."""

    gt_id: int
    first_frame: int
    boxes: list[BoundingBox3D]
    latent: np.ndarray

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.boxes) - 1

    def alive_at(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def box_at(self, frame: int) -> BoundingBox3D:
        if not self.alive_at(frame):
            raise KeyError(f"track {self.gt_id} not alive at frame {frame}")
        return self.boxes[frame - self.first_frame]


@dataclass
class Scene:
    """One generated scene: exact tracks, corrupted detections, timestamps."""

    index: int
    timestamps: list[float]
    tracks: list[GroundTruthTrack]
    frames: list[DetectionFrame]
    gt_by_frame: list[list[tuple[int, BoundingBox3D]]] = field(default_factory=list)

    def gt_by_timestamp(self) -> dict[float, list[tuple[int, BoundingBox3D]]]:
        return dict(zip(self.timestamps, self.gt_by_frame))


def _heading_axes(heading: float) -> tuple[np.ndarray, np.ndarray]:
    """Long/lateral unit axes for a heading; matches descriptor sampling:
    the box faces +l/2 along (-sin h, cos h)."""
    u_long = np.array([-np.sin(heading), np.cos(heading)])
    u_lat = np.array([-np.cos(heading), -np.sin(heading)])
    return u_long, u_lat


def _footprint_corners(box: BoundingBox3D) -> np.ndarray:
    u_long, u_lat = _heading_axes(box.r_y)
    c = np.array([box.x, box.y])
    hl, hw = 0.5 * box.l, 0.5 * box.w
    return np.array(
        [c + sl * hl * u_long + sw * hw * u_lat for sl, sw in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
    )


def _rects_overlap(a: BoundingBox3D, b: BoundingBox3D) -> bool:
    """Separating-axis test on the two BEV rectangles."""
    ca, cb = _footprint_corners(a), _footprint_corners(b)
    for box in (a, b):
        for axis in _heading_axes(box.r_y):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _overlap_flags(boxes: list[BoundingBox3D]) -> list[bool]:
    flags = [False] * len(boxes)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _rects_overlap(boxes[i], boxes[j]):
                flags[i] = flags[j] = True
    return flags


def _guard_points(tracks: list[GroundTruthTrack], frame: int) -> list[np.ndarray]:
    """Positions a new spawn at `frame` must keep clear of: live objects now,
    and last positions of objects dead within the guard window."""
    points = []
    for tr in tracks:
        if tr.alive_at(frame):
            b = tr.box_at(frame)
            points.append(np.array([b.x, b.y]))
        elif tr.last_frame < frame <= tr.last_frame + GUARD_FRAMES:
            b = tr.boxes[-1]
            points.append(np.array([b.x, b.y]))
    return points


def _spawn_position(
    rng: np.random.Generator, cfg: SimConfig, placed: list[GroundTruthTrack], frame: int
) -> np.ndarray:
    lo, hi = SPAWN_MARGIN, cfg.arena_size - SPAWN_MARGIN
    guards = _guard_points(placed, frame)
    for _ in range(MAX_SPAWN_TRIES):
        p = rng.uniform(lo, hi, size=2)
        if all(float(np.hypot(*(p - q))) >= SPAWN_SEPARATION for q in guards):
            return p
    raise ValueError(
        "could not place an object with the required spawn separation; "
        "reduce object count or enlarge the arena"
    )


def generate_scene(cfg: SimConfig, scene_index: int, with_bev: bool = True) -> Scene:
    """Build scene `scene_index`: kinematics, latents, detections, BEV grids.

    Draw order is part of the dataset contract: schedules, then per-object
    trajectories in birth order, then per-frame detections.
    """
    if scene_index < 0:
        raise ValueError(f"scene_index must be >= 0, got {scene_index}")
    rng = np.random.default_rng([cfg.seed, scene_index])
    dt = cfg.delta_t
    n_frames = cfg.frames_per_scene
    class_id = CLASS_IDS[cfg.class_name]

    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    births = rng.integers(0, cfg.birth_window + 1, size=n_obj)
    deaths = n_frames - rng.integers(0, cfg.death_window + 1, size=n_obj)
    # Place in birth order so each spawn can check every earlier trajectory.
    order = np.argsort(births, kind="stable")

    lo, hi = SPAWN_MARGIN, cfg.arena_size - SPAWN_MARGIN
    tracks: list[GroundTruthTrack] = []
    for gt_id, obj in enumerate(order):
        birth, death = int(births[obj]), int(deaths[obj])
        speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        heading = float(rng.uniform(-np.pi, np.pi))
        turn = float(rng.uniform(-cfg.turn_rate_max, cfg.turn_rate_max))
        w = float(rng.uniform(*WIDTH_RANGE))
        length = float(rng.uniform(*LENGTH_RANGE))
        h = float(rng.uniform(*HEIGHT_RANGE))
        latent = rng.normal(0.0, cfg.latent_scale, size=cfg.channels)
        pos = _spawn_position(rng, cfg, tracks, birth)

        boxes = []
        for _ in range(birth, death):
            u_long, _ = _heading_axes(heading)
            vel = speed * u_long
            boxes.append(
                BoundingBox3D(
                    x=float(pos[0]), y=float(pos[1]), z=h / 2,
                    w=w, l=length, h=h, r_y=normalize_yaw(heading),
                    vx=float(vel[0]), vy=float(vel[1]),
                    confidence=1.0, class_id=class_id,
                )
            )
            nxt = pos + vel * dt
            if not lo <= nxt[0] <= hi:
                heading = -heading
            if not lo <= nxt[1] <= hi:
                heading = float(np.pi) - heading
            u_long, _ = _heading_axes(heading)
            pos = np.clip(pos + speed * u_long * dt, lo, hi)
            heading += turn * dt
        tracks.append(GroundTruthTrack(gt_id, birth, boxes, latent))

    gt_by_frame: list[list[tuple[int, BoundingBox3D]]] = []
    for k in range(n_frames):
        gt_by_frame.append([(tr.gt_id, tr.box_at(k)) for tr in tracks if tr.alive_at(k)])

    frames: list[DetectionFrame] = []
    timestamps = [k * dt for k in range(n_frames)]
    for k in range(n_frames):
        live = gt_by_frame[k]
        occluded = _overlap_flags([b for _, b in live])
        dets: list[BoundingBox3D] = []
        for (_, box), occ in zip(live, occluded):
            fn_eff = cfg.fn_rate * (cfg.occlusion_factor if (cfg.occlusion and occ) else 1.0)
            if rng.uniform() < min(1.0, fn_eff):
                continue
            pos_n = rng.normal(0.0, 1.0, size=3) * cfg.sigma_pos
            dim_n = np.exp(rng.normal(0.0, 1.0, size=3) * cfg.sigma_dim)
            yaw_n = float(rng.normal(0.0, 1.0)) * cfg.sigma_yaw
            vel_n = rng.normal(0.0, 1.0, size=2) * cfg.sigma_vel
            conf = float(np.clip(rng.normal(cfg.tp_conf_mean, cfg.tp_conf_sigma), CONF_FLOOR, 1.0))
            dets.append(
                BoundingBox3D(
                    x=box.x + pos_n[0], y=box.y + pos_n[1], z=box.z + pos_n[2],
                    w=box.w * dim_n[0], l=box.l * dim_n[1], h=box.h * dim_n[2],
                    r_y=normalize_yaw(box.r_y + yaw_n),
                    vx=box.vx + vel_n[0], vy=box.vy + vel_n[1],
                    confidence=conf, class_id=class_id,
                )
            )
        for _ in range(int(rng.poisson(cfg.fp_rate))):
            cx, cy = rng.uniform(lo, hi, size=2)
            yaw = float(rng.uniform(-np.pi, np.pi))
            w = float(rng.uniform(*WIDTH_RANGE))
            length = float(rng.uniform(*LENGTH_RANGE))
            h = float(rng.uniform(*HEIGHT_RANGE))
            vel = rng.normal(0.0, 1.0, size=2) * CLUTTER_VEL_SIGMA
            conf = float(np.clip(rng.normal(cfg.fp_conf_mean, cfg.fp_conf_sigma), CONF_FLOOR, 1.0))
            dets.append(
                BoundingBox3D(
                    x=float(cx), y=float(cy), z=h / 2, w=w, l=length, h=h,
                    r_y=normalize_yaw(yaw), vx=float(vel[0]), vy=float(vel[1]),
                    confidence=conf, class_id=class_id,
                )
            )
        by_conf = np.argsort([-d.confidence for d in dets], kind="stable")
        frames.append(DetectionFrame(timestamps[k], [dets[i] for i in by_conf]))

    scene = Scene(scene_index, timestamps, tracks, frames, gt_by_frame)
    if with_bev:
        for k, fr in enumerate(scene.frames):
            fr.bev_grid = render_bev(scene, k, cfg)
    return scene


def render_bev(scene: Scene, frame_index: int, cfg: SimConfig) -> BevGrid:
    """Shape-feature field for one frame.

    Cells under a ground-truth footprint carry that object's latent vector
    (overlaps average their latents) plus per-cell noise; background cells
    carry a zero-mean noise process with distinct statistics.
    """
    if not 0 <= frame_index < len(scene.timestamps):
        raise ValueError(f"frame_index {frame_index} out of range")
    side = int(round(cfg.arena_size / cfg.cell_size))
    rng = np.random.default_rng([cfg.seed, scene.index, RENDER_STREAM_TAG, frame_index])
    background = rng.normal(0.0, 1.0, size=(side, side, cfg.channels)) * cfg.background_noise
    cell_noise = rng.normal(0.0, 1.0, size=(side, side, cfg.channels)) * cfg.cell_noise

    origin = cfg.cell_size / 2.0
    coords = origin + cfg.cell_size * np.arange(side)
    cx = coords[None, :]  # world x varies along columns
    cy = coords[:, None]  # world y varies along rows

    lat_sum = np.zeros((side, side, cfg.channels))
    count = np.zeros((side, side))
    for tr in scene.tracks:
        if not tr.alive_at(frame_index):
            continue
        box = tr.box_at(frame_index)
        dx = cx - box.x
        dy = cy - box.y
        s_long = dx * -np.sin(box.r_y) + dy * np.cos(box.r_y)
        s_lat = dx * -np.cos(box.r_y) + dy * -np.sin(box.r_y)
        inside = (np.abs(s_long) <= box.l / 2) & (np.abs(s_lat) <= box.w / 2)
        lat_sum[inside] += tr.latent
        count[inside] += 1.0

    data = background
    occupied = count > 0
    data[occupied] = lat_sum[occupied] / count[occupied, None] + cell_noise[occupied]
    return BevGrid(data, cfg.cell_size, origin, origin)
