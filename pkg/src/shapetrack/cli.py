"""Command-line pipeline: simulate | train | track | eval | gradcheck.

File formats:
- Scene files are line-delimited JSON, one record per line. A scene header
  line carries frame count, frame rate, and the relative path of the scene's
  BEV binary. Detection records hold {scene, frame, t, class, x, y, z, w, l,
  h, ry, vx, vy, conf}; ground-truth records add gt_id; track records add
  track_id and c_trk.
- BEV binaries hold one block per frame: a 24-byte little-endian header
  (magic, H, W, F as uint32; cell_size, origin as float32) followed by
  row-major float32 cell data.
- Config files are flat key=value text with a mandatory ``version`` key;
  unknown keys are errors.
- Every output directory is self-describing via manifest.json, and a
  lockfile serializes writers per directory.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 I/O
failure. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import math
import struct
import sys
import time
import types
from dataclasses import dataclass, replace
from pathlib import Path
from typing import get_type_hints

import numpy as np
from filelock import FileLock, Timeout

from . import __version__, nn
from .affinity import (
    AffinityModel,
    FramePair,
    ModelConfig,
    TrainConfig,
    TrainingPair,
    build_gt_affinity,
    load_checkpoint,
    make_frame_pair,
    save_checkpoint,
    train,
)
from .core import (
    CLASS_IDS,
    CLASS_NAMES,
    BoundingBox3D,
    ClassConfig,
    DetectionFrame,
    TrackState,
    default_class_config,
)
from .metrics import EvalFrame, GtBox, PredBox, evaluate
from .residuals import BevGrid
from .sim import SimConfig, generate_scene
from .tracker import ALL_MECHANISMS, LearnedAffinity, OracleAffinity, Tracker

BEV_MAGIC = 0x42455631
CONFIG_VERSION = "1"
LOCK_TIMEOUT_S = 600.0
GRADCHECK_TOLERANCE = 1e-4
# Width is reduced so the finite-difference sweep of the full 12-network
# model finishes quickly; the architecture (network set, descriptor size,
# detection count) is unchanged.
GRADCHECK_HIDDEN = 8
GRADCHECK_WIDE_HIDDEN = 8
# Default chosen so the check runs at a generic point: no gradient entry
# sits in the range where central-difference roundoff dominates.
DEFAULT_GRADCHECK_SEED = 9


class UsageError(Exception):
    """Bad flags, bad config, inconsistent inputs (exit code 1)."""


class NumericalError(Exception):
    """NaN losses or failed derivative checks (exit code 2)."""


# -- key=value configs ---------------------------------------------------------


def _parse_kv_text(text: str, what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{what}: line {ln} is not key=value: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{what}: empty key on line {ln}")
        if key in out:
            raise UsageError(f"{what}: duplicate key {key!r} on line {ln}")
        out[key] = value
    return out


def _coerce(key: str, raw: str, target: type, what: str):
    if isinstance(target, types.UnionType):
        members = [t for t in target.__args__ if t is not type(None)]
        if raw.lower() == "none":
            return None
        target = members[0]
    try:
        if target is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        if target is str:
            return raw
    except ValueError:
        raise UsageError(f"{what}: key {key!r} expects {target.__name__}, got {raw!r}")
    raise UsageError(f"{what}: key {key!r} has unsupported type")


def parse_config(text: str, schema: dict[str, type], what: str) -> dict:
    """Flat key=value text -> typed dict. The version key is mandatory and
    unknown keys fail fast."""
    kv = _parse_kv_text(text, what)
    if kv.pop("version", None) != CONFIG_VERSION:
        raise UsageError(f"{what}: missing or unsupported version key (need version={CONFIG_VERSION})")
    out = {}
    for key, raw in kv.items():
        if key not in schema:
            raise UsageError(f"{what}: unknown key {key!r}")
        out[key] = _coerce(key, raw, schema[key], what)
    return out


SIM_SCHEMA = dict(get_type_hints(SimConfig))
TRAIN_SCHEMA = {**get_type_hints(ModelConfig), **get_type_hints(TrainConfig)}
TRACK_SCHEMA = {**get_type_hints(ClassConfig), "mechanisms": str, "refine": bool, "max_age": int}


def _load_config_file(path: str | None, schema: dict[str, type], what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what}: config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), schema, what)


# -- line-delimited records ----------------------------------------------------


def _box_fields(box: BoundingBox3D) -> dict:
    return {
        "class": CLASS_NAMES[box.class_id],
        "x": box.x, "y": box.y, "z": box.z,
        "w": box.w, "l": box.l, "h": box.h,
        "ry": box.r_y, "vx": box.vx, "vy": box.vy,
        "conf": box.confidence,
    }


def det_record(scene: int, frame: int, t: float, box: BoundingBox3D) -> dict:
    return {"type": "det", "scene": scene, "frame": frame, "t": t, **_box_fields(box)}


def gt_record(scene: int, frame: int, t: float, gt_id: int, box: BoundingBox3D) -> dict:
    return {"type": "gt", "scene": scene, "frame": frame, "t": t, "gt_id": gt_id, **_box_fields(box)}


def track_record(scene: int, frame: int, t: float, state: TrackState) -> dict:
    rec = {"type": "track", "scene": scene, "frame": frame, "t": t, **_box_fields(state.box)}
    rec["track_id"] = state.track_id
    rec["c_trk"] = state.c_trk
    return rec


def box_from_record(rec: dict) -> BoundingBox3D:
    return BoundingBox3D(
        x=rec["x"], y=rec["y"], z=rec["z"], w=rec["w"], l=rec["l"], h=rec["h"],
        r_y=rec["ry"], vx=rec["vx"], vy=rec["vy"],
        confidence=rec["conf"], class_id=CLASS_IDS[rec["class"]],
    )


def _dump_line(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


# -- BEV binary blocks ----------------------------------------------------------


def write_bev_block(f, grid: BevGrid) -> None:
    if grid.origin_x != grid.origin_y:
        raise ValueError("BEV blocks require a square origin (origin_x == origin_y)")
    f.write(
        struct.pack(
            "<IIIIff",
            BEV_MAGIC, grid.height, grid.width, grid.channels,
            grid.cell_size, grid.origin_x,
        )
    )
    f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def read_bev_block(f) -> BevGrid | None:
    header = f.read(24)
    if not header:
        return None
    if len(header) != 24:
        raise ValueError("truncated BEV block header")
    magic, h, w, c, cell, origin = struct.unpack("<IIIIff", header)
    if magic != BEV_MAGIC:
        raise ValueError(f"bad BEV magic {magic:#x}")
    payload = f.read(4 * h * w * c)
    if len(payload) != 4 * h * w * c:
        raise ValueError("truncated BEV block payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return BevGrid(data, float(cell), float(origin), float(origin))


# -- dataset layout --------------------------------------------------------------


def _scene_file(out_dir: Path, index: int) -> Path:
    return out_dir / "scenes" / f"scene_{index:04d}.jsonl"


def _bev_file(out_dir: Path, index: int) -> Path:
    return out_dir / "bev" / f"scene_{index:04d}.bin"


@dataclass
class LoadedScene:
    index: int
    class_name: str
    timestamps: list[float]
    frames: list[DetectionFrame]
    gt_by_frame: list[list[tuple[int, BoundingBox3D]]]

    def gt_by_timestamp(self) -> dict[float, list[tuple[int, BoundingBox3D]]]:
        return dict(zip(self.timestamps, self.gt_by_frame))


def list_scene_indices(dataset_dir: Path) -> list[int]:
    scene_dir = dataset_dir / "scenes"
    if not scene_dir.is_dir():
        raise UsageError(f"not a dataset directory (missing scenes/): {dataset_dir}")
    return sorted(int(p.stem.split("_")[1]) for p in scene_dir.glob("scene_*.jsonl"))


def load_scene(dataset_dir: Path, index: int, with_bev: bool = True) -> LoadedScene:
    path = _scene_file(dataset_dir, index)
    header = None
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if rec["type"] == "scene":
                header = rec
            else:
                records.append(rec)
    if header is None:
        raise ValueError(f"{path}: missing scene header line")
    n_frames = header["frames"]
    delta_t = 1.0 / header["frame_rate"]  # k * delta_t matches the generator bit-for-bit
    timestamps = [k * delta_t for k in range(n_frames)]
    dets: list[list[BoundingBox3D]] = [[] for _ in range(n_frames)]
    gts: list[list[tuple[int, BoundingBox3D]]] = [[] for _ in range(n_frames)]
    for rec in records:
        if rec["type"] == "det":
            dets[rec["frame"]].append(box_from_record(rec))
        elif rec["type"] == "gt":
            gts[rec["frame"]].append((rec["gt_id"], box_from_record(rec)))
        else:
            raise ValueError(f"{path}: unexpected record type {rec['type']!r}")
    grids: list[BevGrid | None] = [None] * n_frames
    if with_bev and header.get("bev_path"):
        with open(dataset_dir / header["bev_path"], "rb") as f:
            for k in range(n_frames):
                grid = read_bev_block(f)
                if grid is None:
                    raise ValueError(f"{path}: BEV file ended at frame {k}")
                grids[k] = grid
    frames = [
        DetectionFrame(timestamps[k], dets[k], grids[k]) for k in range(n_frames)
    ]
    return LoadedScene(index, header["class"], timestamps, frames, gts)


def iter_scenes(dataset_dir: Path, with_bev: bool = True):
    for index in list_scene_indices(dataset_dir):
        yield load_scene(dataset_dir, index, with_bev)


# -- manifest and locking --------------------------------------------------------


def write_manifest(out_dir: Path, command: str, *, config: str | None, seed: int | None,
                   inputs: list[str], outputs: list[str], started: float) -> None:
    doc = {
        "tool": "shapetrack",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "duration_seconds": round(time.time() - started, 3),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _locked_out_dir(out: str) -> tuple[Path, FileLock]:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"), timeout=LOCK_TIMEOUT_S)
    return out_dir, lock


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.time()
    overrides = _load_config_file(args.config, SIM_SCHEMA, "sim config")
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = SimConfig(**overrides)
    except ValueError as e:
        raise UsageError(f"sim config: {e}")
    out_dir, lock = _locked_out_dir(args.out)
    with lock:
        (out_dir / "scenes").mkdir(exist_ok=True)
        (out_dir / "bev").mkdir(exist_ok=True)
        for index in range(cfg.num_scenes):
            scene = generate_scene(cfg, index)
            bev_rel = f"bev/scene_{index:04d}.bin"
            with open(_bev_file(out_dir, index), "wb") as f:
                for frame in scene.frames:
                    write_bev_block(f, frame.bev_grid)
            with open(_scene_file(out_dir, index), "w", encoding="utf-8") as f:
                header = {
                    "type": "scene", "scene": index,
                    "frames": cfg.frames_per_scene, "frame_rate": cfg.frame_rate,
                    "class": cfg.class_name, "channels": cfg.channels,
                    "bev_path": bev_rel,
                }
                f.write(_dump_line(header) + "\n")
                for k, t in enumerate(scene.timestamps):
                    for gt_id, box in scene.gt_by_frame[k]:
                        f.write(_dump_line(gt_record(index, k, t, gt_id, box)) + "\n")
                    for box in scene.frames[k].boxes:
                        f.write(_dump_line(det_record(index, k, t, box)) + "\n")
        write_manifest(
            out_dir, "simulate", config=args.config, seed=cfg.seed,
            inputs=[], outputs=[f"{cfg.num_scenes} scenes"], started=started,
        )
    print(f"simulated {cfg.num_scenes} scenes -> {out_dir}")
    return 0


def scene_training_pairs(frames, gt_by_frame) -> list[TrainingPair]:
    """Consecutive-frame pairs plus a scene-start pair with an empty previous
    side, which is the situation the tracker faces on its first frame."""
    first_prev = DetectionFrame(frames[0].timestamp - 1.0, [])
    pairs = [TrainingPair(first_prev, frames[0], [], gt_by_frame[0])]
    for k in range(1, len(frames)):
        pairs.append(
            TrainingPair(frames[k - 1], frames[k], gt_by_frame[k - 1], gt_by_frame[k])
        )
    return pairs


def _training_pairs(dataset_dir: Path, class_name: str) -> list[TrainingPair]:
    pairs: list[TrainingPair] = []
    found = False
    for scene in iter_scenes(dataset_dir):
        if scene.class_name != class_name:
            continue
        found = True
        pairs.extend(scene_training_pairs(scene.frames, scene.gt_by_frame))
    if not found:
        raise UsageError(f"dataset has no scenes of class {class_name!r}")
    return pairs


def cmd_train(args) -> int:
    started = time.time()
    if args.class_name not in CLASS_IDS:
        raise UsageError(f"unknown class {args.class_name!r}")
    raw = _load_config_file(args.config, TRAIN_SCHEMA, "train config")
    model_keys = set(get_type_hints(ModelConfig))
    model_cfg = ModelConfig(**{k: v for k, v in raw.items() if k in model_keys})
    train_kwargs = {k: v for k, v in raw.items() if k not in model_keys}
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    train_cfg = TrainConfig(**train_kwargs)

    out_dir, lock = _locked_out_dir(args.out)
    dataset_dir = Path(args.dataset)
    pairs = _training_pairs(dataset_dir, args.class_name)

    start_epoch = 0
    prior_curve: list[float] = []
    if args.resume:
        model, class_cfg, opt_state, meta = load_checkpoint(args.resume)
        start_epoch = int(meta.get("epochs_done", 0))
        prior_curve = list(meta.get("loss_curve", []))
    else:
        model = AffinityModel(model_cfg)
        class_cfg = default_class_config(args.class_name, n_max=model_cfg.n_max)
        opt_state = None

    try:
        curve, opt_state = train(
            model, pairs, class_cfg, train_cfg,
            opt_state=opt_state, start_epoch=start_epoch,
        )
    except FloatingPointError as e:
        raise NumericalError(str(e))

    full_curve = prior_curve + curve
    with lock:
        save_checkpoint(
            out_dir / "checkpoint.json", model, class_cfg, opt_state,
            meta={
                "class": args.class_name,
                "epochs_done": train_cfg.epochs,
                "loss_curve": full_curve,
            },
        )
        with open(out_dir / "loss_log.txt", "w", encoding="utf-8") as f:
            for epoch, loss in enumerate(full_curve):
                f.write(f"epoch {epoch} loss {loss:.10f}\n")
        write_manifest(
            out_dir, "train", config=args.config, seed=train_cfg.seed,
            inputs=[args.dataset], outputs=["checkpoint.json", "loss_log.txt"],
            started=started,
        )
    for epoch, loss in enumerate(full_curve):
        print(f"epoch {epoch} loss {loss:.10f}")
    return 0


def _tracker_for_scene(scene: LoadedScene, args, model, class_cfg: ClassConfig,
                       overrides: dict) -> Tracker:
    if args.oracle_affinity:
        provider = OracleAffinity(scene.gt_by_timestamp(), class_cfg)
    elif model is not None:
        provider = LearnedAffinity(model)
    else:
        provider = None
    if "mechanisms" in overrides:
        raw = overrides["mechanisms"].strip()
        mechanisms = frozenset(m.strip() for m in raw.split(",") if m.strip())
    else:
        mechanisms = ALL_MECHANISMS if provider is not None else frozenset()
    refine = overrides.get("refine", provider is not None)
    kwargs = {}
    if "max_age" in overrides:
        kwargs["max_age"] = overrides["max_age"]
    try:
        return Tracker(
            class_cfg, provider=provider, mechanisms=mechanisms, refine=refine, **kwargs
        )
    except ValueError as e:
        raise UsageError(f"track config: {e}")


def cmd_track(args) -> int:
    started = time.time()
    overrides = _load_config_file(args.config, TRACK_SCHEMA, "track config")
    class_keys = set(get_type_hints(ClassConfig))
    model = None
    if args.checkpoint:
        model, class_cfg, _, _ = load_checkpoint(args.checkpoint)
        cc_kwargs = {k: v for k, v in overrides.items() if k in class_keys}
        if cc_kwargs:
            class_cfg = replace(class_cfg, **cc_kwargs)
    else:
        cc_kwargs = {k: v for k, v in overrides.items() if k in class_keys}
        try:
            class_cfg = ClassConfig(**cc_kwargs) if cc_kwargs else default_class_config("car")
        except ValueError as e:
            raise UsageError(f"track config: {e}")

    dataset_dir = Path(args.dataset)
    out_dir, lock = _locked_out_dir(args.out)
    with_bev = model is not None  # descriptors only matter to a learned model
    with lock:
        (out_dir / "tracks").mkdir(exist_ok=True)
        n_scenes = 0
        for scene in iter_scenes(dataset_dir, with_bev=with_bev):
            tracker = _tracker_for_scene(scene, args, model, class_cfg, overrides)
            lines = []
            for k, frame in enumerate(scene.frames):
                result = tracker.step(frame)
                for state in result.emitted:
                    lines.append(
                        _dump_line(track_record(scene.index, k, scene.timestamps[k], state))
                    )
            with open(out_dir / "tracks" / f"scene_{scene.index:04d}.jsonl", "w",
                      encoding="utf-8") as f:
                f.write("\n".join(lines) + ("\n" if lines else ""))
            n_scenes += 1
        write_manifest(
            out_dir, "track", config=args.config, seed=None,
            inputs=[args.dataset] + ([args.checkpoint] if args.checkpoint else []),
            outputs=[f"{n_scenes} track files"], started=started,
        )
    print(f"tracked {n_scenes} scenes -> {out_dir}")
    return 0


def _load_track_frames(tracks_dir: Path) -> dict[int, dict[int, list[dict]]]:
    per_scene: dict[int, dict[int, list[dict]]] = {}
    track_files = sorted((tracks_dir / "tracks").glob("scene_*.jsonl"))
    if not track_files:
        raise UsageError(f"no track files under {tracks_dir}")
    for path in track_files:
        index = int(path.stem.split("_")[1])
        frames: dict[int, list[dict]] = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                frames.setdefault(rec["frame"], []).append(rec)
        per_scene[index] = frames
    return per_scene


def cmd_eval(args) -> int:
    started = time.time()
    dataset_dir = Path(args.dataset)
    preds_by_scene = _load_track_frames(Path(args.tracks))
    gt_indices = list_scene_indices(dataset_dir)
    if set(preds_by_scene) != set(gt_indices):
        raise UsageError(
            f"scene mismatch: tracks cover {sorted(preds_by_scene)}, dataset has {gt_indices}"
        )

    frames_by_class: dict[str, list[EvalFrame]] = {}
    for scene in iter_scenes(dataset_dir, with_bev=False):
        pred_frames = preds_by_scene[scene.index]
        for k in range(len(scene.frames)):
            by_class: dict[str, tuple[list[PredBox], list[GtBox]]] = {}
            for rec in pred_frames.get(k, []):
                preds, _ = by_class.setdefault(rec["class"], ([], []))
                preds.append(PredBox(rec["track_id"], rec["x"], rec["y"], rec["c_trk"]))
            for gt_id, box in scene.gt_by_frame[k]:
                name = CLASS_NAMES[box.class_id]
                _, gts = by_class.setdefault(name, ([], []))
                gts.append(GtBox(gt_id, box.x, box.y))
            for name, (preds, gts) in by_class.items():
                frames_by_class.setdefault(name, []).append(
                    EvalFrame(scene.index, k, preds, gts)
                )
    try:
        report = evaluate(frames_by_class)
    except ValueError as e:
        raise UsageError(str(e))

    def clean(x: float) -> float | None:
        return None if math.isnan(x) else x

    doc = {
        "amota": clean(report.amota),
        "amotp": clean(report.amotp),
        "tp": report.tp, "fp": report.fp, "fn": report.fn, "ids": report.ids,
        "classes": {
            name: {
                "amota": clean(r.amota), "amotp": clean(r.amotp),
                "tp": r.tp, "fp": r.fp, "fn": r.fn, "ids": r.ids,
                "gt_count": r.gt_count,
            }
            for name, r in sorted(report.per_class.items())
        },
    }
    out_dir, lock = _locked_out_dir(args.out)
    with lock:
        with open(out_dir / "report.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        lines = [f"{'class':<12} {'amota':>8} {'amotp':>8} {'tp':>7} {'fp':>7} {'fn':>7} {'ids':>5}"]
        for name, r in sorted(report.per_class.items()):
            lines.append(
                f"{name:<12} {r.amota:>8.4f} {r.amotp:>8.4f} {r.tp:>7} {r.fp:>7} {r.fn:>7} {r.ids:>5}"
            )
        lines.append(
            f"{'overall':<12} {report.amota:>8.4f} {report.amotp:>8.4f} "
            f"{report.tp:>7} {report.fp:>7} {report.fn:>7} {report.ids:>5}"
        )
        table = "\n".join(lines) + "\n"
        with open(out_dir / "report.txt", "w", encoding="utf-8") as f:
            f.write(table)
        write_manifest(
            out_dir, "eval", config=None, seed=None,
            inputs=[args.tracks, args.dataset],
            outputs=["report.json", "report.txt"], started=started,
        )
    print(table, end="")
    return 0


# -- gradcheck --------------------------------------------------------------------


def _gradcheck_instance(seed: int) -> tuple[AffinityModel, FramePair, np.ndarray]:
    """Full 12-network model on a 2-previous / 3-current synthetic frame pair."""
    mcfg = ModelConfig(
        n_max=3, channels=4, descriptor_mode="five_point", residual_mode="fused",
        hidden=GRADCHECK_HIDDEN, wide_hidden=GRADCHECK_WIDE_HIDDEN, init_seed=0,
    )
    class_cfg = ClassConfig(n_max=3)
    model = AffinityModel(mcfg)
    rng = np.random.default_rng([seed, 1])
    model.jitter_params(rng, scale=0.2)

    def boxes(centers):
        return [
            BoundingBox3D(
                x=cx, y=cy, z=0.75, w=1.9, l=4.5, h=1.5,
                r_y=float(rng.uniform(-np.pi, np.pi)),
                vx=float(rng.normal(0, 2)), vy=float(rng.normal(0, 2)),
                confidence=float(rng.uniform(0.3, 1.0)), class_id=CLASS_IDS["car"],
            )
            for cx, cy in centers
        ]

    prev_gt = [(1, b) for b in boxes([(0.0, 0.0)])] + [(2, b) for b in boxes([(12.0, 5.0)])]
    cur_gt = [(1, b) for b in boxes([(1.0, 0.2)])] + [(3, b) for b in boxes([(30.0, 30.0)])]
    prev_frame = DetectionFrame(0.0, [b for _, b in prev_gt])
    cur_boxes = [b for _, b in cur_gt] + boxes([(20.0, 12.0)])  # one clutter box
    cur_frame = DetectionFrame(0.5, cur_boxes)
    pair = make_frame_pair(prev_frame, cur_frame, mcfg, class_cfg)
    # Random (but fixed) shape descriptors stand in for a rendered BEV field.
    pair = FramePair(
        pair.prev, pair.cur,
        rng.normal(0.0, 1.0, size=pair.prev_desc.shape),
        rng.normal(0.0, 1.0, size=pair.cur_desc.shape),
    )
    gt = build_gt_affinity(pair.prev, pair.cur, prev_gt, cur_gt, class_cfg)
    return model, pair, gt


def run_gradcheck(seed: int, corrupt: bool = False) -> float:
    model, pair, gt = _gradcheck_instance(seed)
    params = model.param_list()
    loss, grads, _ = model.loss_and_grads(pair, gt)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss!r}")
    analytic = nn.pack_params(grads)
    if corrupt:
        analytic = analytic.copy()
        analytic[0] = analytic[0] * 1.5 + 1.0
    theta = nn.pack_params(params)

    def f(vec: np.ndarray) -> float:
        nn.unpack_params(vec, params)
        return model.loss_and_grads(pair, gt)[0]

    try:
        numeric = nn.finite_difference_grad(f, theta)
    finally:
        nn.unpack_params(theta, params)
    return nn.max_relative_error(analytic, numeric)


def cmd_gradcheck(args) -> int:
    err = run_gradcheck(args.seed, corrupt=args.corrupt_backward)
    status = "PASS" if err < GRADCHECK_TOLERANCE else "FAIL"
    print(f"gradcheck {status} max_rel_err={err:.6e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    if status == "FAIL":
        raise NumericalError(f"gradcheck max relative error {err:.6e}")
    return 0


# -- entry point --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="shapetrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the affinity model for one class")
    p.add_argument("--dataset", required=True)
    p.add_argument("--class", dest="class_name", default="car")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle-affinity", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracks against dataset ground truth")
    p.add_argument("--tracks", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=DEFAULT_GRADCHECK_SEED)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except Timeout as e:
        print(f"i/o failure: output directory is locked: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
