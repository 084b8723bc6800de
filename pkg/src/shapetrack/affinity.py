"""The learned affinity model: anchor representations, residual fusion,
affinity estimation, ground-truth affinity construction, and training.

Matrix layout (M = n_max + 2 throughout):
  rows    = previous-frame detections, then anchor rows NB (slot n_max) and
            FP (slot n_max + 1);
  columns = current-frame detections, then anchor columns DT (slot n_max) and
            FN (slot n_max + 1).
A_fm drops the anchor rows and row-softmaxes; A_bm drops the anchor columns
and column-softmaxes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .core import (
    BoundingBox3D,
    ClassConfig,
    DetectionFrame,
    PaddedDetections,
    greedy_pairs,
    pad_or_sample,
)
from .residuals import (
    BevGrid,
    bilinear_sample,
    descriptors_for_rows,
    voxelnet_residual,
    voxelnet_residual_vjp,
)

CHECKPOINT_VERSION = 1

# GT matching gate for TP/FP labeling, meters (planar center distance).
GT_MATCH_DIST = 2.0

# Anchor dims pass through abs, but abs alone cannot keep them strictly
# positive (zero input to a zero-bias net yields exactly 0); the floor keeps
# the log dimension ratios finite.
ANCHOR_DIM_FLOOR = 1e-6

# Fixed network order; parameter lists and checkpoints follow it.
NETWORK_NAMES = (
    "bbox_fp",
    "bbox_nb",
    "bbox_fn",
    "bbox_dt",
    "shape_fp",
    "shape_nb",
    "shape_fn",
    "shape_dt",
    "res_bbox",
    "res_shape",
    "fusion",
    "affinity",
)

DESCRIPTOR_MODES = ("five_point", "center")
RESIDUAL_MODES = ("fused", "voxelnet", "bbox", "shape")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. descriptor_mode and residual_mode are the ablation
    axes; everything else is capacity."""

    n_max: int = 20
    channels: int = 4
    descriptor_mode: str = "five_point"
    residual_mode: str = "fused"
    hidden: int = 64
    wide_hidden: int = 128
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.descriptor_mode not in DESCRIPTOR_MODES:
            raise ValueError(f"descriptor_mode must be one of {DESCRIPTOR_MODES}")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"residual_mode must be one of {RESIDUAL_MODES}")
        if self.n_max < 1 or self.channels < 1:
            raise ValueError("n_max and channels must be >= 1")

    @property
    def descriptor_dim(self) -> int:
        return self.channels if self.descriptor_mode == "center" else 5 * self.channels

    def network_specs(self) -> dict[str, nn.MlpSpec]:
        n, d = self.n_max, self.descriptor_dim
        h, wh = self.hidden, self.wide_hidden
        sizes = {
            "bbox_fp": (7 * n, h, h, 7),
            "bbox_nb": (7 * n, h, h, 7),
            "bbox_fn": (7 * n, h, h, 7),
            "bbox_dt": (7 * n, h, h, 7),
            "shape_fp": (d * n, h, h, d),
            "shape_nb": (d * n, h, h, d),
            "shape_fn": (d * n, h, h, d),
            "shape_dt": (d * n, h, h, d),
            "res_bbox": (6, h, h, 1),
            "res_shape": (2 * d, wh, wh, 1),
            "fusion": (2 * d + 6, wh, wh, 3),
            "affinity": (1, h, h, 1),
        }
        return {
            name: nn.MlpSpec(sizes[name], self.init_seed * 100 + k)
            for k, name in enumerate(NETWORK_NAMES)
        }


@dataclass
class FramePair:
    """Padded consecutive-frame inputs ready for the model."""

    prev: PaddedDetections
    cur: PaddedDetections
    prev_desc: np.ndarray  # (n_max, D); zero at padded slots
    cur_desc: np.ndarray


@dataclass
class AffinityOutput:
    """Raw scores plus the two stochastic views and their validity masks."""

    A: np.ndarray  # (M, M)
    A_fm: np.ndarray  # (n_max, M), rows sum to 1 where fm_mask row valid
    A_bm: np.ndarray  # (M, n_max), cols sum to 1 where bm_mask col valid
    fm_mask: np.ndarray  # (n_max, M) bool
    bm_mask: np.ndarray  # (M, n_max) bool

    @property
    def n_max(self) -> int:
        return self.A_fm.shape[0]

    def track_anchor_probs(self, i: int) -> tuple[float, float]:
        """(P_DT, P_FN) for previous-frame detection row i."""
        n = self.n_max
        return float(self.A_fm[i, n]), float(self.A_fm[i, n + 1])

    def detection_anchor_probs(self, j: int) -> tuple[float, float]:
        """(P_NB, P_FP) for current-frame detection column j."""
        n = self.n_max
        return float(self.A_bm[n, j]), float(self.A_bm[n + 1, j])


def extract_descriptors(
    grid: BevGrid | None, padded: PaddedDetections, cfg: ModelConfig
) -> np.ndarray:
    """Per-slot descriptors, zeroed on padded slots. No grid -> all zeros
    (inference with geometry only)."""
    n, d = padded.n_max, cfg.descriptor_dim
    out = np.zeros((n, d))
    if grid is None:
        return out
    if grid.channels != cfg.channels:
        raise ValueError(
            f"grid has {grid.channels} channels, model expects {cfg.channels}"
        )
    if cfg.descriptor_mode == "center":
        for i in range(n):
            if padded.valid_mask[i]:
                out[i] = bilinear_sample(grid, padded.boxes[i, 0], padded.boxes[i, 1])
    else:
        full = descriptors_for_rows(grid, padded.boxes)
        out[padded.valid_mask] = full[padded.valid_mask]
    return out


def make_frame_pair(
    prev_frame: DetectionFrame,
    cur_frame: DetectionFrame,
    model_cfg: ModelConfig,
    class_cfg: ClassConfig,
) -> FramePair:
    prev = pad_or_sample(prev_frame, class_cfg)
    cur = pad_or_sample(cur_frame, class_cfg)
    return FramePair(
        prev=prev,
        cur=cur,
        prev_desc=extract_descriptors(prev_frame.bev_grid, prev, model_cfg),
        cur_desc=extract_descriptors(cur_frame.bev_grid, cur, model_cfg),
    )


def _match_dets_to_gt(
    padded: PaddedDetections, gt: list[tuple[int, BoundingBox3D]]
) -> dict[int, int]:
    """Greedy 2 m matching of padded detection slots to GT boxes.

    Returns slot -> gt track ID for the TP slots. Duplicate GT IDs rejected.
    """
    ids = [g[0] for g in gt]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate GT track IDs within one frame")
    slots = np.nonzero(padded.valid_mask)[0]
    if slots.size == 0 or not gt:
        return {}
    det_xy = padded.boxes[slots, :2]
    gt_xy = np.array([[g[1].x, g[1].y] for g in gt])
    dists = np.linalg.norm(det_xy[:, None, :] - gt_xy[None, :, :], axis=2)
    return {
        int(slots[a]): ids[b] for a, b in greedy_pairs(dists, gate=GT_MATCH_DIST)
    }


def build_gt_affinity(
    padded_prev: PaddedDetections,
    padded_cur: PaddedDetections,
    gt_prev: list[tuple[int, BoundingBox3D]],
    gt_cur: list[tuple[int, BoundingBox3D]],
    cfg: ClassConfig,
) -> np.ndarray:
    """0/1 target matrix (n_max+2) x (n_max+2).

    TP detections are matched to GT by the 2 m center-distance rule. Then:
    TP-TP pairs sharing a GT ID get A[i, j] = 1; previous-frame FPs and TPs
    whose ID left the scene get the DT column; previous-frame TPs missed by
    the current detector but still present in GT get the FN column; current
    TPs with no same-ID previous detection get the NB row (whether the object
    is brand new or re-appearing after a detector miss, nothing in the
    previous frame owns it); current FPs get the FP row. Everything else is
    0, so every valid row and column carries exactly one target.
    """
    n = cfg.n_max
    a = np.zeros((n + 2, n + 2))
    prev_tp = _match_dets_to_gt(padded_prev, gt_prev)  # slot -> gt id
    cur_tp = _match_dets_to_gt(padded_cur, gt_cur)
    gt_cur_ids = {g[0] for g in gt_cur}
    prev_det_ids = set(prev_tp.values())
    cur_id_to_slot = {gid: j for j, gid in cur_tp.items()}

    for i in np.nonzero(padded_prev.valid_mask)[0]:
        i = int(i)
        gid = prev_tp.get(i)
        if gid is None or gid not in gt_cur_ids:
            a[i, n] = 1.0  # DT: detection was FP, or its object left the scene
        elif gid in cur_id_to_slot:
            a[i, cur_id_to_slot[gid]] = 1.0
        else:
            a[i, n + 1] = 1.0  # FN: object persists but the detector missed it

    for j in np.nonzero(padded_cur.valid_mask)[0]:
        j = int(j)
        gid = cur_tp.get(j)
        if gid is None:
            a[n + 1, j] = 1.0  # FP row
        elif gid not in prev_det_ids:
            a[n, j] = 1.0  # NB row: no previous detection to associate with
        # else: matched from the row pass
    return a


class AffinityModel:
    """Twelve jointly trained MLPs predicting frame-to-frame affinities."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.specs = cfg.network_specs()
        self.nets = {name: self.specs[name].build() for name in NETWORK_NAMES}
        # Box-anchor nets start from a unit-box prior so untrained anchors
        # (and empty frames) produce well-posed dimensions.
        for name in ("bbox_fp", "bbox_nb", "bbox_fn", "bbox_dt"):
            self.nets[name].biases[-1][3:6] = 1.0

    # -- parameters ---------------------------------------------------------

    def param_list(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for name in NETWORK_NAMES:
            out.extend(self.nets[name].param_list())
        return out

    def jitter_params(self, rng: np.random.Generator, scale: float = 0.05) -> None:
        """Perturb every parameter in place. Freshly built nets have zero
        biases, which leaves rectifier pre-activations of all-dead layers
        sitting exactly on their kink; derivative checks must run at a
        generic point, so they jitter first."""
        for p in self.param_list():
            p += rng.normal(0.0, scale, size=p.shape)

    def _grad_slots(self) -> tuple[list[np.ndarray], dict[str, slice]]:
        grads: list[np.ndarray] = []
        slots: dict[str, slice] = {}
        for name in NETWORK_NAMES:
            start = len(grads)
            grads.extend(nn.zeros_like_params(self.nets[name].param_list()))
            slots[name] = slice(start, len(grads))
        return grads, slots

    # -- anchor learning ----------------------------------------------------

    def learn_bbox_anchors(
        self, prev_boxes: np.ndarray, cur_boxes: np.ndarray
    ) -> dict[str, np.ndarray]:
        """Guarded anchor boxes: b_fp and b_nb summarize the current frame,
        b_fn and b_dt the previous frame. Dims pass through absolute value."""
        anchors, _ = self._anchor_forward(
            prev_boxes.ravel(), cur_boxes.ravel(), kind="bbox"
        )
        return anchors

    def learn_shape_anchors(
        self, cur_desc: np.ndarray, prev_desc: np.ndarray
    ) -> dict[str, np.ndarray]:
        anchors, _ = self._anchor_forward(
            prev_desc.ravel(), cur_desc.ravel(), kind="shape"
        )
        return anchors

    def _anchor_forward(
        self, prev_flat: np.ndarray, cur_flat: np.ndarray, kind: str
    ) -> tuple[dict[str, np.ndarray], dict]:
        cache: dict = {}
        anchors: dict[str, np.ndarray] = {}
        inputs = {"fp": cur_flat, "nb": cur_flat, "fn": prev_flat, "dt": prev_flat}
        for tag, x in inputs.items():
            name = f"{kind}_{tag}"
            raw, c = self.nets[name].forward(x)
            if not np.isfinite(raw).all():
                raise ValueError(f"non-finite anchor output from {name}")
            cache[name] = (raw, c)
            if kind == "bbox":
                guarded = raw.copy()
                guarded[3:6] = np.maximum(np.abs(guarded[3:6]), ANCHOR_DIM_FLOOR)
                anchors[tag] = guarded
            else:
                anchors[tag] = raw
        return anchors, cache

    # -- forward ------------------------------------------------------------

    def forward(self, pair: FramePair) -> tuple[AffinityOutput, dict]:
        n = self.cfg.n_max
        d = self.cfg.descriptor_dim
        if pair.prev.n_max != n or pair.cur.n_max != n:
            raise ValueError("pair padded to a different n_max than the model")
        if pair.prev_desc.shape != (n, d) or pair.cur_desc.shape != (n, d):
            raise ValueError("descriptor shape mismatch")
        m = n + 2
        cache: dict = {"pair": pair}

        bbox_anchors, bbox_cache = self._anchor_forward(
            pair.prev.boxes.ravel(), pair.cur.boxes.ravel(), kind="bbox"
        )
        shape_anchors, shape_cache = self._anchor_forward(
            pair.prev_desc.ravel(), pair.cur_desc.ravel(), kind="shape"
        )
        cache["bbox_cache"] = bbox_cache
        cache["shape_cache"] = shape_cache
        cache["bbox_anchors"] = bbox_anchors

        # Augment: prev rows gain (NB, FP); cur columns gain (DT, FN).
        prev_aug = np.vstack([pair.prev.boxes, bbox_anchors["nb"], bbox_anchors["fp"]])
        cur_aug = np.vstack([pair.cur.boxes, bbox_anchors["dt"], bbox_anchors["fn"]])
        sp_aug = np.vstack([pair.prev_desc, shape_anchors["nb"], shape_anchors["fp"]])
        sc_aug = np.vstack([pair.cur_desc, shape_anchors["dt"], shape_anchors["fn"]])
        pv = np.concatenate([pair.prev.valid_mask, [True, True]])
        cv = np.concatenate([pair.cur.valid_mask, [True, True]])
        cache.update(prev_aug=prev_aug, cur_aug=cur_aug, pv=pv, cv=cv)

        mode = self.cfg.residual_mode
        r_v = np.zeros((m, m))
        if mode in ("fused", "voxelnet"):
            vox, vox_cache = voxelnet_residual(prev_aug, cur_aug, pv, cv)
            # Zero-substitute invalid entries: they are masked out of every
            # softmax, and zeros keep downstream networks NaN-free.
            r_v = np.where(vox.valid_mask, vox.values, 0.0)
            cache["vox_cache"] = vox_cache

        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        centers_pair = np.hstack([prev_aug[ii, :3], cur_aug[jj, :3]])  # (m*m, 6)
        cache["idx"] = (ii, jj)

        r_b = np.zeros((m, m))
        if mode in ("fused", "bbox"):
            rb_flat, rb_cache = self.nets["res_bbox"].forward(centers_pair)
            r_b = rb_flat.reshape(m, m)
            cache["rb_cache"] = rb_cache

        r_s = np.zeros((m, m))
        if mode in ("fused", "shape"):
            shapes_pair = np.hstack([sp_aug[ii], sc_aug[jj]])  # (m*m, 2D)
            rs_flat, rs_cache = self.nets["res_shape"].forward(shapes_pair)
            r_s = rs_flat.reshape(m, m)
            cache["rs_cache"] = rs_cache

        if mode == "fused":
            fusion_in = np.hstack([centers_pair, sp_aug[ii], sc_aug[jj]])
            alpha_flat, alpha_cache = self.nets["fusion"].forward(fusion_in)
            alphas = alpha_flat.reshape(m, m, 3)
            fused = alphas[:, :, 0] * r_v + alphas[:, :, 1] * r_b + alphas[:, :, 2] * r_s
            cache["alpha_cache"] = alpha_cache
            cache["alphas"] = alphas
        elif mode == "voxelnet":
            fused = r_v
        elif mode == "bbox":
            fused = r_b
        else:
            fused = r_s
        cache.update(r_v=r_v, r_b=r_b, r_s=r_s, fused=fused)

        a_flat, aff_cache = self.nets["affinity"].forward(fused.reshape(-1, 1))
        a = a_flat.reshape(m, m)
        cache["aff_cache"] = aff_cache

        fm_mask = pair.prev.valid_mask[:, None] & cv[None, :]
        bm_mask = pv[:, None] & pair.cur.valid_mask[None, :]
        a_fm = (
            nn.masked_softmax(a[:n, :], fm_mask, axis=1)
            if fm_mask.any()
            else np.zeros((n, m))
        )
        a_bm = (
            nn.masked_softmax(a[:, :n], bm_mask, axis=0)
            if bm_mask.any()
            else np.zeros((m, n))
        )
        out = AffinityOutput(A=a, A_fm=a_fm, A_bm=a_bm, fm_mask=fm_mask, bm_mask=bm_mask)
        cache["out"] = out
        return out, cache

    # -- loss and gradients -------------------------------------------------

    def loss_and_grads(
        self, pair: FramePair, gt: np.ndarray
    ) -> tuple[float, list[np.ndarray], AffinityOutput]:
        """L = mean of the forward and backward matching losses (an empty side
        drops out), with exact gradients for every network parameter."""
        n = self.cfg.n_max
        m = n + 2
        out, cache = self.forward(pair)
        gt = np.asarray(gt, dtype=np.float64)
        if gt.shape != (m, m):
            raise ValueError(f"gt must be ({m}, {m})")

        gt_fm, gt_bm = gt[:n, :], gt[:, :n]
        terms = []
        grad_a = np.zeros((m, m))
        if out.fm_mask.any() and gt_fm.sum() > 0:
            loss_fm, _, g_fm = nn.masked_softmax_xent(
                cache["out"].A[:n, :], out.fm_mask, gt_fm, axis=1
            )
            terms.append(("fm", loss_fm, g_fm))
        if out.bm_mask.any() and gt_bm.sum() > 0:
            loss_bm, _, g_bm = nn.masked_softmax_xent(
                cache["out"].A[:, :n], out.bm_mask, gt_bm, axis=0
            )
            terms.append(("bm", loss_bm, g_bm))
        if not terms:
            return 0.0, [np.zeros_like(p) for p in self.param_list()], out
        w = 1.0 / len(terms)
        loss = w * sum(t[1] for t in terms)
        for tag, _, g in terms:
            if tag == "fm":
                grad_a[:n, :] += w * g
            else:
                grad_a[:, :n] += w * g

        grads = self._backward(cache, grad_a)
        return loss, grads, out

    def _backward(self, cache: dict, grad_a: np.ndarray) -> list[np.ndarray]:
        n = self.cfg.n_max
        d = self.cfg.descriptor_dim
        m = n + 2
        mode = self.cfg.residual_mode
        grads, slots = self._grad_slots()

        def add(name: str, net_grads: list[np.ndarray]) -> None:
            nn.accumulate_grads(grads[slots[name]], net_grads)

        g_in, aff_grads = self.nets["affinity"].backward(
            cache["aff_cache"], grad_a.reshape(-1, 1)
        )
        add("affinity", aff_grads)
        g_fused = g_in.reshape(m, m)

        g_rv = np.zeros((m, m))
        g_centers = np.zeros((m * m, 6))
        g_sp_aug = np.zeros((m, d))
        g_sc_aug = np.zeros((m, d))

        if mode == "fused":
            alphas = cache["alphas"]
            g_alphas = np.stack(
                [g_fused * cache["r_v"], g_fused * cache["r_b"], g_fused * cache["r_s"]],
                axis=2,
            )
            g_fin, alpha_grads = self.nets["fusion"].backward(
                cache["alpha_cache"], g_alphas.reshape(-1, 3)
            )
            add("fusion", alpha_grads)
            g_centers += g_fin[:, :6]
            g_sp_aug += self._sum_over_cur(g_fin[:, 6 : 6 + d], m)
            g_sc_aug += self._sum_over_prev(g_fin[:, 6 + d :], m)
            g_rv = g_fused * alphas[:, :, 0]
            g_rb = g_fused * alphas[:, :, 1]
            g_rs = g_fused * alphas[:, :, 2]
        else:
            g_rb = g_fused if mode == "bbox" else None
            g_rs = g_fused if mode == "shape" else None
            if mode == "voxelnet":
                g_rv = g_fused

        g_prev_aug = np.zeros((m, 7))
        g_cur_aug = np.zeros((m, 7))

        if mode in ("fused", "voxelnet"):
            vox_valid = cache["vox_cache"]["valid"]
            gp, gc = voxelnet_residual_vjp(
                cache["vox_cache"], np.where(vox_valid, g_rv, 0.0)
            )
            g_prev_aug += gp
            g_cur_aug += gc

        if mode in ("fused", "bbox") and g_rb is not None:
            g_cin, rb_grads = self.nets["res_bbox"].backward(
                cache["rb_cache"], g_rb.reshape(-1, 1)
            )
            add("res_bbox", rb_grads)
            g_centers += g_cin

        if mode in ("fused", "shape") and g_rs is not None:
            g_sin, rs_grads = self.nets["res_shape"].backward(
                cache["rs_cache"], g_rs.reshape(-1, 1)
            )
            add("res_shape", rs_grads)
            g_sp_aug += self._sum_over_cur(g_sin[:, :d], m)
            g_sc_aug += self._sum_over_prev(g_sin[:, d:], m)

        g_prev_aug[:, :3] += self._sum_over_cur(g_centers[:, :3], m)
        g_cur_aug[:, :3] += self._sum_over_prev(g_centers[:, 3:], m)

        # Anchor rows peel off the augmented gradients, through the abs guard
        # for box dims; detection rows are data, their gradients stop here.
        bbox_targets = {"nb": g_prev_aug[n], "fp": g_prev_aug[n + 1],
                        "dt": g_cur_aug[n], "fn": g_cur_aug[n + 1]}
        for tag, g_anchor in bbox_targets.items():
            name = f"bbox_{tag}"
            raw_out, net_cache = cache["bbox_cache"][name]
            g_raw = g_anchor.copy()
            g_raw[3:6] *= np.sign(raw_out[3:6]) * (
                np.abs(raw_out[3:6]) > ANCHOR_DIM_FLOOR
            )
            _, ng = self.nets[name].backward(net_cache, g_raw)
            add(name, ng)

        shape_targets = {"nb": g_sp_aug[n], "fp": g_sp_aug[n + 1],
                         "dt": g_sc_aug[n], "fn": g_sc_aug[n + 1]}
        for tag, g_anchor in shape_targets.items():
            name = f"shape_{tag}"
            _, net_cache = cache["shape_cache"][name]
            _, ng = self.nets[name].backward(net_cache, g_anchor)
            add(name, ng)

        return grads

    # Pairwise rows are enumerated row-major (prev outer, cur inner), so
    # summing back onto one side is a reshape plus an axis sum.
    @staticmethod
    def _sum_over_cur(flat: np.ndarray, m: int) -> np.ndarray:
        return flat.reshape(m, m, -1).sum(axis=1)

    @staticmethod
    def _sum_over_prev(flat: np.ndarray, m: int) -> np.ndarray:
        return flat.reshape(m, m, -1).sum(axis=0)


# -- training ----------------------------------------------------------------


@dataclass
class TrainingPair:
    """One supervised example: consecutive raw frames plus GT annotations."""

    prev_frame: DetectionFrame
    cur_frame: DetectionFrame
    gt_prev: list[tuple[int, BoundingBox3D]]
    gt_cur: list[tuple[int, BoundingBox3D]]


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    max_pairs_per_epoch: int | None = None
    fp_downsample: bool = True
    # FP budget per side = max(keep_fp_floor, #TP on that side).
    keep_fp_floor: int = 3


def _downsample_fps(
    boxes: list[BoundingBox3D],
    gt: list[tuple[int, BoundingBox3D]],
    floor: int,
    rng: np.random.Generator,
) -> list[BoundingBox3D]:
    """Keep every TP detection and at most max(#TP, floor) FPs, chosen
    uniformly; original detection order is preserved."""
    if not boxes:
        return boxes
    gt_xy = np.array([[g[1].x, g[1].y] for g in gt]) if gt else np.zeros((0, 2))
    det_xy = np.array([[b.x, b.y] for b in boxes])
    dists = (
        np.linalg.norm(det_xy[:, None, :] - gt_xy[None, :, :], axis=2)
        if len(gt)
        else np.full((len(boxes), 1), np.inf)
    )
    tp_slots = {i for i, _ in greedy_pairs(dists, gate=GT_MATCH_DIST)} if len(gt) else set()
    fp_slots = [i for i in range(len(boxes)) if i not in tp_slots]
    budget = max(len(tp_slots), floor)
    if len(fp_slots) <= budget:
        return boxes
    chosen = rng.choice(len(fp_slots), size=budget, replace=False)
    keep = tp_slots | {fp_slots[int(c)] for c in chosen}
    return [b for i, b in enumerate(boxes) if i in keep]


def prepare_pair(
    tp: TrainingPair,
    model_cfg: ModelConfig,
    class_cfg: ClassConfig,
    train_cfg: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[FramePair, np.ndarray]:
    """Optionally FP-downsample both frames, pad, extract descriptors, and
    build the GT target."""
    prev_frame, cur_frame = tp.prev_frame, tp.cur_frame
    if train_cfg is not None and train_cfg.fp_downsample:
        assert rng is not None
        prev_frame = DetectionFrame(
            prev_frame.timestamp,
            _downsample_fps(prev_frame.boxes, tp.gt_prev, train_cfg.keep_fp_floor, rng),
            prev_frame.bev_grid,
        )
        cur_frame = DetectionFrame(
            cur_frame.timestamp,
            _downsample_fps(cur_frame.boxes, tp.gt_cur, train_cfg.keep_fp_floor, rng),
            cur_frame.bev_grid,
        )
    pair = make_frame_pair(prev_frame, cur_frame, model_cfg, class_cfg)
    gt = build_gt_affinity(pair.prev, pair.cur, tp.gt_prev, tp.gt_cur, class_cfg)
    return pair, gt


def train(
    model: AffinityModel,
    dataset: list[TrainingPair],
    class_cfg: ClassConfig,
    train_cfg: TrainConfig,
    opt_state: nn.AdamState | None = None,
    start_epoch: int = 0,
) -> tuple[list[float], nn.AdamState]:
    """Per-pair Adam steps over shuffled epochs; returns the per-epoch mean
    loss curve. Deterministic given (model init, dataset, config): epoch k
    draws its randomness from default_rng([seed, k]), so resuming at epoch k
    needs no saved RNG state."""
    if not dataset:
        raise ValueError("empty training dataset")
    params = model.param_list()
    if opt_state is None:
        opt_state = nn.AdamState.for_params(params)
    curve: list[float] = []
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(len(dataset))
        if train_cfg.max_pairs_per_epoch is not None:
            order = order[: train_cfg.max_pairs_per_epoch]
        losses = []
        for k in order:
            pair, gt = prepare_pair(dataset[int(k)], model.cfg, class_cfg, train_cfg, rng)
            if gt.sum() == 0:
                continue
            loss, grads, _ = model.loss_and_grads(pair, gt)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, pair {int(k)}"
                )
            nn.adamw_step(
                params,
                grads,
                opt_state,
                lr=train_cfg.lr,
                weight_decay=train_cfg.weight_decay,
            )
            losses.append(loss)
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return curve, opt_state


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(
    path,
    model: AffinityModel,
    class_cfg: ClassConfig,
    opt_state: nn.AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """Single self-describing JSON document: every network's spec and
    row-major parameters, the class config, and optional optimizer moments."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "class_config": asdict(class_cfg),
        "networks": {
            name: {
                "layer_sizes": list(model.specs[name].layer_sizes),
                "init_seed": model.specs[name].init_seed,
                "weights": [w.tolist() for w in model.nets[name].weights],
                "biases": [b.tolist() for b in model.nets[name].biases],
            }
            for name in NETWORK_NAMES
        },
        "optimizer": None
        if opt_state is None
        else {
            "t": opt_state.t,
            "m": [a.tolist() for a in opt_state.m],
            "v": [a.tolist() for a in opt_state.v],
        },
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> tuple[AffinityModel, ClassConfig, nn.AdamState | None, dict]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    model = AffinityModel(ModelConfig(**doc["model_config"]))
    for name in NETWORK_NAMES:
        entry = doc["networks"][name]
        net = model.nets[name]
        if entry["layer_sizes"] != net.layer_sizes:
            raise ValueError(f"checkpoint layer sizes for {name} do not match config")
        for k, w in enumerate(entry["weights"]):
            net.weights[k][...] = np.asarray(w)
        for k, b in enumerate(entry["biases"]):
            net.biases[k][...] = np.asarray(b)
    class_cfg = ClassConfig(**doc["class_config"])
    opt = None
    if doc.get("optimizer"):
        params = model.param_list()
        opt = nn.AdamState(
            m=[np.asarray(a) for a in doc["optimizer"]["m"]],
            v=[np.asarray(a) for a in doc["optimizer"]["v"]],
            t=int(doc["optimizer"]["t"]),
        )
        if len(opt.m) != len(params) or any(
            a.shape != p.shape for a, p in zip(opt.m, params)
        ):
            raise ValueError("optimizer state does not match parameters")
    return model, class_cfg, opt, doc.get("meta", {})
