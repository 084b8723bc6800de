"""Closed-form box-residual math and BEV shape-descriptor extraction.

The residual between two boxes combines a normalized squared center distance,
absolute log dimension ratios, and the chord distance between yaw headings.
Shape descriptors are bilinear samples of a bird's-eye-view feature grid at a
box's center and four face centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Number of sample points per box: center + left/right/front/back face centers.
DESCRIPTOR_POINTS = 5


@dataclass
class BevGrid:
    """Top-down feature field. ``data[row, col, :]`` is the F-vector of the cell
    whose center sits at world (origin_x + col*cell_size, origin_y + row*cell_size).
    """

    data: np.ndarray  # (H, W, F)
    cell_size: float
    origin_x: float
    origin_y: float

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise ValueError(f"grid data must be (H, W, F>=1), got {self.data.shape}")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if not np.isfinite(self.data).all():
            raise ValueError("grid data must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def bilinear_sample(grid: BevGrid, x: float, y: float) -> np.ndarray:
    """Channel-wise bilinear interpolation at world point (x, y).

    Queries outside the cell-center lattice clamp to the boundary, so the
    result always equals the interpolated value at the nearest lattice point.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"sample coordinates must be finite, got ({x!r}, {y!r})")
    h, w = grid.height, grid.width
    fx = min(max((x - grid.origin_x) / grid.cell_size, 0.0), float(w - 1))
    fy = min(max((y - grid.origin_y) / grid.cell_size, 0.0), float(h - 1))
    x0 = min(int(fx), max(w - 2, 0))
    y0 = min(int(fy), max(h - 2, 0))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    tx = fx - x0
    ty = fy - y0
    d = grid.data
    return (
        (1.0 - ty) * ((1.0 - tx) * d[y0, x0] + tx * d[y0, x1])
        + ty * ((1.0 - tx) * d[y1, x0] + tx * d[y1, x1])
    )


def box_sample_points(x: float, y: float, w: float, l: float, r_y: float) -> np.ndarray:
    """The five descriptor sample points: center, left, right, front, back.

    Heading (front) is +l/2 along u_long = (-sin r_y, cos r_y); left is +w/2
    along u_lat = (-cos r_y, -sin r_y). Right-handed, z-up: at r_y = 0 the box
    faces +y and its left side faces -x.
    """
    ulx, uly = -math.sin(r_y), math.cos(r_y)
    vlx, vly = -math.cos(r_y), -math.sin(r_y)
    hw, hl = 0.5 * w, 0.5 * l
    return np.array(
        [
            [x, y],
            [x + hw * vlx, y + hw * vly],
            [x - hw * vlx, y - hw * vly],
            [x + hl * ulx, y + hl * uly],
            [x - hl * ulx, y - hl * uly],
        ],
        dtype=np.float64,
    )


def extract_shape_descriptor(grid: BevGrid, box) -> np.ndarray:
    """Concatenated bilinear samples at the box's five sample points (5F,).

    ``box`` is anything exposing x, y, w, l, r_y (a BoundingBox3D or a row
    wrapper); padded all-zero rows are invalid boxes, so callers pass raw
    coordinates via :func:`extract_shape_descriptor_xyzwlr` for those.
    """
    return descriptor_from_pose(grid, box.x, box.y, box.w, box.l, box.r_y)


def descriptor_from_pose(
    grid: BevGrid, x: float, y: float, w: float, l: float, r_y: float
) -> np.ndarray:
    points = box_sample_points(x, y, w, l, r_y)
    return np.concatenate([bilinear_sample(grid, px, py) for px, py in points])


def descriptors_for_rows(grid: BevGrid, rows: np.ndarray) -> np.ndarray:
    """Descriptors for an (N, 7) box-row array -> (N, 5F). Zero rows sample at
    the (clamped) origin, which is fine: they are masked out downstream."""
    out = np.empty((rows.shape[0], DESCRIPTOR_POINTS * grid.channels))
    for i, r in enumerate(rows):
        out[i] = descriptor_from_pose(grid, r[0], r[1], r[3], r[4], r[6])
    return out


@dataclass
class ResidualMatrix:
    """Pairwise residual values with a validity mask.

    Invalid entries hold NaN so they can never be mistaken for real residuals;
    downstream softmaxes must substitute masked logits before any arithmetic.
    """

    values: np.ndarray  # (M, M) float64
    valid_mask: np.ndarray  # (M, M) bool


def voxelnet_residual(
    prev_boxes: np.ndarray,
    cur_boxes: np.ndarray,
    prev_valid: np.ndarray,
    cur_valid: np.ndarray,
) -> tuple[ResidualMatrix, dict]:
    """Closed-form residual between every (prev, cur) box pair.

    Entry (i, j) = L_c(i,j)/mu + L_d(i,j) + L_r(i,j) where L_c is the squared
    center distance, L_d the sum of absolute log dimension ratios, L_r the
    chord distance between yaw headings, and mu the mean of L_c over all
    valid pairs (1 when that mean is zero, so identical frames residual to 0).

    Returns the matrix and a cache consumed by :func:`voxelnet_residual_vjp`.
    Raises if any valid box has a non-positive dimension.
    """
    prev_boxes = np.asarray(prev_boxes, dtype=np.float64)
    cur_boxes = np.asarray(cur_boxes, dtype=np.float64)
    prev_valid = np.asarray(prev_valid, dtype=bool)
    cur_valid = np.asarray(cur_valid, dtype=bool)
    m, n = prev_boxes.shape[0], cur_boxes.shape[0]
    if prev_boxes.shape[1] != 7 or cur_boxes.shape[1] != 7:
        raise ValueError("boxes must be (M, 7) rows")

    if (prev_boxes[prev_valid, 3:6] <= 0).any() or (cur_boxes[cur_valid, 3:6] <= 0).any():
        raise ValueError(
            "valid box with non-positive dimension; anchor guard missing upstream"
        )

    valid = prev_valid[:, None] & cur_valid[None, :]
    if not valid.any():
        nanmat = np.full((m, n), np.nan)
        return ResidualMatrix(nanmat, valid), {"valid": valid}

    diff = prev_boxes[:, None, :3] - cur_boxes[None, :, :3]  # (M, N, 3)
    l_c = (diff**2).sum(axis=2)

    # Log ratios blow up on the zero dims of padded rows; compute only where
    # valid and leave invalid entries at 0 (they are masked anyway).
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(prev_boxes[:, None, 3:6]) - np.log(cur_boxes[None, :, 3:6])
    log_ratio = np.where(valid[:, :, None], log_ratio, 0.0)
    l_d = np.abs(log_ratio).sum(axis=2)

    cos_p, sin_p = np.cos(prev_boxes[:, 6]), np.sin(prev_boxes[:, 6])
    cos_c, sin_c = np.cos(cur_boxes[:, 6]), np.sin(cur_boxes[:, 6])
    dcos = cos_p[:, None] - cos_c[None, :]
    dsin = sin_p[:, None] - sin_c[None, :]
    sq = dcos**2 + dsin**2
    l_r = np.sqrt(sq)

    n_valid = int(valid.sum())
    mean_lc = float(l_c[valid].sum()) / n_valid
    fallback = mean_lc == 0.0
    mu = 1.0 if fallback else mean_lc

    values = l_c / mu + l_d + l_r
    values = np.where(valid, values, np.nan)

    cache = {
        "valid": valid,
        "diff": diff,
        "l_c": l_c,
        "log_ratio": log_ratio,
        "prev_dims": prev_boxes[:, 3:6],
        "cur_dims": cur_boxes[:, 3:6],
        "cos_p": cos_p,
        "sin_p": sin_p,
        "cos_c": cos_c,
        "sin_c": sin_c,
        "dcos": dcos,
        "dsin": dsin,
        "l_r": l_r,
        "mu": mu,
        "fallback": fallback,
        "n_valid": n_valid,
    }
    return ResidualMatrix(values, valid), cache


def voxelnet_residual_vjp(
    cache: dict, grad_values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_values * residual) w.r.t. both (M, 7) box arrays.

    ``grad_values`` entries at invalid pairs are ignored. Subgradient 0 is
    used at the non-differentiable points (equal dims, equal headings).
    """
    valid = cache["valid"]
    m, n = valid.shape
    grad_prev = np.zeros((m, 7))
    grad_cur = np.zeros((n, 7))
    if not valid.any():
        return grad_prev, grad_cur

    g = np.where(valid, grad_values, 0.0)
    mu = cache["mu"]

    # Center term: values include l_c/mu with mu the mean of l_c over valid
    # pairs, so each l_c entry feeds both its own quotient and mu.
    d_lc = g / mu
    if not cache["fallback"]:
        dmu = -(g * cache["l_c"]).sum() / (mu * mu)
        d_lc = d_lc + np.where(valid, dmu / cache["n_valid"], 0.0)
    d_centers = 2.0 * d_lc[:, :, None] * cache["diff"]  # (M, N, 3)
    grad_prev[:, :3] = d_centers.sum(axis=1)
    grad_cur[:, :3] = -d_centers.sum(axis=0)

    # Dimension term: d|log(a/b)|/da = sign(log(a/b))/a.
    sgn = np.sign(cache["log_ratio"])  # (M, N, 3)
    gd = g[:, :, None] * sgn
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_prev = np.where(cache["prev_dims"] > 0, 1.0 / cache["prev_dims"], 0.0)
        inv_cur = np.where(cache["cur_dims"] > 0, 1.0 / cache["cur_dims"], 0.0)
    grad_prev[:, 3:6] = (gd * inv_prev[:, None, :]).sum(axis=1)
    grad_cur[:, 3:6] = -(gd * inv_cur[None, :, :]).sum(axis=0)

    # Yaw chord term: dL_r/dtheta via the chain through (cos, sin).
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_lr = np.where(cache["l_r"] > 0, 1.0 / cache["l_r"], 0.0)
    glr = g * inv_lr
    dcos, dsin = cache["dcos"], cache["dsin"]
    grad_prev[:, 6] = (
        glr * (dcos * -cache["sin_p"][:, None] + dsin * cache["cos_p"][:, None])
    ).sum(axis=1)
    grad_cur[:, 6] = (
        glr * (dcos * cache["sin_c"][None, :] - dsin * cache["cos_c"][None, :])
    ).sum(axis=0)
    return grad_prev, grad_cur
