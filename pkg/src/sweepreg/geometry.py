"""Rigid 3D poses, cell-center lifting, Kabsch fitting, and RANSAC.

Conventions used throughout the package:
  * points are row vectors in mm; a pose maps p -> R @ p + t
  * grid cells sit on an 8-px lattice; cell index a covers pixels
    [8a, 8a+8) and its center is pixel (a + 0.5) * 8 - 0.5
  * flat cell indices are row-major over the grid extents
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .featnet import DescriptorGrid
    from .matchcore import MatchSet

SINK = -1


class DegenerateConfigurationError(Exception):
    """Kabsch input does not determine a rotation (too few / collinear points)."""


class NoConsensusError(Exception):
    """RANSAC found no model with at least 3 inliers."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class RigidPose:
    """Proper rigid transform: rotation matrix plus translation, both float64."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValueError("rotation matrix is not orthonormal within 1e-6")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation matrix has negative determinant (reflection)")
        r.setflags(write=False)
        t.setflags(write=False)
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self o other: apply ``other`` first, then ``self``."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4) or np.max(np.abs(m[3] - [0, 0, 0, 1])) > 1e-9:
            raise ValueError("expected a 4x4 rigid transform matrix")
        return cls(m[:3, :3], m[:3, 3])


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    a = a / n
    th = math.radians(angle_deg)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(th) * k + (1 - math.cos(th)) * (k @ k)


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-6:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle_deg)
    return rotation_about_axis(axis, angle)


@dataclass
class FrameGeometry:
    """Placement of a 2D frame: pixel spacing (mm) and pixel-to-world pose.

    Pixel (u, v) lifts to the world-space point
    ``frame_to_world.apply([u * s_u, v * s_v, 0])``.
    """

    pixel_spacing_mm: tuple[float, float]
    frame_to_world: RigidPose
    frame_index: int = 0

    def pixel_to_world(self, pixels: np.ndarray) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        local = np.zeros((px.shape[0], 3))
        local[:, 0] = px[:, 0] * self.pixel_spacing_mm[0]
        local[:, 1] = px[:, 1] * self.pixel_spacing_mm[1]
        return self.frame_to_world.apply(local)

    def with_pixel_offset(self, offset_px: tuple[float, float]) -> "FrameGeometry":
        """Geometry of a sub-frame whose pixel (0, 0) is at ``offset_px``."""
        shift = np.array([offset_px[0] * self.pixel_spacing_mm[0],
                          offset_px[1] * self.pixel_spacing_mm[1], 0.0])
        moved = self.frame_to_world.compose(RigidPose(np.eye(3), shift))
        return FrameGeometry(self.pixel_spacing_mm, moved, self.frame_index)

    def to_dict(self) -> dict:
        return {"pixel_spacing_mm": [float(s) for s in self.pixel_spacing_mm],
                "frame_to_world": self.frame_to_world.to_matrix().tolist(),
                "frame_index": int(self.frame_index)}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameGeometry":
        return cls(tuple(d["pixel_spacing_mm"]),
                   RigidPose.from_matrix(d["frame_to_world"]),
                   int(d.get("frame_index", 0)))


# ---------------------------------------------------------------------------
# cell-center lifting

def cell_center_px(cell: Sequence[int], stride_px: int = 8) -> np.ndarray:
    """Center of a descriptor cell in source-image pixel coordinates."""
    idx = np.asarray(cell, dtype=np.float64)
    return (idx + 0.5) * stride_px - 0.5


def lift_us_cell(cell: int, grid: "DescriptorGrid", frame: FrameGeometry) -> np.ndarray:
    """World-space point (mm) of a 2D descriptor cell center."""
    if grid.dimensionality != 2:
        raise ValueError("lift_us_cell expects a 2D descriptor grid")
    if not 0 <= cell < grid.n_cells:
        raise ValueError(f"cell {cell} out of range for grid {grid.grid_dims}")
    multi = np.unravel_index(cell, grid.grid_dims)
    px = cell_center_px(multi, grid.stride_px)
    return frame.pixel_to_world(px[None, :])[0]


def mr_cell_center(cell: int, grid: "DescriptorGrid") -> np.ndarray:
    """MR-space point (mm) of a 3D descriptor cell center."""
    if grid.dimensionality != 3:
        raise ValueError("mr_cell_center expects a 3D descriptor grid")
    if not 0 <= cell < grid.n_cells:
        raise ValueError(f"cell {cell} out of range for grid {grid.grid_dims}")
    multi = np.unravel_index(cell, grid.grid_dims)
    px = cell_center_px(multi, grid.stride_px)
    local = px * np.asarray(grid.spacing_mm, dtype=np.float64)
    return grid.pose.apply(local[None, :])[0]


def nearest_mr_cell(point_mm: np.ndarray, grid: "DescriptorGrid") -> int:
    """Flat index of the grid cell with the nearest center, or SINK.

    A point is outside when its grid-local pixel coordinate leaves the span of
    pixel centers covered by the grid ([0, 8 * extent - 1] per axis).  Ties
    between equidistant centers go to the lower flat index.
    """
    if grid.dimensionality != 3:
        raise ValueError("nearest_mr_cell expects a 3D descriptor grid")
    local = grid.pose.inverse().apply(np.asarray(point_mm, dtype=np.float64)[None, :])[0]
    px = local / np.asarray(grid.spacing_mm, dtype=np.float64)
    s = grid.stride_px
    idx = []
    for p, g in zip(px, grid.grid_dims):
        if p < 0.0 or p > s * g - 1:
            return SINK
        half = (p - (0.5 * s - 0.5)) / s
        a = math.ceil(half - 0.5)  # round half toward the lower index
        idx.append(min(max(a, 0), g - 1))
    return int(np.ravel_multi_index(tuple(idx), grid.grid_dims))


# ---------------------------------------------------------------------------
# pose fitting

def kabsch(points_a: np.ndarray, points_b: np.ndarray,
           weights: np.ndarray | None = None) -> RigidPose:
    """Least-squares proper rigid transform mapping points_a onto points_b."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {n}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(n)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
    wsum = w.sum()
    ca = (w[:, None] * a).sum(axis=0) / wsum
    cb = (w[:, None] * b).sum(axis=0) / wsum
    ac = a - ca
    bc = b - cb
    h = (w[:, None] * ac).T @ bc
    u, s, vt = np.linalg.svd(h)
    # rank < 2 means the points are collinear (or coincident): rotation about
    # the common axis is unconstrained
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise DegenerateConfigurationError("point configuration is collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidPose(r, cb - r @ ca)


@dataclass
class Correspondence3D:
    """A putative 3D-3D point pair with a matching confidence in (0, 1)."""

    us_point_mm: np.ndarray
    mr_point_mm: np.ndarray
    confidence: float


@dataclass
class RansacConfig:
    iterations: int = 1000
    inlier_threshold_mm: float = 10.0
    seed: int = 0
    confidence_sampling: bool = True
    max_redraws: int = 10


def _thin_triple(pts: np.ndarray) -> bool:
    # scalar arithmetic: np.cross on 3-vectors costs ~100x more per call
    ax, ay, az = pts[1, 0] - pts[0, 0], pts[1, 1] - pts[0, 1], pts[1, 2] - pts[0, 2]
    bx, by, bz = pts[2, 0] - pts[0, 0], pts[2, 1] - pts[0, 1], pts[2, 2] - pts[0, 2]
    cx, cy, cz = ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx
    area2 = math.sqrt(cx * cx + cy * cy + cz * cz)
    n1 = math.sqrt(ax * ax + ay * ay + az * az)
    n2 = math.sqrt(bx * bx + by * by + bz * bz)
    return area2 <= 1e-6 * max(n1 * n2, 1e-12)


def ransac_pose(corrs: Sequence[Correspondence3D],
                config: RansacConfig | None = None) -> tuple[RigidPose, list[int]]:
    """Robust rigid fit over putative correspondences.

    Iteration i draws its minimal sample from ``default_rng([seed, i])``, so
    results do not depend on evaluation order.  Degenerate (collinear) samples
    are redrawn up to ``max_redraws`` times without consuming the iteration.
    Best model by inlier count, ties by lower mean inlier residual; the
    returned pose is refit on the winning inlier set.
    """
    cfg = config or RansacConfig()
    n = len(corrs)
    if n < 3:
        raise NoConsensusError(
            f"cannot fit a pose from {n} correspondences (minimal sample is 3)",
            {"n_correspondences": n})
    pts_a = np.array([c.us_point_mm for c in corrs], dtype=np.float64)
    pts_b = np.array([c.mr_point_mm for c in corrs], dtype=np.float64)
    conf = np.array([c.confidence for c in corrs], dtype=np.float64)
    probs = None
    if cfg.confidence_sampling and conf.sum() > 0:
        probs = conf / conf.sum()

    # the per-iteration generator seeding is part of the contract, so samples
    # are drawn sequentially; fitting and scoring then run as one batch
    samples = np.zeros((cfg.iterations, 3), dtype=np.intp)
    kept = np.zeros(cfg.iterations, dtype=bool)
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        for _ in range(cfg.max_redraws + 1):
            idx = rng.choice(n, size=3, replace=False, p=probs)
            if not _thin_triple(pts_a[idx]):
                samples[it] = idx
                kept[it] = True
                break

    best_inliers: np.ndarray | None = None
    if kept.any():
        a = pts_a[samples[kept]]
        b = pts_b[samples[kept]]
        ca = a.mean(axis=1, keepdims=True)
        cb = b.mean(axis=1, keepdims=True)
        h = np.matmul(np.transpose(a - ca, (0, 2, 1)), b - cb)
        u, s, vt = np.linalg.svd(h)
        # rank < 2 is the collinear case kabsch rejects
        ok = s[:, 1] > 1e-9 * np.maximum(s[:, 0], 1e-12)
        d = np.sign(np.linalg.det(np.matmul(np.transpose(vt, (0, 2, 1)),
                                            np.transpose(u, (0, 2, 1)))))
        vt[:, 2, :] *= d[:, None]
        r = np.matmul(np.transpose(vt, (0, 2, 1)), np.transpose(u, (0, 2, 1)))
        t = cb[:, 0, :] - np.einsum("kij,kj->ki", r, ca[:, 0, :])
        res = np.linalg.norm(np.einsum("kij,nj->kni", r, pts_a) + t[:, None, :]
                             - pts_b[None], axis=2)
        inl = res <= cfg.inlier_threshold_mm
        counts = np.where(ok, inl.sum(axis=1), 0)
        mean_res = np.where(counts > 0,
                            (res * inl).sum(axis=1) / np.maximum(counts, 1), np.inf)
        if counts.max() >= 3:
            # highest count, then lowest mean residual, then earliest iteration
            cand = np.flatnonzero(counts == counts.max())
            best_inliers = inl[cand[np.argmin(mean_res[cand])]]

    if best_inliers is None:
        raise NoConsensusError(
            "no pose with at least 3 inliers found",
            {"n_correspondences": n, "iterations": cfg.iterations,
             "inlier_threshold_mm": cfg.inlier_threshold_mm})
    inlier_idx = np.flatnonzero(best_inliers)
    final = kabsch(pts_a[inlier_idx], pts_b[inlier_idx])
    return final, [int(i) for i in inlier_idx]


def fuse_sweep_matches(per_frame: Sequence[tuple["MatchSet", FrameGeometry, "DescriptorGrid"]],
                       mr_grid: "DescriptorGrid") -> list[Correspondence3D]:
    """Lift every per-frame 2D-3D match into one world/MR correspondence set."""
    fused: list[Correspondence3D] = []
    for match_set, frame, us_grid in per_frame:
        for m in match_set.entries:
            p = lift_us_cell(m.us_cell, us_grid, frame)
            q = mr_cell_center(m.mr_cell, mr_grid)
            fused.append(Correspondence3D(p, q, m.confidence))
    return fused


def pose_error(pred: RigidPose, gt: RigidPose,
               reference_points: np.ndarray) -> tuple[float, float]:
    """(rotation error in degrees, mean point displacement in mm)."""
    pts = np.asarray(reference_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 1:
        raise ValueError("pose_error needs at least one reference point")
    rel = pred.rotation @ gt.rotation.T
    cos = (np.trace(rel) - 1.0) / 2.0
    rot_deg = math.degrees(math.acos(min(1.0, max(-1.0, cos))))
    trans_mm = float(np.linalg.norm(pred.apply(pts) - gt.apply(pts), axis=1).mean())
    return rot_deg, trans_mm
