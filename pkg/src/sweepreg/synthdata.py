"""Synthetic phantom generation: a shared latent anatomy rendered through two
different monotone intensity maps gives paired MR volumes and tracked US-like
sweeps with exactly known ground truth.

Generation is deterministic per (spec, sample_index); every random draw comes
from one ``default_rng([seed, sample_index])`` stream in a fixed order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import map_coordinates
from scipy.spatial import ConvexHull

from .cmt import read_cmt, write_cmt
from .featnet import DescriptorGrid
from .geometry import (SINK, FrameGeometry, RigidPose, lift_us_cell, nearest_mr_cell,
                       random_rotation, rotation_about_axis)
from .matchcore import GroundTruthCorrespondence

SWEEP_CLASSES = ("transverse", "tilted")

_DEFAULT_MR_MAP = ((0.0, 0.0), (0.25, 0.12), (0.5, 0.55), (0.75, 0.82), (1.0, 1.0))
_DEFAULT_US_MAP = ((0.0, 0.05), (0.3, 0.5), (0.55, 0.62), (0.8, 0.72), (1.0, 0.95))


@dataclass
class PhantomSpec:
    seed: int = 0
    volume_dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 1.25
    frame_dims: tuple[int, int] = (64, 64)
    frame_spacing_mm: tuple[float, float] = (1.25, 1.25)
    n_frames: int = 16
    n_ellipsoids: int = 14
    n_tubes: int = 4
    mr_intensity_map: tuple = _DEFAULT_MR_MAP
    us_intensity_map: tuple = _DEFAULT_US_MAP
    noise_sigma: float = 0.03
    speckle_sigma: float = 0.25
    speckle_grain_px: float = 3.0
    fan_enabled: bool = True
    fan_correlation: str = "none"  # "none" | "pose"
    transverse_tilt_deg: float = 14.0
    tilted_tilt_range_deg: tuple[float, float] = (25.0, 40.0)
    step_mm_range: tuple[float, float] = (1.6, 2.6)
    wobble_deg: float = 1.2
    path_jitter_mm: float = 6.0
    minority_fraction: float = 0.25
    gt_rotation_max_deg: float = 35.0
    gt_translation_max_mm: float = 15.0
    deformation_mm: float = 0.0
    deformation_control_dims: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        if self.fan_correlation not in ("none", "pose"):
            raise ValueError(f"fan_correlation must be 'none' or 'pose', got "
                             f"{self.fan_correlation!r}")
        for name in ("mr_intensity_map", "us_intensity_map"):
            pts = getattr(self, name)
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            if any(b <= a for a, b in zip(xs, xs[1:])) or any(b < a for a, b in zip(ys, ys[1:])):
                raise ValueError(f"{name} must be monotone with strictly increasing knots")

    def to_dict(self) -> dict:
        d = {}
        for k, v in self.__dict__.items():
            if isinstance(v, tuple):
                v = [list(p) if isinstance(p, (tuple, list)) else p for p in v]
            d[k] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kw = dict(d)
        for name in ("volume_dims", "frame_dims", "frame_spacing_mm", "step_mm_range",
                     "tilted_tilt_range_deg", "deformation_control_dims"):
            if name in kw:
                kw[name] = tuple(kw[name])
        for name in ("mr_intensity_map", "us_intensity_map"):
            if name in kw:
                kw[name] = tuple(tuple(p) for p in kw[name])
        return cls(**kw)


@dataclass
class DeformationField:
    """Smooth displacement field from a cubic-interpolated control grid.

    The global rigid (linearized) component is projected out at construction
    time so the stored ground-truth pose remains the rigid best fit.  Queries
    outside the control extent are clamped to the boundary.
    """

    origin_mm: np.ndarray
    control_spacing_mm: np.ndarray
    displacements: np.ndarray  # (3, n0, n1, n2), mm
    max_displacement_mm: float

    def __post_init__(self):
        self.origin_mm = np.asarray(self.origin_mm, dtype=np.float64).reshape(3)
        self.control_spacing_mm = np.asarray(self.control_spacing_mm,
                                             dtype=np.float64).reshape(3)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.displacements.ndim != 4 or self.displacements.shape[0] != 3:
            raise ValueError(f"displacements must be (3, n0, n1, n2), got "
                             f"{self.displacements.shape}")
        grids = [self.origin_mm[a] + self.control_spacing_mm[a]
                 * np.arange(self.displacements.shape[1 + a]) for a in range(3)]
        self._interp = [RegularGridInterpolator(grids, self.displacements[a],
                                                method="cubic", bounds_error=False,
                                                fill_value=None) for a in range(3)]
        self._bounds = [(g[0], g[-1]) for g in grids]

    def displacement_at(self, points_mm: np.ndarray) -> np.ndarray:
        p = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3).copy()
        for a, (lo, hi) in enumerate(self._bounds):
            p[:, a] = np.clip(p[:, a], lo, hi)
        return np.stack([it(p) for it in self._interp], axis=1)

    @classmethod
    def random(cls, rng: np.random.Generator, extent_mm: np.ndarray,
               control_dims: tuple[int, int, int], max_displacement_mm: float
               ) -> "DeformationField":
        extent = np.asarray(extent_mm, dtype=np.float64)
        dims = np.asarray(control_dims, dtype=int)
        spacing = extent * 1.5 / (dims - 1)
        origin = -0.25 * extent
        disp = rng.normal(size=(3, *control_dims))
        ctrl = np.stack(np.meshgrid(*[origin[a] + spacing[a] * np.arange(dims[a])
                                      for a in range(3)], indexing="ij"), axis=-1)
        r = ctrl.reshape(-1, 3)
        d = disp.reshape(3, -1).T
        # least-squares rigid (t + omega x r) projected out; cubic interpolation
        # reproduces this linear field exactly, so subtracting it at the control
        # points removes it from the whole field
        a_mat = np.zeros((3 * len(r), 6))
        for i, ri in enumerate(r):
            a_mat[3 * i:3 * i + 3, :3] = np.eye(3)
            a_mat[3 * i:3 * i + 3, 3:] = -_skew(ri)
        sol, *_ = np.linalg.lstsq(a_mat, d.reshape(-1), rcond=None)
        t, omega = sol[:3], sol[3:]
        d_res = d - (t + np.cross(omega, r))
        disp = d_res.T.reshape(3, *control_dims)
        peak = np.linalg.norm(disp, axis=0).max()
        if peak > 0:
            disp = disp * (max_displacement_mm / peak)
        return cls(origin, spacing, disp, float(max_displacement_mm))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


@dataclass
class PhantomSample:
    sample_id: str
    mr_volume: np.ndarray
    spacing_mm: tuple[float, float, float]
    frames: list[np.ndarray]
    frame_geometries: list[FrameGeometry]
    gt_registration: RigidPose | None  # world (tracking) -> MR space
    deformation: DeformationField | None
    sweep_class: str


# ---------------------------------------------------------------------------
# interpolation

def sample_trilinear(volume: np.ndarray, points_px: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at fractional voxel coordinates.

    Points outside the span of voxel centers ([0, n-1] per axis) return 0;
    this is the interpolation-valid region used for sink decisions.
    """
    vol = np.asarray(volume)
    p = np.asarray(points_px, dtype=np.float64).reshape(-1, 3)
    dims = np.array(vol.shape)
    inside = np.all((p >= 0.0) & (p <= dims - 1), axis=1)
    out = np.zeros(p.shape[0], dtype=np.float64)
    if not inside.any():
        return out
    q = p[inside]
    i0 = np.minimum(np.floor(q).astype(int), dims - 2)
    i0 = np.maximum(i0, 0)
    f = q - i0
    acc = np.zeros(q.shape[0], dtype=np.float64)
    for corner in range(8):
        off = [(corner >> a) & 1 for a in range(3)]
        wgt = np.ones(q.shape[0], dtype=np.float64)
        for a in range(3):
            wgt *= f[:, a] if off[a] else (1.0 - f[:, a])
        acc += wgt * vol[i0[:, 0] + off[0], i0[:, 1] + off[1], i0[:, 2] + off[2]]
    out[inside] = acc
    return out


def resample_uniform(volume: np.ndarray, spacing_mm, target_mm: float = 1.25
                     ) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Resample an (an)isotropic volume to uniform spacing with trilinear
    interpolation; output extents are chosen to stay inside the source grid."""
    if target_mm <= 0:
        raise ValueError(f"target spacing must be positive, got {target_mm}")
    vol = np.asarray(volume, dtype=np.float64)
    sp = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), (3,))
    if np.any(sp <= 0):
        raise ValueError(f"source spacing must be positive, got {sp}")
    new_dims = tuple(int(math.floor((n - 1) * s / target_mm)) + 1
                     for n, s in zip(vol.shape, sp))
    axes = [np.arange(n) * target_mm / s for n, s in zip(new_dims, sp)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = sample_trilinear(vol, grid).reshape(new_dims)
    return vals.astype(np.float32), (target_mm,) * 3


def _value_noise(rng: np.random.Generator, dims: Sequence[int], grain: float) -> np.ndarray:
    """Smooth unit-scale noise: coarse normal grid, linearly upsampled."""
    coarse = [max(2, int(math.ceil((n - 1) / grain)) + 1) for n in dims]
    g = rng.normal(size=coarse)
    coords = np.meshgrid(*[np.arange(n) / grain for n in dims], indexing="ij")
    return map_coordinates(g, coords, order=1, mode="nearest")


# ---------------------------------------------------------------------------
# anatomy and rendering

def _render_anatomy(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    dims = spec.volume_dims
    sp = spec.spacing_mm
    extent = np.array(dims, dtype=np.float64) * sp
    pos = np.stack(np.meshgrid(*[np.arange(n) * sp for n in dims], indexing="ij"),
                   axis=-1)
    field = 0.4 + 0.12 * _value_noise(rng, dims, grain=12.0)
    flat = pos.reshape(-1, 3)
    for _ in range(spec.n_ellipsoids):
        center = rng.uniform(0.15, 0.85, size=3) * extent
        axes = rng.uniform(5.0, 18.0, size=3)
        rot = random_rotation(rng)
        val = rng.uniform(0.05, 0.95)
        local = (flat - center) @ rot  # rotate into ellipsoid frame
        q = np.sum((local / axes) ** 2, axis=1)
        alpha = 0.5 * (1.0 - np.tanh((q - 1.0) / 0.24))
        field = field.reshape(-1) * (1 - alpha) + val * alpha
        field = field.reshape(dims)
    for _ in range(spec.n_tubes):
        axis = rng.integers(0, 3)
        p0 = rng.uniform(0.1, 0.9, size=3) * extent
        p1 = rng.uniform(0.1, 0.9, size=3) * extent
        p0[axis] = 0.0
        p1[axis] = extent[axis]
        radius = rng.uniform(1.5, 4.0)
        val = rng.uniform(0.05, 0.95)
        seg = p1 - p0
        t = np.clip((flat - p0) @ seg / (seg @ seg), 0.0, 1.0)
        dist = np.linalg.norm(flat - (p0 + t[:, None] * seg), axis=1)
        alpha = 0.5 * (1.0 - np.tanh((dist - radius) / 1.6))
        field = field.reshape(-1) * (1 - alpha) + val * alpha
        field = field.reshape(dims)
    return np.clip(field, 0.0, 1.0)


def _apply_intensity_map(anatomy: np.ndarray, curve) -> np.ndarray:
    xs = np.array([p[0] for p in curve], dtype=np.float64)
    ys = np.array([p[1] for p in curve], dtype=np.float64)
    return np.interp(anatomy, xs, ys)


def _frame_pose_in_mr(center_mm: np.ndarray, basis: np.ndarray,
                      spec: PhantomSpec) -> RigidPose:
    """Pose mapping frame pixel mm-coords to MR space with the frame's middle
    pixel at ``center_mm``.  ``basis`` columns are (e_u, e_v, normal)."""
    half = np.array([(spec.frame_dims[0] - 1) / 2 * spec.frame_spacing_mm[0],
                     (spec.frame_dims[1] - 1) / 2 * spec.frame_spacing_mm[1], 0.0])
    return RigidPose(basis, center_mm - basis @ half)


def _sweep_poses(rng: np.random.Generator, spec: PhantomSpec,
                 sweep_class: str) -> list[RigidPose]:
    extent = np.array(spec.volume_dims, dtype=np.float64) * spec.spacing_mm
    center = extent / 2
    if sweep_class == "transverse":
        tilt = rng.uniform(0.0, spec.transverse_tilt_deg)
    else:
        tilt = rng.uniform(*spec.tilted_tilt_range_deg)
    tilt_axis = np.array([math.cos(a := rng.uniform(0, 2 * math.pi)), math.sin(a), 0.0])
    base = rotation_about_axis(tilt_axis, tilt)  # columns of identity -> tilted basis
    step = rng.uniform(*spec.step_mm_range)
    path_center = center + rng.uniform(-spec.path_jitter_mm, spec.path_jitter_mm, size=3)
    normal = base[:, 2]
    poses = []
    orient = base
    for k in range(spec.n_frames):
        c = path_center + (k - (spec.n_frames - 1) / 2) * step * normal
        poses.append(_frame_pose_in_mr(c, orient, spec))
        wob_axis = rng.normal(size=3)
        wob_deg = rng.uniform(0.0, spec.wobble_deg)
        orient = rotation_about_axis(wob_axis, wob_deg) @ orient
    return poses


def _fan_mask(spec: PhantomSpec, rng: np.random.Generator, frame_index: int) -> np.ndarray:
    w, h = spec.frame_dims
    if spec.fan_correlation == "pose":
        # mask geometry deterministically encodes sweep position: a shortcut
        # feature available at train time unless masking augmentation breaks it
        frac = frame_index / max(spec.n_frames - 1, 1)
        half_angle = math.radians(22.0 + 16.0 * frac)
        apex_u, apex_v = (w - 1) / 2, -8.0
        r_max = (h + 8.0) * 0.98
    else:
        half_angle = math.radians(rng.uniform(22.0, 38.0))
        apex_u = (w - 1) / 2 + rng.uniform(-6.0, 6.0)
        apex_v = -rng.uniform(4.0, 16.0)
        r_max = (h - apex_v) * rng.uniform(0.92, 1.02)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    du = uu - apex_u
    dv = vv - apex_v
    ang = np.arctan2(du, dv)
    rad = np.hypot(du, dv)
    return ((np.abs(ang) <= half_angle) & (rad <= r_max)).astype(np.float64)


def _render_frame(us_volume: np.ndarray, spec: PhantomSpec, pose_mr: RigidPose,
                  deformation: DeformationField | None,
                  rng: np.random.Generator, frame_index: int) -> np.ndarray:
    w, h = spec.frame_dims
    uu, vv = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    local = np.stack([uu * spec.frame_spacing_mm[0], vv * spec.frame_spacing_mm[1],
                      np.zeros_like(uu, dtype=np.float64)], axis=-1).reshape(-1, 3)
    pos = pose_mr.apply(local)
    if deformation is not None:
        pos = pos + deformation.displacement_at(pos)
    img = sample_trilinear(us_volume, pos / spec.spacing_mm).reshape(w, h)
    if spec.speckle_sigma > 0:
        img = img * (1.0 + spec.speckle_sigma
                     * _value_noise(rng, (w, h), spec.speckle_grain_px))
    if spec.noise_sigma > 0:
        img = img + rng.normal(scale=spec.noise_sigma, size=(w, h))
    img = np.clip(img, 0.0, 1.0)
    if spec.fan_enabled:
        img = img * _fan_mask(spec, rng, frame_index)
    return img.astype(np.float32)


def _containment_fraction(pose_mr: RigidPose, spec: PhantomSpec) -> float:
    w, h = spec.frame_dims
    uu, vv = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    local = np.stack([uu * spec.frame_spacing_mm[0], vv * spec.frame_spacing_mm[1],
                      np.zeros_like(uu, dtype=np.float64)], axis=-1).reshape(-1, 3)
    px = pose_mr.apply(local) / spec.spacing_mm
    dims = np.array(spec.volume_dims)
    inside = np.all((px >= 0.0) & (px <= dims - 1), axis=1)
    return float(inside.mean())


def generate_phantom(spec: PhantomSpec, sample_index: int = 0) -> PhantomSample:
    """Build one paired (MR volume, tracked sweep) sample with known pose."""
    rng = np.random.default_rng([spec.seed, sample_index])
    anatomy = _render_anatomy(rng, spec)
    mr = _apply_intensity_map(anatomy, spec.mr_intensity_map).astype(np.float32)
    us_volume = _apply_intensity_map(anatomy, spec.us_intensity_map)
    sweep_class = SWEEP_CLASSES[1] if rng.uniform() < spec.minority_fraction else SWEEP_CLASSES[0]
    poses_mr = None
    for _ in range(20):
        candidate = _sweep_poses(rng, spec, sweep_class)
        if min(_containment_fraction(p, spec) for p in candidate) >= 0.5:
            poses_mr = candidate
            break
    if poses_mr is None:
        raise RuntimeError("could not place a sweep with >= 50% of every frame "
                           "inside the volume; check spec geometry")
    rot = random_rotation(rng, spec.gt_rotation_max_deg)
    trans = rng.uniform(-spec.gt_translation_max_mm, spec.gt_translation_max_mm, size=3)
    gt = RigidPose(rot, trans)  # world -> MR
    gt_inv = gt.inverse()
    deformation = None
    if spec.deformation_mm > 0:
        extent = np.array(spec.volume_dims, dtype=np.float64) * spec.spacing_mm
        deformation = DeformationField.random(rng, extent, spec.deformation_control_dims,
                                              spec.deformation_mm)
    frames, geoms = [], []
    for k, pose_mr in enumerate(poses_mr):
        frames.append(_render_frame(us_volume, spec, pose_mr, deformation, rng, k))
        geoms.append(FrameGeometry(spec.frame_spacing_mm, gt_inv.compose(pose_mr), k))
    return PhantomSample(sample_id=f"s{sample_index:04d}", mr_volume=mr,
                         spacing_mm=(spec.spacing_mm,) * 3, frames=frames,
                         frame_geometries=geoms, gt_registration=gt,
                         deformation=deformation, sweep_class=sweep_class)


# ---------------------------------------------------------------------------
# ground truth

def derive_ground_truth(sample: PhantomSample, frame_index: int,
                        us_grid: DescriptorGrid, mr_grid: DescriptorGrid,
                        frame_geometry: FrameGeometry | None = None
                        ) -> list[GroundTruthCorrespondence]:
    """Map every frame cell center through tracking, the ground-truth pose,
    and any deformation; attach the nearest MR cell or SINK."""
    frame = frame_geometry or sample.frame_geometries[frame_index]
    corrs = []
    for i in range(us_grid.n_cells):
        p = lift_us_cell(i, us_grid, frame)
        q = sample.gt_registration.apply(p[None, :])[0]
        if sample.deformation is not None:
            q = q + sample.deformation.displacement_at(q[None, :])[0]
        corrs.append(GroundTruthCorrespondence(
            us_cell=i, us_point_mm=p, mr_point_mm=q,
            mr_cell=nearest_mr_cell(q, mr_grid)))
    return corrs


# ---------------------------------------------------------------------------
# augmentations

def augment_noise(frame: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise, clipped back to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return frame.astype(np.float32, copy=True)
    out = frame + rng.normal(scale=sigma, size=frame.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_random_crop(frame: np.ndarray, geometry: FrameGeometry,
                        rng: np.random.Generator, min_keep: float = 0.75
                        ) -> tuple[np.ndarray, FrameGeometry, tuple[int, int]]:
    """Axis-aligned crop keeping >= min_keep of each extent; the returned
    geometry shifts the pixel origin so world positions stay exact."""
    if not 0.0 < min_keep <= 1.0:
        raise ValueError(f"min_keep must be in (0, 1], got {min_keep}")
    sizes, offs = [], []
    for n in frame.shape:
        lo = max(8, int(math.ceil(min_keep * n)))
        size = int(rng.integers(lo, n + 1))
        off = int(rng.integers(0, n - size + 1))
        sizes.append(size)
        offs.append(off)
    cropped = frame[offs[0]:offs[0] + sizes[0], offs[1]:offs[1] + sizes[1]].copy()
    return cropped, geometry.with_pixel_offset((offs[0], offs[1])), (offs[0], offs[1])


def polygon_mask(polygon: np.ndarray, frame_dims: tuple[int, int]) -> np.ndarray:
    """Binary inside-mask of a CCW convex polygon via half-plane tests.

    A pixel center is inside when it lies on the non-negative side of every
    edge; pixels strictly outside any edge are zeroed.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    uu, vv = np.meshgrid(np.arange(frame_dims[0]), np.arange(frame_dims[1]),
                         indexing="ij")
    inside = np.ones(frame_dims, dtype=bool)
    k = len(poly)
    for a in range(k):
        p0 = poly[a]
        p1 = poly[(a + 1) % k]
        e = p1 - p0
        cross = e[0] * (vv - p0[1]) - e[1] * (uu - p0[0])
        inside &= cross >= 0.0
    return inside


def augment_polycrop(frame: np.ndarray, rng: np.random.Generator,
                     min_coverage: float = 0.6, n_vertices: tuple[int, int] = (5, 10)
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Zero everything outside a random convex polygon (intensities only, the
    frame geometry is untouched).  Returns (masked frame, CCW vertices).

    Vertex count lands in ``n_vertices`` and the polygon covers at least
    ``min_coverage`` of the frame; draws are retried until both hold.
    """
    w, h = frame.shape
    for _ in range(200):
        n_pts = int(rng.integers(n_vertices[0], n_vertices[1] + 1))
        center = np.array([(w - 1) / 2, (h - 1) / 2]) + rng.uniform(-0.1, 0.1) * np.array([w, h])
        radii = np.array([w, h]) / 2 * rng.uniform(0.85, 1.25, size=2)
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=n_pts))
        pts = center + np.stack([radii[0] * np.cos(angles), radii[1] * np.sin(angles)],
                                axis=1) * rng.uniform(0.7, 1.1, size=(n_pts, 1))
        if len(np.unique(pts.round(6), axis=0)) < 3:
            continue
        hull = ConvexHull(pts)
        poly = pts[hull.vertices]  # CCW in 2D
        if not n_vertices[0] <= len(poly) <= n_vertices[1]:
            continue
        mask = polygon_mask(poly, frame.shape)
        if mask.mean() >= min_coverage:
            return (frame * mask).astype(np.float32), poly
    raise RuntimeError("polygon mask drawing failed to satisfy coverage/vertex bounds")


# ---------------------------------------------------------------------------
# class-balanced sampling

class ClassBalancedSampler:
    """Oversample the minority class: each draw picks the minority class with
    probability ``minority_ratio``, then a uniform sample within the class."""

    def __init__(self, labels: Sequence[str], minority_ratio: float = 0.5):
        if not labels:
            raise ValueError("sampler needs at least one labeled sample")
        if not 0.0 <= minority_ratio <= 1.0:
            raise ValueError(f"minority_ratio must be in [0, 1], got {minority_ratio}")
        self.labels = list(labels)
        self.minority_ratio = float(minority_ratio)
        by_class: dict[str, list[int]] = {}
        for i, lab in enumerate(self.labels):
            by_class.setdefault(lab, []).append(i)
        counts = sorted(by_class.items(), key=lambda kv: (len(kv[1]), kv[0]))
        self.minority_class = counts[0][0] if len(counts) > 1 else None
        self._minority = np.array(by_class[counts[0][0]]) if len(counts) > 1 else None
        rest = [i for k, idx in counts[1:] for i in idx]
        self._rest = np.array(rest) if rest else None

    def draw(self, rng: np.random.Generator) -> int:
        if self._minority is None or self._rest is None:
            return int(rng.integers(0, len(self.labels)))
        if rng.uniform() < self.minority_ratio:
            return int(self._minority[rng.integers(0, len(self._minority))])
        return int(self._rest[rng.integers(0, len(self._rest))])


# ---------------------------------------------------------------------------
# dataset layout

def save_sample(root: str | Path, sample: PhantomSample) -> Path:
    out = Path(root) / sample.sample_id
    (out / "frames").mkdir(parents=True, exist_ok=True)
    write_cmt(out / "mr.cmt", sample.mr_volume)
    (out / "mr.json").write_text(json.dumps(
        {"spacing_mm": list(sample.spacing_mm), "dims": list(sample.mr_volume.shape)},
        sort_keys=True, indent=2) + "\n")
    for k, (frame, geom) in enumerate(zip(sample.frames, sample.frame_geometries)):
        write_cmt(out / "frames" / f"{k}.cmt", frame)
        (out / "frames" / f"{k}.json").write_text(
            json.dumps(geom.to_dict(), sort_keys=True, indent=2) + "\n")
    gt: dict = {"sweep_class": sample.sweep_class, "deformation": None}
    if sample.gt_registration is not None:
        gt["gt_registration"] = sample.gt_registration.to_matrix().tolist()
    if sample.deformation is not None:
        write_cmt(out / "deform.cmt", sample.deformation.displacements.astype(np.float32))
        gt["deformation"] = {
            "file": "deform.cmt",
            "origin_mm": sample.deformation.origin_mm.tolist(),
            "control_spacing_mm": sample.deformation.control_spacing_mm.tolist(),
            "max_displacement_mm": sample.deformation.max_displacement_mm}
    (out / "gt.json").write_text(json.dumps(gt, sort_keys=True, indent=2) + "\n")
    return out


def load_sample(path: str | Path) -> PhantomSample:
    root = Path(path)
    mr_meta = json.loads((root / "mr.json").read_text())
    mr = read_cmt(root / "mr.cmt")
    if list(mr.shape) != list(mr_meta["dims"]):
        raise ValueError(f"mr volume dims {mr.shape} != metadata {mr_meta['dims']}")
    gt = json.loads((root / "gt.json").read_text()) if (root / "gt.json").exists() else {}
    frames, geoms = [], []
    for k in range(len(list((root / "frames").glob("*.cmt")))):
        frames.append(read_cmt(root / "frames" / f"{k}.cmt"))
        geoms.append(FrameGeometry.from_dict(
            json.loads((root / "frames" / f"{k}.json").read_text())))
    deformation = None
    if gt.get("deformation"):
        d = gt["deformation"]
        deformation = DeformationField(
            np.array(d["origin_mm"]), np.array(d["control_spacing_mm"]),
            read_cmt(root / d["file"]).astype(np.float64), d["max_displacement_mm"])
    pose = RigidPose.from_matrix(gt["gt_registration"]) if "gt_registration" in gt else None
    return PhantomSample(sample_id=root.name, mr_volume=mr,
                         spacing_mm=tuple(mr_meta["spacing_mm"]), frames=frames,
                         frame_geometries=geoms, gt_registration=pose,
                         deformation=deformation,
                         sweep_class=gt.get("sweep_class", "transverse"))


def generate_dataset(spec: PhantomSpec, n_samples: int, out_dir: str | Path) -> dict:
    """Generate and save ``n_samples`` phantoms plus a dataset.json index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx in range(n_samples):
        sample = generate_phantom(spec, idx)
        save_sample(out, sample)
        entries.append({"id": sample.sample_id, "class": sample.sweep_class,
                        "n_frames": len(sample.frames)})
    index = {"samples": entries, "spec": spec.to_dict(), "n_samples": n_samples}
    (out / "dataset.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    return index


def load_dataset_index(path: str | Path) -> dict:
    return json.loads((Path(path) / "dataset.json").read_text())
