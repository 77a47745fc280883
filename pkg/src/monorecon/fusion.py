"""Truncated signed distance fusion of aligned depth maps into a voxel grid,
with zero-crossing surface extraction.

Voxels store a weighted running average of the clamped signed distance
(positive in front of the surface).  Each frame contributes weight 1, so the
averaging stays order-independent up to float rounding.  Extraction emits a
point cloud by linear interpolation along grid edges between observed voxels
of opposite sign.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, Intrinsics, PoseSE3, pose_to_matrix

MAX_VOXELS = 64_000_000
DEFAULT_DIAG_DIVISIONS = 128


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points disagree in length")

    def __len__(self) -> int:
        return len(self.points)


class TsdfVolume:
    """Axis-aligned voxel grid of clamped signed distances and weights (mm)."""

    def __init__(self, origin, dims, voxel_size: float, trunc: float | None = None) -> None:
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(n) for n in dims)
        if min(self.dims) < 1:
            raise ValueError(f"volume dims must be positive, got {self.dims}")
        if np.prod(self.dims) > MAX_VOXELS:
            raise ValueError(f"volume of {self.dims} voxels exceeds the {MAX_VOXELS} cap")
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.trunc = float(3.0 * voxel_size if trunc is None else trunc)
        if self.trunc < self.voxel_size:
            raise ValueError(
                f"truncation {self.trunc} must be at least one voxel ({self.voxel_size})")
        self.tsdf = np.ones(self.dims)
        self.weight = np.zeros(self.dims)

    @classmethod
    def from_bbox(cls, bbox_min, bbox_max, voxel_size: float | None = None,
                  trunc: float | None = None) -> "TsdfVolume":
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        extent = bbox_max - bbox_min
        if np.any(extent <= 0):
            raise ValueError("bounding box must have positive extent")
        if voxel_size is None:
            voxel_size = float(np.linalg.norm(extent)) / DEFAULT_DIAG_DIVISIONS
        dims = np.maximum(np.ceil(extent / voxel_size).astype(int), 1)
        return cls(bbox_min, dims, voxel_size, trunc)

    def voxel_centers(self) -> np.ndarray:
        """(N, 3) world coordinates of all voxel centers, C-order."""
        ii, jj, kk = np.meshgrid(*(np.arange(n) for n in self.dims), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + np.array(self.dims) * self.voxel_size


def scene_bbox(depths: list[DepthMap], poses: list[PoseSE3], intr: Intrinsics,
               stride: int = 4, margin: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World-space bounding box of the observed surface points."""
    pts = []
    for d, pose in zip(depths, poses):
        m = pose_to_matrix(pose)
        uu, vv = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                             np.arange(intr.height, dtype=np.float64))
        sub = (slice(None, None, stride), slice(None, None, stride))
        mask = d.valid[sub]
        z = d.depth[sub][mask]
        u = uu[sub][mask]
        v = vv[sub][mask]
        local = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)
        pts.append(local @ m[:3, :3].T + m[:3, 3])
    if not pts:
        raise ValueError("no frames supplied for bounding box estimation")
    allpts = np.concatenate(pts, axis=0)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    if margin is None:
        margin = 0.05 * float(np.linalg.norm(hi - lo))
    return lo - margin, hi + margin


def integrate(vol: TsdfVolume, depth: DepthMap, pose: PoseSE3, intr: Intrinsics) -> TsdfVolume:
    """Fuse one aligned depth frame; ``pose`` is camera-to-world.

    Standard weighted-average update over voxels that project into valid
    pixels and lie within the truncation band (never more than one truncation
    behind the observed surface).  Frames with no coverage are no-ops.
    """
    m = pose_to_matrix(pose)
    centers = vol.voxel_centers()
    cam = (centers - m[:3, 3]) @ m[:3, :3]          # R^T (x - t)
    z = cam[:, 2]
    in_front = z > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    in_image = in_front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    ui, vi = np.clip(ui, 0, intr.width - 1), np.clip(vi, 0, intr.height - 1)
    pix_valid = depth.valid[vi, ui] & in_image
    sdf = depth.depth[vi, ui] - z
    update = pix_valid & (sdf >= -vol.trunc)
    if not update.any():
        return vol
    obs = np.clip(sdf[update] / vol.trunc, -1.0, 1.0)
    flat_idx = np.flatnonzero(update)
    w_old = vol.weight.reshape(-1)[flat_idx]
    t_old = vol.tsdf.reshape(-1)[flat_idx]
    vol.tsdf.reshape(-1)[flat_idx] = (t_old * w_old + obs) / (w_old + 1.0)
    vol.weight.reshape(-1)[flat_idx] = w_old + 1.0
    return vol


def extract_surface(vol: TsdfVolume) -> PointCloud:
    """Zero-crossing points along grid edges between observed voxels."""
    if not (vol.weight > 0).any():
        warnings.warn("extracting surface from an empty TSDF volume")
        return PointCloud(np.empty((0, 3)))
    observed = vol.weight > 0
    pts = []
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(None, -1)
        sl_b[axis] = slice(1, None)
        a = vol.tsdf[tuple(sl_a)]
        b = vol.tsdf[tuple(sl_b)]
        both = observed[tuple(sl_a)] & observed[tuple(sl_b)]
        crossing = both & ((a <= 0) != (b <= 0)) & (a != b)
        if not crossing.any():
            continue
        idx = np.argwhere(crossing).astype(np.float64)
        av = a[crossing]
        bv = b[crossing]
        t = av / (av - bv)
        centers = idx + 0.5
        centers[:, axis] += t
        pts.append(vol.origin + centers * vol.voxel_size)
    if not pts:
        warnings.warn("TSDF volume has observations but no sign change")
        return PointCloud(np.empty((0, 3)))
    return PointCloud(np.concatenate(pts, axis=0))
