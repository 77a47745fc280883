"""Pinhole camera model, rigid motions, and depth/image warping.

Conventions (fixed here because they interact with bilinear sampling):

* pixel centers sit at integer coordinates (u, v) in [0, W-1] x [0, H-1],
  and the homogeneous pixel is (u, v, 1);
* a projected point with camera-frame z <= 1e-6 mm is invalid;
* samples whose 2x2 bilinear support leaves the image are invalid rather
  than clamped, so out-of-view pixels never bias a loss.

The warping math is written with :mod:`monorecon.autodiff` operations, so
depths, poses, and intrinsics may be either numpy arrays or tape variables.
Validity masks are always plain boolean arrays computed from current values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as dn

MIN_PROJECTED_DEPTH_MM = 1e-6

# generators of the rotation algebra: skew(r) = rx*_EX + ry*_EY + rz*_EZ
_EX = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
_EY = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
_EZ = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass
class Intrinsics:
    """Pinhole parameters in pixels plus the image size they refer to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class PoseSE3:
    """Rigid motion: axis-angle rotation (radians * unit axis) + translation (mm).

    Acts on points as X' = R X + t.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        angle = float(np.linalg.norm(self.rotation))
        if angle >= math.pi + 1e-9:
            raise ValueError(f"axis-angle norm {angle} outside canonical range [0, pi)")

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.zeros(3), np.zeros(3))


class DepthMap:
    """Per-pixel positive depths in millimeters with a validity mask.

    Non-positive or non-finite entries are invalidated on construction, so
    the invariant "valid pixels have depth > 0 and finite" always holds.
    """

    __slots__ = ("depth", "valid")

    def __init__(self, depth, valid=None) -> None:
        self.depth = np.asarray(depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {self.depth.shape}")
        if valid is None:
            valid = np.ones(self.depth.shape, dtype=bool)
        self.valid = np.asarray(valid, dtype=bool)
        if self.valid.shape != self.depth.shape:
            raise ValueError("depth and valid shapes differ")
        with np.errstate(invalid="ignore"):
            self.valid = self.valid & np.isfinite(self.depth) & (self.depth > 0)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


class Image:
    """Intensity image with values clamped to [0, 1]; 1 or 3 channels."""

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            pass
        elif values.ndim == 3 and values.shape[2] in (1, 3):
            if values.shape[2] == 1:
                values = values[:, :, 0]
        else:
            raise ValueError(f"expected HxW or HxWx3 values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite")
        self.values = np.clip(values, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]


# ---------------------------------------------------------------------------
# rigid motions


def rodrigues(rvec):
    """Rotation matrix exp([r]x) from an axis-angle vector (array or Var)."""
    theta_sq = dn.asum(dn.mul(rvec, rvec))
    rx = dn.gather(rvec, 0)
    ry = dn.gather(rvec, 1)
    rz = dn.gather(rvec, 2)
    K = dn.add(dn.add(dn.mul(rx, _EX), dn.mul(ry, _EY)), dn.mul(rz, _EZ))
    if float(dn.value(theta_sq)) < 1e-16:
        # series in theta^2, smooth at zero: sin(t)/t and (1-cos t)/t^2
        a = dn.sub(1.0, dn.div(theta_sq, 6.0))
        b = dn.sub(0.5, dn.div(theta_sq, 24.0))
    else:
        theta = dn.sqrt(theta_sq)
        a = dn.div(dn.sin(theta), theta)
        b = dn.div(dn.sub(1.0, dn.cos(theta)), theta_sq)
    return dn.add(np.eye(3), dn.add(dn.mul(a, K), dn.mul(b, dn.matmul(K, K))))


def pose_to_matrix(p: PoseSE3) -> np.ndarray:
    """Homogeneous 4x4 form with bottom row (0, 0, 0, 1)."""
    m = np.eye(4)
    m[:3, :3] = rodrigues(p.rotation)
    m[:3, 3] = p.translation
    return m


def matrix_to_pose(m: np.ndarray) -> PoseSE3:
    """Log map of a 4x4 rigid transform back to the canonical axis-angle form."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
    rvec = Rotation.from_matrix(m[:3, :3]).as_rotvec()
    return PoseSE3(rvec, m[:3, 3])


def pose_inverse(p: PoseSE3) -> PoseSE3:
    r_inv = -p.rotation
    t_inv = -(rodrigues(r_inv) @ p.translation)
    return PoseSE3(r_inv, t_inv)


def pose_compose(outer: PoseSE3, inner: PoseSE3) -> PoseSE3:
    """Pose acting as X -> outer(inner(X))."""
    return matrix_to_pose(pose_to_matrix(outer) @ pose_to_matrix(inner))


# ---------------------------------------------------------------------------
# projection and warping


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat (u, v) coordinates of every pixel center, row-major."""
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return uu.reshape(-1), vv.reshape(-1)


def project_flat(depth_flat, uu, vv, R, t, intr_target, intr_source):
    """Back-project target pixels by depth, transform, re-project into source.

    ``intr_*`` are (fx, fy, cx, cy) tuples whose entries may be floats or
    scalar Vars.  Returns (us, vs, z_source) as flat arrays/Vars; validity is
    left to the caller.
    """
    fx, fy, cx, cy = intr_target
    x = dn.mul(dn.div(dn.sub(uu, cx), fx), depth_flat)
    y = dn.mul(dn.div(dn.sub(vv, cy), fy), depth_flat)
    pts = dn.stack([x, y, depth_flat])                  # (3, N)
    moved = dn.add(dn.matmul(R, pts), dn.reshape(t, (3, 1)))
    n = len(dn.value(uu))
    xs = dn.gather(moved, np.arange(n))
    ys = dn.gather(moved, np.arange(n, 2 * n))
    zs = dn.gather(moved, np.arange(2 * n, 3 * n))
    fxs, fys, cxs, cys = intr_source
    us = dn.add(dn.div(dn.mul(fxs, xs), zs), cxs)
    vs = dn.add(dn.div(dn.mul(fys, ys), zs), cys)
    return us, vs, zs


@dataclass
class WarpCoords:
    """Per-pixel source coordinates of a depth-driven warp."""

    us: np.ndarray          # (H, W) source column coordinate
    vs: np.ndarray          # (H, W) source row coordinate
    source_depth: np.ndarray  # (H, W) target depth expressed in the source frame
    valid: np.ndarray       # (H, W) bool


def warp_coords(d: DepthMap, pose: PoseSE3, k: Intrinsics) -> WarpCoords:
    """Source-frame coordinates for every target pixel.

    Back-projects each pixel by its depth, applies the pose, re-projects.
    A pixel is invalid if it was invalid in the input depth, if it projects
    behind the camera, or if it lands outside the image bounds.
    """
    if (d.height, d.width) != (k.height, k.width):
        raise ValueError(
            f"depth {d.height}x{d.width} does not match intrinsics {k.height}x{k.width}"
        )
    uu, vv = pixel_grid(k.width, k.height)
    R = rodrigues(pose.rotation)
    intr = (k.fx, k.fy, k.cx, k.cy)
    depth_safe = np.where(d.valid, d.depth, 1.0).reshape(-1)
    us, vs, zs = project_flat(depth_safe, uu, vv, R, pose.translation, intr, intr)
    us = us.reshape(d.depth.shape)
    vs = vs.reshape(d.depth.shape)
    zs = zs.reshape(d.depth.shape)
    with np.errstate(invalid="ignore"):
        valid = (d.valid & (zs > MIN_PROJECTED_DEPTH_MM)
                 & (us >= 0.0) & (us <= k.width - 1.0)
                 & (vs >= 0.0) & (vs <= k.height - 1.0))
    return WarpCoords(us, vs, zs, valid)


@dataclass
class BilinearPlan:
    """Interpolation weights and support indices for one coordinate set.

    Building the plan once lets several fields (an image's channels, a depth
    map) be sampled at the same coordinates without recomputing weights.
    """

    weights: tuple          # w00, w01, w10, w11 (array or Var)
    indices: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    in_bounds: np.ndarray


def bilinear_plan(width: int, height: int, us, vs) -> BilinearPlan:
    u = dn.value(us)
    v = dn.value(vs)
    with np.errstate(invalid="ignore"):
        inb = (np.isfinite(u) & np.isfinite(v)
               & (u >= 0.0) & (u <= width - 1.0)
               & (v >= 0.0) & (v <= height - 1.0))
    x0 = np.clip(np.floor(u), 0, width - 2)
    y0 = np.clip(np.floor(v), 0, height - 2)
    x0 = np.where(np.isfinite(x0), x0, 0.0)
    y0 = np.where(np.isfinite(y0), y0, 0.0)
    fu = dn.sub(us, x0)
    fv = dn.sub(vs, y0)
    gu = dn.sub(1.0, fu)
    gv = dn.sub(1.0, fv)
    i00 = (y0.astype(np.int64) * width + x0.astype(np.int64))
    weights = (dn.mul(gu, gv), dn.mul(fu, gv), dn.mul(gu, fv), dn.mul(fu, fv))
    return BilinearPlan(weights, (i00, i00 + 1, i00 + width, i00 + width + 1), inb)


def bilinear_apply(values, plan: BilinearPlan, src_valid=None):
    """Sample flat row-major ``values`` with a prepared plan."""
    w00, w01, w10, w11 = plan.weights
    i00, i01, i10, i11 = plan.indices
    out = dn.add(
        dn.add(dn.mul(w00, dn.gather(values, i00)), dn.mul(w01, dn.gather(values, i01))),
        dn.add(dn.mul(w10, dn.gather(values, i10)), dn.mul(w11, dn.gather(values, i11))),
    )
    valid = plan.in_bounds
    if src_valid is not None:
        flat_valid = src_valid.reshape(-1)
        valid = valid & flat_valid[i00] & flat_valid[i01] & flat_valid[i10] & flat_valid[i11]
    return out, valid


def bilinear_flat(values, width: int, height: int, us, vs, src_valid=None):
    """4-neighbor interpolation of flat row-major ``values`` at (us, vs).

    Differentiable with respect to both the values and the coordinates.
    Returns (samples, valid): samples whose 2x2 support exits the image are
    invalid, and if ``src_valid`` is given every support pixel must be valid
    so masked source pixels never contribute.
    """
    return bilinear_apply(values, bilinear_plan(width, height, us, vs), src_valid)


def bilinear_sample(img, us, vs):
    """Sample an Image or DepthMap at float coordinates (same shape as us).

    Returns (object of the same type, valid mask).
    """
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if isinstance(img, DepthMap):
        if img.height < 2 or img.width < 2:
            raise ValueError("bilinear sampling needs at least a 2x2 image")
        out, valid = bilinear_flat(img.depth, img.width, img.height,
                                   us.reshape(-1), vs.reshape(-1), src_valid=img.valid)
        valid = valid.reshape(us.shape)
        return DepthMap(out.reshape(us.shape), valid), valid
    if isinstance(img, Image):
        if img.height < 2 or img.width < 2:
            raise ValueError("bilinear sampling needs at least a 2x2 image")
        if img.channels == 1:
            out, valid = bilinear_flat(img.values, img.width, img.height,
                                       us.reshape(-1), vs.reshape(-1))
            sampled = out.reshape(us.shape)
        else:
            chans = []
            for c in range(3):
                out, valid = bilinear_flat(img.values[:, :, c], img.width, img.height,
                                           us.reshape(-1), vs.reshape(-1))
                chans.append(out.reshape(us.shape))
            sampled = np.stack(chans, axis=-1)
        valid = valid.reshape(us.shape)
        sampled = np.where(np.expand_dims(valid, -1) if sampled.ndim == 3 else valid,
                           sampled, 0.0)
        return Image(sampled), valid
    raise TypeError(f"cannot sample object of type {type(img).__name__}")


def warp_image(src: Image, d_target: DepthMap, pose: PoseSE3, k: Intrinsics):
    """Source image resampled into the target view through the target depth.

    Returns (warped Image, valid mask).
    """
    coords = warp_coords(d_target, pose, k)
    warped, sample_valid = bilinear_sample(src, coords.us, coords.vs)
    return warped, coords.valid & sample_valid


@dataclass
class WarpedDepth:
    """Source depth resampled into the target view, plus the target depth
    expressed in the source frame (needed by the geometric consistency ratio)."""

    sampled: DepthMap
    target_in_source: np.ndarray
    valid: np.ndarray


def warp_depth(d_src: DepthMap, d_target: DepthMap, pose: PoseSE3, k: Intrinsics) -> WarpedDepth:
    coords = warp_coords(d_target, pose, k)
    sampled, sample_valid = bilinear_sample(d_src, coords.us, coords.vs)
    valid = coords.valid & sample_valid & sampled.valid
    return WarpedDepth(sampled, coords.source_depth, valid)
