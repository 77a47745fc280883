"""Deterministic synthetic scenes: analytic surfaces, textures, trajectories.

Everything here is an oracle for tests and demos.  Surfaces are defined in
the world frame (the frame-0 camera frame): a fronto-parallel plane, a
sphere, or a sinusoidal terrain height field.  Depth is analytic
(ray-surface intersection solved to double precision), textures are smooth
trigonometric functions attached to the surface so that a correctly warped
view reproduces the rendered one up to bilinear-interpolation residue.

Rendering is bit-reproducible for a given scene seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap, Image, Intrinsics, PoseSE3, pose_compose, pose_inverse, rodrigues

SURFACE_KINDS = ("plane", "sphere", "terrain")


@dataclass
class SyntheticScene:
    kind: str
    intrinsics: Intrinsics
    n_frames: int
    seed: int
    plane_z: float = 100.0
    sphere_center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 150.0]))
    sphere_radius: float = 50.0
    terrain_z: float = 100.0
    terrain_amp: float = 6.0
    terrain_waves: np.ndarray = field(default_factory=lambda: np.zeros(4))
    texture_phases: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    traj_phases: np.ndarray = field(default_factory=lambda: np.zeros(3))
    traj_translation_amp: np.ndarray = field(default_factory=lambda: np.array([3.0, 2.5, 4.0]))
    traj_rotation_amp: np.ndarray = field(default_factory=lambda: np.array([0.015, 0.012, 0.02]))


def make_scene(kind: str = "terrain", width: int = 64, height: int = 48,
               n_frames: int = 10, seed: int = 0, focal: float = 60.0,
               **overrides) -> SyntheticScene:
    if kind not in SURFACE_KINDS:
        raise ValueError(f"unknown surface kind {kind!r}; expected one of {SURFACE_KINDS}")
    rng = np.random.default_rng(seed)
    intr = Intrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)
    scene = SyntheticScene(
        kind=kind,
        intrinsics=intr,
        n_frames=n_frames,
        seed=seed,
        terrain_waves=2.0 * math.pi / rng.uniform(42.0, 60.0, size=4),
        texture_phases=rng.uniform(0.0, 2.0 * math.pi, size=(3, 3)),
        traj_phases=rng.uniform(0.0, 2.0 * math.pi, size=3),
    )
    for key, val in overrides.items():
        if not hasattr(scene, key):
            raise ValueError(f"unknown scene override {key!r}")
        setattr(scene, key, val)
    return scene


def texture_at(scene: SyntheticScene, points: np.ndarray) -> np.ndarray:
    """Smooth RGB texture evaluated at world points (N, 3) -> (N, 3) in [0, 1]."""
    x, y = points[:, 0], points[:, 1]
    ph = scene.texture_phases
    out = np.empty((points.shape[0], 3))
    freqs = (2.0 * math.pi / 34.0, 2.0 * math.pi / 43.0, 2.0 * math.pi / 56.0)
    for c in range(3):
        out[:, c] = (0.5
                     + 0.15 * np.sin(freqs[0] * x + ph[c, 0]) * np.cos(freqs[1] * y + ph[c, 1])
                     + 0.12 * np.sin(freqs[2] * (x + y) + ph[c, 2]))
    return np.clip(out, 0.0, 1.0)


def terrain_height(scene: SyntheticScene, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    k = scene.terrain_waves
    return (scene.terrain_z
            + scene.terrain_amp * (0.6 * np.sin(k[0] * x) * np.cos(k[1] * y)
                                   + 0.4 * np.sin(k[2] * x + k[3] * y)))


def camera_pose(scene: SyntheticScene, index: int) -> PoseSE3:
    """Camera-to-world pose of a frame; frame 0 is the world origin."""
    if not (0 <= index < scene.n_frames):
        raise ValueError(f"frame index {index} outside 0..{scene.n_frames - 1}")

    def raw(i: int) -> PoseSE3:
        n = max(scene.n_frames - 1, 1)
        s = i / n
        ph = scene.traj_phases
        ta = scene.traj_translation_amp
        ra = scene.traj_rotation_amp
        t = np.array([ta[0] * math.sin(2.0 * math.pi * s + ph[0]),
                      ta[1] * math.sin(4.0 * math.pi * s + ph[1]),
                      ta[2] * (s - 0.5)])
        r = np.array([ra[0] * math.sin(2.0 * math.pi * s + ph[2]),
                      ra[1] * math.cos(2.0 * math.pi * s + ph[0]),
                      ra[2] * math.sin(4.0 * math.pi * s + ph[1])])
        return PoseSE3(r, t)

    return pose_compose(pose_inverse(raw(0)), raw(index))


def relative_pose(scene: SyntheticScene, target: int, source: int) -> PoseSE3:
    """Pose mapping target-frame points into the source frame."""
    return pose_compose(pose_inverse(camera_pose(scene, source)), camera_pose(scene, target))


def _intersect(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter s (camera z-depth) per ray; NaN where the ray misses."""
    dz = dirs[:, 2]
    if scene.kind == "plane":
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (scene.plane_z - origin[2]) / dz
        s[(dz <= 1e-9) | (s <= 0)] = np.nan
        return s
    if scene.kind == "sphere":
        oc = origin - scene.sphere_center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - scene.sphere_radius ** 2
        disc = b * b - 4.0 * a * c
        s = np.full(len(dirs), np.nan)
        hit = disc >= 0
        root = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
        root[root <= 0] = np.nan
        s[hit] = root
        return s
    # terrain: g(s) = o_z + s*dz - height(xy(s)) is monotone within the
    # bracket because the height slope stays well below the ray slope
    amp = scene.terrain_amp * 1.01
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = (scene.terrain_z - amp - origin[2]) / dz
        hi = (scene.terrain_z + amp - origin[2]) / dz

    def g(s):
        p = origin[None, :] + s[:, None] * dirs
        return p[:, 2] - terrain_height(scene, p[:, 0], p[:, 1])

    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = g(mid) < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    s = 0.5 * (lo + hi)
    s[(dz <= 0.5) | (s <= 0)] = np.nan
    return s


def render_frame(scene: SyntheticScene, index: int) -> tuple[Image, DepthMap, PoseSE3]:
    """Analytic render of one frame: texture image, depth map, camera pose."""
    intr = scene.intrinsics
    pose = camera_pose(scene, index)
    uu, vv = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                         np.arange(intr.height, dtype=np.float64))
    dirs_cam = np.stack([(uu.reshape(-1) - intr.cx) / intr.fx,
                         (vv.reshape(-1) - intr.cy) / intr.fy,
                         np.ones(uu.size)], axis=1)
    R = rodrigues(pose.rotation)
    dirs_world = dirs_cam @ R.T
    s = _intersect(scene, pose.translation, dirs_world)
    valid = np.isfinite(s)
    depth = np.where(valid, s, 0.0).reshape(intr.height, intr.width)

    pts = pose.translation[None, :] + np.where(valid, s, 1.0)[:, None] * dirs_world
    tex = texture_at(scene, pts)
    tex[~valid] = 0.0
    image = Image(tex.reshape(intr.height, intr.width, 3))
    return image, DepthMap(depth, valid.reshape(intr.height, intr.width)), pose


def ground_truth_cloud(scene: SyntheticScene, indices=None, stride: int = 2) -> np.ndarray:
    """World-space surface points from exact renders; (N, 3) array."""
    if indices is None:
        indices = range(scene.n_frames)
    pts = []
    intr = scene.intrinsics
    for i in indices:
        _, d, pose = render_frame(scene, i)
        uu, vv = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                             np.arange(intr.height, dtype=np.float64))
        sub = (slice(None, None, stride), slice(None, None, stride))
        m = d.valid[sub]
        z = d.depth[sub][m]
        u = uu[sub][m]
        v = vv[sub][m]
        local = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)
        R = rodrigues(pose.rotation)
        pts.append(local @ R.T + pose.translation)
    return np.concatenate(pts, axis=0)
