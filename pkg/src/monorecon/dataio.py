"""File formats: 8-bit RGB PNG images, 16-bit PNG depths with a millimeter
scale sidecar, PFM float depths, pose and intrinsics text files, ASCII PLY
point clouds.  All writes go through a write-temp-then-rename so partially
written files never appear under the final name.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .fusion import PointCloud
from .geometry import DepthMap, Image, Intrinsics, PoseSE3, matrix_to_pose, pose_to_matrix

DEPTH_PNG_MAX_CODE = 60000  # leaves headroom below the uint16 ceiling


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# images


def save_image(path: Path, img: Image) -> None:
    values = img.values if img.channels == 3 else np.stack([img.values] * 3, axis=-1)
    arr = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    pil = PilImage.fromarray(arr, mode="RGB")
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    pil.save(tmp, format="PNG")
    os.replace(tmp, path)


def load_image(path: Path) -> Image:
    with PilImage.open(path) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


# ---------------------------------------------------------------------------
# depth maps


def save_depth_png(path: Path, depth: DepthMap) -> None:
    """16-bit PNG with zero marking invalid pixels; the millimeter scale goes
    into a JSON sidecar next to the file."""
    path = Path(path)
    max_depth = float(depth.depth[depth.valid].max()) if depth.valid.any() else 1.0
    scale = max_depth / DEPTH_PNG_MAX_CODE if max_depth > 0 else 1.0
    codes = np.zeros(depth.depth.shape, dtype=np.uint16)
    codes[depth.valid] = np.clip(
        np.round(depth.depth[depth.valid] / scale), 1, 65535).astype(np.uint16)
    pil = PilImage.fromarray(codes)  # uint16 -> 16-bit grayscale
    tmp = path.with_name(path.name + ".tmp")
    pil.save(tmp, format="PNG")
    os.replace(tmp, path)
    atomic_write_text(sidecar_path(path),
                      json.dumps({"depth_scale_mm_per_unit": scale}, sort_keys=True))


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_depth_png(path: Path) -> DepthMap:
    path = Path(path)
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    scale = float(meta["depth_scale_mm_per_unit"])
    with PilImage.open(path) as pil:
        codes = np.asarray(pil, dtype=np.float64)
    return DepthMap(codes * scale, codes > 0)


def save_pfm(path: Path, depth: DepthMap) -> None:
    """Grayscale PFM (little endian); invalid pixels stored as 0."""
    values = np.where(depth.valid, depth.depth, 0.0).astype(np.float32)
    header = f"Pf\n{values.shape[1]} {values.shape[0]}\n-1.0\n".encode("ascii")
    # PFM scanlines run bottom to top
    payload = header + np.flipud(values).tobytes()
    atomic_write_bytes(path, payload)


def load_pfm(path: Path) -> DepthMap:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"{path}: only grayscale 'Pf' PFM files are supported")
        width, height = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        count = width * height
        fmt = "<" if scale < 0 else ">"
        data = struct.unpack(f"{fmt}{count}f", fh.read(count * 4))
    values = np.flipud(np.asarray(data, dtype=np.float64).reshape(height, width))
    return DepthMap(values.copy(), values > 0)


def load_depth(path: Path) -> DepthMap:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return load_pfm(path)
    return load_depth_png(path)


# ---------------------------------------------------------------------------
# poses and intrinsics


def save_poses(path: Path, poses: list[PoseSE3]) -> None:
    """One line per frame: row-major 3x4 camera-to-world matrix."""
    lines = []
    for pose in poses:
        m = pose_to_matrix(pose)[:3, :].reshape(-1)
        lines.append(" ".join(f"{x:.12g}" for x in m))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_poses(path: Path) -> list[PoseSE3]:
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 12:
                raise ValueError(f"{path}:{line_no}: expected 12 numbers, got {len(vals)}")
            m = np.eye(4)
            m[:3, :] = np.asarray(vals).reshape(3, 4)
            poses.append(matrix_to_pose(m))
    if not poses:
        raise ValueError(f"{path}: no poses found")
    return poses


def save_intrinsics(path: Path, intr: Intrinsics) -> None:
    atomic_write_text(
        path, f"{intr.fx:.12g} {intr.fy:.12g} {intr.cx:.12g} {intr.cy:.12g} "
              f"{intr.width} {intr.height}\n")


def load_intrinsics(path: Path) -> Intrinsics:
    with open(path, "r", encoding="utf-8") as fh:
        vals = fh.read().split()
    if len(vals) != 6:
        raise ValueError(f"{path}: expected 'fx fy cx cy width height'")
    return Intrinsics(fx=float(vals[0]), fy=float(vals[1]), cx=float(vals[2]),
                      cy=float(vals[3]), width=int(vals[4]), height=int(vals[5]))


# ---------------------------------------------------------------------------
# point clouds


def save_ply(path: Path, cloud: PointCloud) -> None:
    """ASCII PLY, fixed 6-decimal formatting so identical clouds serialize
    byte-identically."""
    has_color = cloud.colors is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i in range(len(cloud)):
        x, y, z = cloud.points[i]
        row = f"{x:.6f} {y:.6f} {z:.6f}"
        if has_color:
            r, g, b = np.clip(np.round(cloud.colors[i] * 255.0), 0, 255).astype(int)
            row += f" {r} {g} {b}"
        lines.append(row)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_ply(path: Path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: missing PLY magic")
        n_vertices = None
        props: list[str] = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of header")
            token = line.split()
            if token[0] == "format" and token[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if token[0] == "element" and token[1] == "vertex":
                n_vertices = int(token[2])
            if token[0] == "property" and n_vertices is not None:
                props.append(token[-1])
            if token[0] == "end_header":
                break
        if n_vertices is None:
            raise ValueError(f"{path}: no vertex element in header")
        has_color = "red" in props
        pts = np.empty((n_vertices, 3))
        colors = np.empty((n_vertices, 3)) if has_color else None
        for i in range(n_vertices):
            vals = fh.readline().split()
            pts[i] = [float(v) for v in vals[:3]]
            if has_color:
                colors[i] = [float(v) / 255.0 for v in vals[3:6]]
    return PointCloud(pts, colors)
