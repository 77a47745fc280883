"""Differentiable objectives: photometric, edge, depth-consistency, and the
multi-frame reconstruction losses.

Each public operation has a typed wrapper over :class:`Image`/:class:`DepthMap`
and a value-level core written with :mod:`monorecon.autodiff` ops, so the same
formula evaluates on plain arrays or on tape variables.  Absolute values use
the smooth |x| = sqrt(x^2 + 1e-12), which puts a ~1e-6 floor under losses that
are exactly zero in the idealized formula; tests account for that floor.

Validity masks are constants with respect to differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as dn
from .geometry import (
    DepthMap,
    Image,
    Intrinsics,
    PoseSE3,
    bilinear_apply,
    bilinear_plan,
    pixel_grid,
    pose_compose,
    pose_inverse,
    project_flat,
    rodrigues,
)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
GC_DENOM_MIN = 1e-9
NORMALIZE_MIN_SPREAD = 1e-9


@dataclass
class LossWeights:
    """Mixing weights for the depth objective and the reconstruction objective."""

    alpha: float = 0.85
    lambda_p: float = 1.0
    lambda_e: float = 0.1
    lambda_sssi: float = 0.01
    lambda_pc: float = 2.0
    lambda_gc: float = 0.5
    lambda_regu: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("lambda_p", "lambda_e", "lambda_sssi",
                     "lambda_pc", "lambda_gc", "lambda_regu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def masked_mean(values, mask: np.ndarray):
    """Mean of ``values`` over True pixels of a constant boolean mask."""
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mean over an empty validity mask is undefined")
    return dn.div(dn.asum(dn.mul(values, mask.astype(np.float64))), float(count))


# ---------------------------------------------------------------------------
# SSIM and the photometric loss


def _shift_indices(width: int, height: int) -> list[np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    idx = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy = np.clip(ys + dy, 0, height - 1)
            xx = np.clip(xs + dx, 0, width - 1)
            idx.append((yy * width + xx).reshape(-1))
    return idx


def _box3(values, idx: list[np.ndarray]):
    acc = dn.gather(values, idx[0])
    for i in idx[1:]:
        acc = dn.add(acc, dn.gather(values, i))
    return dn.div(acc, 9.0)


def ssim_map_values(a, b, width: int, height: int):
    """Windowed SSIM of two single-channel value grids, clamped to [-1, 1].

    3x3 mean pooling with replicate padding and the usual stabilizers for
    intensities in [0, 1].
    """
    if width < 3 or height < 3:
        raise ValueError(f"image {width}x{height} smaller than the 3x3 SSIM window")
    a = dn.reshape(a, (-1,))
    b = dn.reshape(b, (-1,))
    idx = _shift_indices(width, height)
    mu_a = _box3(a, idx)
    mu_b = _box3(b, idx)
    var_a = dn.sub(_box3(dn.mul(a, a), idx), dn.mul(mu_a, mu_a))
    var_b = dn.sub(_box3(dn.mul(b, b), idx), dn.mul(mu_b, mu_b))
    cov = dn.sub(_box3(dn.mul(a, b), idx), dn.mul(mu_a, mu_b))
    num = dn.mul(dn.add(dn.mul(2.0, dn.mul(mu_a, mu_b)), SSIM_C1),
                 dn.add(dn.mul(2.0, cov), SSIM_C2))
    den = dn.mul(dn.add(dn.add(dn.mul(mu_a, mu_a), dn.mul(mu_b, mu_b)), SSIM_C1),
                 dn.add(dn.add(var_a, var_b), SSIM_C2))
    return dn.clamp(dn.div(num, den), -1.0, 1.0)


def _channels(img: Image) -> list[np.ndarray]:
    if img.channels == 1:
        return [img.values]
    return [img.values[:, :, c] for c in range(3)]


def ssim(a: Image, b: Image) -> np.ndarray:
    """Per-pixel SSIM map, averaged over channels."""
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels):
        raise ValueError("ssim needs images of identical shape")
    maps = [ssim_map_values(ca, cb, a.width, a.height)
            for ca, cb in zip(_channels(a), _channels(b))]
    out = maps[0]
    for m in maps[1:]:
        out = out + m
    return (out / len(maps)).reshape(a.height, a.width)


def photometric_loss_values(chans_t, chans_w, valid: np.ndarray,
                            width: int, height: int, alpha: float = 0.85):
    """Masked mean of alpha*(1-SSIM)/2 + (1-alpha)*|diff| over channels."""
    n = len(chans_t)
    ssim_acc = None
    l1_acc = None
    for ct, cw in zip(chans_t, chans_w):
        s = ssim_map_values(ct, cw, width, height)
        l1 = dn.smooth_abs(dn.sub(dn.reshape(ct, (-1,)), dn.reshape(cw, (-1,))))
        ssim_acc = s if ssim_acc is None else dn.add(ssim_acc, s)
        l1_acc = l1 if l1_acc is None else dn.add(l1_acc, l1)
    ssim_mean = dn.div(ssim_acc, float(n))
    l1_mean = dn.div(l1_acc, float(n))
    per_pixel = dn.add(dn.mul(alpha / 2.0, dn.sub(1.0, ssim_mean)),
                       dn.mul(1.0 - alpha, l1_mean))
    return masked_mean(per_pixel, valid.reshape(-1))


def photometric_loss(i_t: Image, i_warp: Image, valid: np.ndarray,
                     alpha: float = 0.85) -> float:
    if (i_t.height, i_t.width, i_t.channels) != (i_warp.height, i_warp.width, i_warp.channels):
        raise ValueError("photometric loss needs images of identical shape")
    out = photometric_loss_values(_channels(i_t), _channels(i_warp), valid,
                                  i_t.width, i_t.height, alpha)
    return float(dn.value(out))


# ---------------------------------------------------------------------------
# edge-aware smoothness


def edge_smoothness_values(depth, valid: np.ndarray, image_values: np.ndarray,
                           width: int, height: int):
    """Mean-normalized disparity gradients, down-weighted at image edges."""
    disp = dn.div(1.0, depth)
    disp_mean = masked_mean(dn.reshape(disp, (-1,)), valid.reshape(-1))
    disp = dn.div(disp, disp_mean)

    img = image_values if image_values.ndim == 3 else image_values[:, :, None]
    gx_img = np.abs(np.diff(img, axis=1)).mean(axis=2)
    gy_img = np.abs(np.diff(img, axis=0)).mean(axis=2)
    wx = np.exp(-gx_img)
    wy = np.exp(-gy_img)

    flat = dn.reshape(disp, (-1,))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width - 1), indexing="ij")
    left = (ys * width + xs).reshape(-1)
    gx = dn.smooth_abs(dn.sub(dn.gather(flat, left + 1), dn.gather(flat, left)))
    mask_x = (valid[:, 1:] & valid[:, :-1]).reshape(-1)

    ys, xs = np.meshgrid(np.arange(height - 1), np.arange(width), indexing="ij")
    top = (ys * width + xs).reshape(-1)
    gy = dn.smooth_abs(dn.sub(dn.gather(flat, top + width), dn.gather(flat, top)))
    mask_y = (valid[1:, :] & valid[:-1, :]).reshape(-1)

    if not (mask_x.any() or mask_y.any()):
        return 0.0
    total = dn.add(dn.asum(dn.mul(gx, wx.reshape(-1) * mask_x)),
                   dn.asum(dn.mul(gy, wy.reshape(-1) * mask_y)))
    return dn.div(total, float(mask_x.sum() + mask_y.sum()))


def edge_smoothness(d: DepthMap, img: Image) -> float:
    if (d.height, d.width) != (img.height, img.width):
        raise ValueError("depth and image shapes differ")
    image3 = img.values if img.channels == 3 else img.values[:, :, None]
    safe = np.where(d.valid, d.depth, 1.0)
    out = edge_smoothness_values(safe, d.valid, image3, d.width, d.height)
    return float(dn.value(out))


# ---------------------------------------------------------------------------
# scale/shift-invariant depth consistency


def normalize_depth_values(values_flat, valid_flat: np.ndarray):
    """(D - median) / mean|D - median| over the valid set.

    Even-sized sets use the midpoint of the two middle order statistics
    (gradient splits evenly between them), so the result is deterministic and
    piecewise differentiable.  Raises on near-constant maps.
    """
    sel = np.flatnonzero(valid_flat)
    if sel.size == 0:
        raise ValueError("cannot normalize a depth map with no valid pixels")
    vals = dn.gather(values_flat, sel)
    order = np.argsort(dn.value(vals), kind="stable")
    n = sel.size
    if n % 2 == 1:
        med = dn.gather(vals, order[n // 2])
    else:
        med = dn.mul(0.5, dn.add(dn.gather(vals, order[n // 2 - 1]),
                                 dn.gather(vals, order[n // 2])))
    centered = dn.sub(vals, med)
    # degeneracy test on the true |.|; the smooth floor would hide it
    if np.abs(dn.value(centered)).mean() < NORMALIZE_MIN_SPREAD:
        raise ValueError("degenerate (near-constant) depth map cannot be normalized")
    spread = dn.mean(dn.smooth_abs(centered))
    return dn.div(centered, spread)


def normalize_depth(d: DepthMap) -> np.ndarray:
    """Normalized map over valid pixels; invalid pixels are set to 0."""
    out = np.zeros(d.depth.shape)
    normed = normalize_depth_values(d.depth.reshape(-1), d.valid.reshape(-1))
    out[d.valid] = dn.value(normed)
    return out


def sssi_loss_values(d_t_flat, d_w_flat, valid_flat: np.ndarray):
    nt = normalize_depth_values(d_t_flat, valid_flat)
    nw = normalize_depth_values(d_w_flat, valid_flat)
    return dn.mean(dn.smooth_abs(dn.sub(nt, nw)))


def sssi_loss(d_t: DepthMap, d_warp: DepthMap, valid: np.ndarray) -> float:
    """Scale- and shift-invariant consistency between two depth maps."""
    joint = valid & d_t.valid & d_warp.valid
    out = sssi_loss_values(d_t.depth.reshape(-1), d_warp.depth.reshape(-1),
                           joint.reshape(-1))
    return float(dn.value(out))


# ---------------------------------------------------------------------------
# loss combination


def total_depth_loss(photometric, sssi, edge, w: LossWeights):
    """lambda_p * L_p + lambda_sssi * L_sssi + lambda_e * L_e."""
    return dn.add(dn.add(dn.mul(w.lambda_p, photometric), dn.mul(w.lambda_sssi, sssi)),
                  dn.mul(w.lambda_e, edge))


def total_recon_loss(pc, gc, regu, w: LossWeights):
    """lambda_pc * L_pc + lambda_gc * L_gc + lambda_regu * L_regu."""
    return dn.add(dn.add(dn.mul(w.lambda_pc, pc), dn.mul(w.lambda_gc, gc)),
                  dn.mul(w.lambda_regu, regu))


# ---------------------------------------------------------------------------
# multi-frame photometric / geometric consistency (reconstruction losses)


@dataclass
class ConsistencyFrame:
    """One frame entering the reconstruction losses: image is a constant,
    depth may be a tape variable (flat, row-major) with its own valid mask."""

    image_channels: list[np.ndarray]
    depth_flat: object           # ndarray or Var, length H*W
    valid: np.ndarray            # (H, W) bool


@dataclass
class PairDiagnostics:
    count: int = 0
    empty_pairs: list[tuple[int, int]] = field(default_factory=list)
    excluded_small_denominator: int = 0


def pair_consistency_terms(frame_i: ConsistencyFrame, frame_j: ConsistencyFrame,
                           R, t, intr: Intrinsics,
                           subset: np.ndarray | None = None):
    """Per-pair sums of photometric and geometric point residuals.

    ``R``/``t`` map frame-i points into frame j.  ``subset`` optionally
    restricts the evaluated target pixels (flat indices).  Returns
    (pc_sum, gc_sum, n_valid, n_excluded_denominator); sums are 0.0 when no
    point is valid.
    """
    h, w = frame_i.valid.shape
    uu, vv = pixel_grid(w, h)
    valid_i = frame_i.valid.reshape(-1)
    if subset is None:
        subset = np.arange(h * w)
    sub_valid = valid_i[subset]
    uu, vv = uu[subset], vv[subset]

    depth_i = dn.gather(frame_i.depth_flat, subset)
    k4 = (intr.fx, intr.fy, intr.cx, intr.cy)
    us, vs, zs = project_flat(depth_i, uu, vv, R, t, k4, k4)

    zvals = dn.value(zs)
    uvals, vvals = dn.value(us), dn.value(vs)
    with np.errstate(invalid="ignore"):
        proj_ok = (sub_valid & (zvals > 1e-6)
                   & (uvals >= 0) & (uvals <= w - 1)
                   & (vvals >= 0) & (vvals <= h - 1))

    # one interpolation plan serves the depth map and every image channel
    plan = bilinear_plan(w, h, us, vs)
    depth_j_sampled, support_ok = bilinear_apply(frame_j.depth_flat, plan,
                                                 src_valid=frame_j.valid)
    point_ok = proj_ok & support_ok

    # geometric term: |D_j(p') - D_ij(p)| / (D_j(p') + D_ij(p))
    denom = dn.add(depth_j_sampled, zs)
    denom_vals = dn.value(denom)
    gc_ok = point_ok & (denom_vals >= GC_DENOM_MIN)
    n_excl = int((point_ok & ~gc_ok).sum())
    gc_terms = dn.div(dn.smooth_abs(dn.sub(depth_j_sampled, zs)),
                      dn.add(denom, (~gc_ok).astype(np.float64)))  # keep masked denoms nonzero
    gc_sum = dn.asum(dn.mul(gc_terms, gc_ok.astype(np.float64)))

    # photometric term: channel-mean |I_i(p) - I_j(p')|
    pc_acc = None
    for ci, cj in zip(frame_i.image_channels, frame_j.image_channels):
        val_i = ci.reshape(-1)[subset]
        val_j, _ = bilinear_apply(cj, plan)
        term = dn.smooth_abs(dn.sub(val_i, val_j))
        pc_acc = term if pc_acc is None else dn.add(pc_acc, term)
    pc_terms = dn.div(pc_acc, float(len(frame_i.image_channels)))
    pc_sum = dn.asum(dn.mul(pc_terms, point_ok.astype(np.float64)))

    return pc_sum, gc_sum, int(point_ok.sum()), n_excl


def _frames_to_consistency(frames) -> list[ConsistencyFrame]:
    out = []
    for img, depth in frames:
        chans = _channels(img) if isinstance(img, Image) else img
        out.append(ConsistencyFrame(chans, depth.depth.reshape(-1), depth.valid))
    return out


def _relative_rt(poses_cam_to_world: list[PoseSE3], i: int, j: int):
    rel = pose_compose(pose_inverse(poses_cam_to_world[j]), poses_cam_to_world[i])
    return rodrigues(rel.rotation), rel.translation


def photometric_consistency(frames, pairs, poses: list[PoseSE3],
                            intr: Intrinsics) -> tuple[float, PairDiagnostics]:
    """Mean photometric residual over the union of valid projected points.

    ``frames`` is a list of (Image, aligned DepthMap); ``poses`` are
    camera-to-world.  Pairs with zero valid points contribute nothing and are
    reported in the diagnostics.
    """
    cf = _frames_to_consistency(frames)
    diag = PairDiagnostics()
    total, count = 0.0, 0
    for (i, j) in pairs:
        R, t = _relative_rt(poses, i, j)
        pc, _, n, _ = pair_consistency_terms(cf[i], cf[j], R, t, intr)
        if n == 0:
            diag.empty_pairs.append((i, j))
            continue
        total += float(dn.value(pc))
        count += n
    if count == 0:
        raise ValueError("no valid projected points in any keyframe pair")
    diag.count = count
    return total / count, diag


def geometric_consistency(frames, pairs, poses: list[PoseSE3],
                          intr: Intrinsics) -> tuple[float, PairDiagnostics]:
    """Mean normalized depth disagreement over valid projected points."""
    cf = _frames_to_consistency(frames)
    diag = PairDiagnostics()
    total, count = 0.0, 0
    for (i, j) in pairs:
        R, t = _relative_rt(poses, i, j)
        _, gc, n, n_excl = pair_consistency_terms(cf[i], cf[j], R, t, intr)
        diag.excluded_small_denominator += n_excl
        if n == 0:
            diag.empty_pairs.append((i, j))
            continue
        total += float(dn.value(gc))
        count += n - n_excl
    if count == 0:
        raise ValueError("no valid projected points in any keyframe pair")
    diag.count = count
    return total / count, diag


def alignment_regularizer(anchor_weights, alphas, alphas_init, betas_norm):
    """Drift penalty: mean((w-1)^2) + mean((a-a0)^2) + mean(beta_norm^2)."""
    w_term = dn.mean(dn.mul(dn.sub(anchor_weights, 1.0), dn.sub(anchor_weights, 1.0)))
    da = dn.sub(alphas, alphas_init)
    a_term = dn.mean(dn.mul(da, da))
    b_term = dn.mean(dn.mul(betas_norm, betas_norm))
    return dn.add(dn.add(w_term, a_term), b_term)
