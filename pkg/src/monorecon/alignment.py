"""Affine depth alignment: global scale/shift plus locally weighted line fits.

The full correction of a depth map D is

    aligned = A ⊙ (alpha * D + beta) + B

where (alpha, beta) is the global stage and the per-pixel maps (A, B) come
from a locally weighted linear regression against anchor targets
w_j * Dg(p_j), one anchor sampled per patch.  With alpha=1, beta=0, w=1 the
whole correction is exactly the identity, bit for bit.

Core fits are written with autodiff ops and accept tape variables for the
depth values, the weights, and the global parameters; anchor positions and
the spatial kernel are constants of the current anchor sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as dn
from .geometry import DepthMap

DEGENERATE_REL_TOL = 1e-12


@dataclass
class AlignmentParams:
    """Per-frame global scale/shift and per-anchor weights."""

    alpha: float
    beta: float
    anchor_weights: np.ndarray

    def __post_init__(self) -> None:
        self.anchor_weights = np.asarray(self.anchor_weights, dtype=np.float64)
        if not self.alpha > 0:
            raise ValueError(f"global scale must be positive, got {self.alpha}")
        if not np.all(self.anchor_weights > 0):
            raise ValueError("anchor weights must be positive")

    @staticmethod
    def identity(n_anchors: int) -> "AlignmentParams":
        return AlignmentParams(1.0, 0.0, np.ones(n_anchors))


@dataclass
class PatchGrid:
    """One sampled pixel per patch; patches without valid pixels are skipped."""

    patch_size: int
    rows: np.ndarray      # (N,) anchor row per kept patch
    cols: np.ndarray      # (N,) anchor col
    patch_ids: np.ndarray  # (N,) row-major index of the source patch

    @property
    def n_anchors(self) -> int:
        return len(self.rows)

    def flat_indices(self, width: int) -> np.ndarray:
        return self.rows * width + self.cols


@dataclass
class LocalMaps:
    """Per-pixel scale and shift maps plus fit diagnostics."""

    scale: object   # (H, W) ndarray or Var
    shift: object
    fallback_pixels: int = 0


def global_align_values(values, alpha, beta):
    return dn.add(dn.mul(alpha, values), beta)


def global_align(d: DepthMap, alpha: float, beta: float) -> DepthMap:
    """alpha * D + beta; validity preserved, non-positive results invalidated."""
    if not alpha > 0:
        raise ValueError(f"global scale must be positive, got {alpha}")
    out = np.asarray(dn.value(global_align_values(d.depth, alpha, beta)))
    return DepthMap(out, d.valid.copy())


def sample_patch_anchors(d: DepthMap, patch_size: int, seed: int | np.random.Generator = 0
                         ) -> PatchGrid:
    """Uniformly sample one valid pixel per patch (partial patches truncated)."""
    if patch_size < 2:
        raise ValueError(f"patch size must be at least 2, got {patch_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_py = d.height // patch_size
    n_px = d.width // patch_size
    rows, cols, ids = [], [], []
    for ty in range(n_py):
        for tx in range(n_px):
            sub = d.valid[ty * patch_size:(ty + 1) * patch_size,
                          tx * patch_size:(tx + 1) * patch_size]
            choices = np.flatnonzero(sub.reshape(-1))
            if choices.size == 0:
                continue
            pick = int(choices[rng.integers(choices.size)])
            rows.append(ty * patch_size + pick // patch_size)
            cols.append(tx * patch_size + pick % patch_size)
            ids.append(ty * n_px + tx)
    if not rows:
        raise ValueError("no patch contains a valid pixel; cannot place anchors")
    return PatchGrid(patch_size, np.array(rows), np.array(cols), np.array(ids))


def anchor_values(dg: DepthMap, grid: PatchGrid, weights):
    """Weighted anchor targets w_j * Dg(p_j); anchors must be valid in dg."""
    idx = grid.flat_indices(dg.width)
    if not dg.valid.reshape(-1)[idx].all():
        raise ValueError("an anchor pixel is invalid in the globally aligned map")
    return dn.mul(weights, dn.gather(dg.depth, idx))


def spatial_kernel(height: int, width: int, grid: PatchGrid,
                   sigma: float | None = None,
                   pixel_indices: np.ndarray | None = None) -> np.ndarray:
    """Gaussian closeness of every pixel to every anchor, bandwidth = patch size."""
    sigma = float(grid.patch_size if sigma is None else sigma)
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    if pixel_indices is not None:
        ys, xs = ys[pixel_indices], xs[pixel_indices]
    d2 = (ys[:, None] - grid.rows[None, :]) ** 2 + (xs[:, None] - grid.cols[None, :]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def weighted_line_fit(predictors, targets, kernel: np.ndarray):
    """Closed-form per-pixel weighted least squares of targets vs predictors.

    ``kernel`` is (n_pixels, n_anchors) of constant spatial weights.  Returns
    (slope, intercept, n_fallback): where the 2x2 normal equations are rank
    deficient the fit falls back to the weighted-mean ratio slope with zero
    intercept.
    """
    if kernel.shape[1] != len(dn.value(predictors)):
        raise ValueError("kernel anchor count does not match predictors")
    if kernel.shape[1] < 2:
        raise ValueError("need at least 2 anchors for a line fit")
    sw = kernel.sum(axis=1)
    sx = dn.matmul(kernel, predictors)
    sy = dn.matmul(kernel, targets)
    sxx = dn.matmul(kernel, dn.mul(predictors, predictors))
    sxy = dn.matmul(kernel, dn.mul(predictors, targets))
    denom = dn.sub(dn.mul(sw, sxx), dn.mul(sx, sx))

    denom_vals = np.asarray(dn.value(denom))
    scale = np.maximum(1.0, np.abs(dn.value(sw) * np.asarray(dn.value(sxx))))
    bad = np.abs(denom_vals) < DEGENERATE_REL_TOL * scale
    good = (~bad).astype(np.float64)
    safe_denom = dn.add(denom, bad.astype(np.float64))
    slope_reg = dn.div(dn.sub(dn.mul(sw, sxy), dn.mul(sx, sy)), safe_denom)
    icept_reg = dn.div(dn.sub(dn.mul(sxx, sy), dn.mul(sx, sxy)), safe_denom)
    slope_fb = dn.div(sy, sx)       # positive depths keep sx nonzero
    slope = dn.add(dn.mul(good, slope_reg), dn.mul(bad.astype(np.float64), slope_fb))
    icept = dn.mul(good, icept_reg)
    return slope, icept, int(bad.sum())


def lwlr_maps(dg: DepthMap, grid: PatchGrid, weights, sigma: float | None = None) -> LocalMaps:
    """Local scale/shift maps from the anchor fit, one solution per pixel."""
    preds = dn.gather(dg.depth, grid.flat_indices(dg.width))
    if len(np.unique(np.asarray(dn.value(preds)))) < 2:
        raise ValueError("anchors need at least two distinct depth values")
    targets = anchor_values(dg, grid, weights)
    kernel = spatial_kernel(dg.height, dg.width, grid, sigma)
    slope, icept, fallback = weighted_line_fit(preds, targets, kernel)
    shape = (dg.height, dg.width)
    return LocalMaps(dn.reshape(slope, shape), dn.reshape(icept, shape), fallback)


def apply_alignment(d: DepthMap, params: AlignmentParams, grid: PatchGrid,
                    sigma: float | None = None) -> DepthMap:
    """Full correction A ⊙ (alpha*D + beta) + B; no pixel is ever revived."""
    if grid.n_anchors != len(params.anchor_weights):
        raise ValueError("anchor weight count does not match the grid")
    dg = global_align(d, params.alpha, params.beta)
    keep = dg.valid.reshape(-1)[grid.flat_indices(dg.width)]
    if not keep.all():
        grid = PatchGrid(grid.patch_size, grid.rows[keep], grid.cols[keep],
                         grid.patch_ids[keep])
        params = AlignmentParams(params.alpha, params.beta, params.anchor_weights[keep])
    maps = lwlr_maps(dg, grid, params.anchor_weights, sigma)
    out = np.asarray(dn.value(maps.scale)) * dg.depth + np.asarray(dn.value(maps.shift))
    return DepthMap(out, dg.valid)
