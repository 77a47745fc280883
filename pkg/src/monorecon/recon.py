"""Joint optimization of per-frame depth alignment and inter-frame poses.

The problem couples, per frame, a global scale, a normalized global shift,
and per-patch anchor weights (the local alignment), with the relative pose
of every adjacent frame pair.  Frame 0 is the world origin, non-adjacent
relative poses come from composing the adjacent chain, and everything is
minimized under the weighted photometric + geometric + drift objective with
an AdamW loop.

Scale notes: shifts are optimized in units of the 95th-percentile initial
depth and scales/weights are unitless, so a single base learning rate with
per-group multipliers covers parameters whose natural step sizes differ by
orders of magnitude.  During iterations the point losses run on a
subsampled pixel grid; reported epoch losses use every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as dn
from .alignment import sample_patch_anchors, spatial_kernel, weighted_line_fit
from .geometry import DepthMap, Image, Intrinsics, PoseSE3, matrix_to_pose, rodrigues
from .losses import ConsistencyFrame, LossWeights, alignment_regularizer, \
    pair_consistency_terms, total_recon_loss
from .optim import AdamW

DEFAULT_LR = 1e-4
# per-group step scaling on top of the base rate; alignment parameters are
# unitless and need O(1) total movement within the iteration budget
DEFAULT_LR_MULTIPLIERS = {"alpha": 50.0, "beta": 50.0, "w.": 50.0,
                          "rot.": 10.0, "trans.": 10.0}
DEFAULT_LR_DECAY = 0.3  # per-epoch decay: travel early, settle late
PARAM_FLOOR = 1e-3
MAX_STEP_RETRIES = 5


@dataclass
class ReconFrame:
    image: Image
    depth_pred: DepthMap      # affine-invariant depth prediction


@dataclass
class KeyframePairSet:
    pairs: list[tuple[int, int]]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("keyframe pair set is empty")
        seen = set()
        for i, j in self.pairs:
            if i == j:
                raise ValueError(f"keyframe pair ({i}, {j}) is degenerate")
        for i, j in self.pairs:
            seen.update((i, j))
        n = max(seen) + 1
        missing = set(range(n)) - seen
        if missing:
            raise ValueError(f"frames {sorted(missing)} appear in no keyframe pair")


def select_keyframes(n_frames: int, local_window: int = 1,
                     global_stride: int | None = None) -> KeyframePairSet:
    """Chain pairs (i, i+d) for d <= window, plus pairs to every frame whose
    index is a multiple of the stride; deduplicated, i < j."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    pairs = set()
    for i in range(n_frames):
        for d in range(1, local_window + 1):
            if i + d < n_frames:
                pairs.add((i, i + d))
    if global_stride:
        anchors = set(range(0, n_frames, global_stride))
        for g in anchors:
            for i in range(n_frames):
                if i != g:
                    pairs.add((min(i, g), max(i, g)))
    return KeyframePairSet(sorted(pairs))


@dataclass
class ReconProblem:
    frames: list[ReconFrame]
    intrinsics: Intrinsics
    rel_poses: list[PoseSE3]          # adjacent i -> i+1
    keyframes: KeyframePairSet
    weights: LossWeights
    patch_size: int
    depth_norm: float                 # 95th-percentile initial depth (mm)
    params: dict[str, np.ndarray]     # alpha, beta, w.<i>, rot.<i>, trans.<i>

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def n_patches(self) -> int:
        f = self.frames[0].depth_pred
        return (f.height // self.patch_size) * (f.width // self.patch_size)


def init_problem(frames: list[ReconFrame], rel_poses: list[PoseSE3],
                 intrinsics: Intrinsics, weights: LossWeights | None = None,
                 patch_size: int = 32, local_window: int = 1,
                 global_stride: int | None = None) -> ReconProblem:
    """Identity alignment parameters, poses from the predictions."""
    if intrinsics is None:
        raise ValueError("reconstruction requires intrinsics (predicted or from file)")
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    if len(rel_poses) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} relative poses, "
                         f"got {len(rel_poses)}")
    shape = (frames[0].depth_pred.height, frames[0].depth_pred.width)
    for f in frames:
        if (f.depth_pred.height, f.depth_pred.width) != shape:
            raise ValueError("all frames must share the depth map size")
    if global_stride is None:
        global_stride = max(2, len(frames) // 5)
    keyframes = select_keyframes(len(frames), local_window, global_stride)

    n = len(frames)
    n_patches = (shape[0] // patch_size) * (shape[1] // patch_size)
    if n_patches < 2:
        raise ValueError(f"patch size {patch_size} leaves fewer than 2 patches")
    all_depths = np.concatenate([f.depth_pred.depth[f.depth_pred.valid] for f in frames])
    depth_norm = float(np.percentile(all_depths, 95.0))
    params: dict[str, np.ndarray] = {
        "alpha": np.ones(n),
        "beta": np.zeros(n),
    }
    for i in range(n):
        params[f"w.{i}"] = np.ones(n_patches)
    for i in range(n - 1):
        params[f"rot.{i}"] = rel_poses[i].rotation.copy()
        params[f"trans.{i}"] = rel_poses[i].translation.copy()
    return ReconProblem(frames, intrinsics, list(rel_poses), keyframes,
                        weights or LossWeights(), patch_size, depth_norm, params)


# ---------------------------------------------------------------------------
# pose algebra on (R, t) pairs that may hold tape variables


def _chain_prefixes(params, n_frames: int):
    """C_i mapping frame-0 coordinates into frame i; C_0 = identity."""
    R_acc, t_acc = np.eye(3), np.zeros(3)
    chains = [(R_acc, t_acc)]
    for i in range(n_frames - 1):
        R_step = rodrigues(params[f"rot.{i}"])
        t_step = params[f"trans.{i}"]
        R_acc = dn.matmul(R_step, R_acc)
        t_acc = dn.add(dn.matmul(R_step, t_acc), t_step)
        chains.append((R_acc, t_acc))
    return chains


def _invert_rt(R, t):
    R_inv = dn.transpose(R)
    return R_inv, dn.neg(dn.matmul(R_inv, t))


def _relative_rt(chains, i: int, j: int):
    """Transform of frame-i points into frame j from the adjacent chain."""
    R_i, t_i = chains[i]
    R_j, t_j = chains[j]
    R_i_inv, t_i_inv = _invert_rt(R_i, t_i)
    return dn.matmul(R_j, R_i_inv), dn.add(dn.matmul(R_j, t_i_inv), t_j)


def camera_poses(problem: ReconProblem) -> list[PoseSE3]:
    """Camera-to-world pose of every frame under the current parameters."""
    chains = _chain_prefixes(problem.params, problem.n_frames)
    poses = []
    for i in range(problem.n_frames):
        R, t = chains[i]
        R_inv, t_inv = _invert_rt(np.asarray(dn.value(R)), np.asarray(dn.value(t)))
        m = np.eye(4)
        m[:3, :3] = dn.value(R_inv)
        m[:3, 3] = dn.value(t_inv)
        poses.append(matrix_to_pose(m))
    return poses


# ---------------------------------------------------------------------------
# objective evaluation


@dataclass
class _EpochGeometry:
    """Anchor sample of one epoch: constant indices and kernels per frame."""

    anchor_idx: list[np.ndarray]
    patch_ids: list[np.ndarray]
    kernels: list[np.ndarray]


def _sample_epoch_geometry(problem: ReconProblem, rng: np.random.Generator) -> _EpochGeometry:
    anchor_idx, patch_ids, kernels = [], [], []
    for f in problem.frames:
        grid = sample_patch_anchors(f.depth_pred, problem.patch_size, rng)
        anchor_idx.append(grid.flat_indices(f.depth_pred.width))
        patch_ids.append(grid.patch_ids)
        kernels.append(spatial_kernel(f.depth_pred.height, f.depth_pred.width, grid))
    return _EpochGeometry(anchor_idx, patch_ids, kernels)


def _aligned_depth_flat(problem: ReconProblem, geom: _EpochGeometry, i: int, p: dict):
    """Full-resolution aligned depth of frame i under parameter mapping p."""
    frame = problem.frames[i]
    base = np.where(frame.depth_pred.valid, frame.depth_pred.depth, 1.0).reshape(-1)
    alpha_i = dn.gather(p["alpha"], i)
    beta_i = dn.mul(dn.gather(p["beta"], i), problem.depth_norm)
    dg = dn.add(dn.mul(alpha_i, base), beta_i)
    preds = dn.gather(dg, geom.anchor_idx[i])
    w_anchor = dn.gather(p[f"w.{i}"], geom.patch_ids[i])
    targets = dn.mul(w_anchor, preds)
    slope, icept, _ = weighted_line_fit(preds, targets, geom.kernels[i])
    return dn.add(dn.mul(slope, dg), icept)


def _objective(problem: ReconProblem, geom: _EpochGeometry, p: dict,
               subset: np.ndarray | None):
    """(total, pc, gc, regu, diagnostics) under parameter mapping p."""
    n = problem.n_frames
    cons_frames = []
    for i in range(n):
        frame = problem.frames[i]
        depth_flat = _aligned_depth_flat(problem, geom, i, p)
        valid = frame.depth_pred.valid & (np.asarray(dn.value(depth_flat)) > 0).reshape(
            frame.depth_pred.valid.shape)
        chans = ([frame.image.values] if frame.image.channels == 1
                 else [frame.image.values[:, :, c] for c in range(3)])
        cons_frames.append(ConsistencyFrame(chans, depth_flat, valid))

    chains = _chain_prefixes(p, n)
    pc_sum = 0.0
    gc_sum = 0.0
    n_pc = 0
    n_gc = 0
    empty_pairs = []
    for (i, j) in problem.keyframes.pairs:
        R, t = _relative_rt(chains, i, j)
        pc, gc, count, excl = pair_consistency_terms(
            cons_frames[i], cons_frames[j], R, t, problem.intrinsics, subset=subset)
        if count == 0:
            empty_pairs.append((i, j))
            continue
        pc_sum = dn.add(pc_sum, pc)
        gc_sum = dn.add(gc_sum, gc)
        n_pc += count
        n_gc += count - excl
    if n_pc == 0:
        raise ValueError("no keyframe pair has any valid projected point")
    l_pc = dn.div(pc_sum, float(n_pc))
    l_gc = dn.div(gc_sum, float(max(n_gc, 1)))
    all_w = dn.concat([p[f"w.{i}"] for i in range(n)])
    l_regu = alignment_regularizer(all_w, p["alpha"], np.ones(n), p["beta"])
    total = total_recon_loss(l_pc, l_gc, l_regu, problem.weights)
    return total, l_pc, l_gc, l_regu, empty_pairs


def evaluate_full(problem: ReconProblem, seed: int = 0) -> dict[str, float]:
    """All-pixel losses under the current parameters (fresh anchor sample)."""
    geom = _sample_epoch_geometry(problem, np.random.default_rng([seed, 0xFFFF]))
    total, pc, gc, regu, empty = _objective(problem, geom, problem.params, subset=None)
    return {
        "total": float(dn.value(total)),
        "photometric": float(dn.value(pc)),
        "geometric": float(dn.value(gc)),
        "regularizer": float(dn.value(regu)),
        "empty_pairs": len(empty),
    }


def aligned_depths(problem: ReconProblem, seed: int = 0) -> list[DepthMap]:
    """Final aligned depth maps under the current parameters."""
    geom = _sample_epoch_geometry(problem, np.random.default_rng([seed, 0xFFFF]))
    out = []
    for i, frame in enumerate(problem.frames):
        flat = np.asarray(dn.value(_aligned_depth_flat(problem, geom, i, problem.params)))
        shape = (frame.depth_pred.height, frame.depth_pred.width)
        out.append(DepthMap(flat.reshape(shape), frame.depth_pred.valid))
    return out


# ---------------------------------------------------------------------------
# optimization loop


@dataclass
class EpochTrace:
    epoch: int
    start_full: dict[str, float]
    iter_losses: list[float] = field(default_factory=list)


@dataclass
class OptimizeResult:
    problem: ReconProblem
    epochs: list[EpochTrace]
    final_full: dict[str, float]
    initial_full: dict[str, float]
    lr_final: float
    step_retries: int


def _subsample_indices(height: int, width: int, stride: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(0, height, stride), np.arange(0, width, stride),
                         indexing="ij")
    return (ys * width + xs).reshape(-1)


def optimize(problem: ReconProblem, epochs: int = 3, iters_per_epoch: int = 1000,
             lr: float = DEFAULT_LR, lr_multipliers: dict[str, float] | None = None,
             lr_decay_per_epoch: float = DEFAULT_LR_DECAY,
             seed: int = 0, subsample: int = 2) -> OptimizeResult:
    """AdamW minimization of the reconstruction objective.

    Anchors are resampled once per epoch and the learning rate decays per
    epoch.  A non-finite loss rolls the step back and halves the learning
    rate, up to 5 times; persistent failure aborts with the trace attached.
    """
    initial_full = evaluate_full(problem, seed)
    shape = (problem.frames[0].depth_pred.height, problem.frames[0].depth_pred.width)
    subset = _subsample_indices(shape[0], shape[1], subsample)
    opt = AdamW(lr=lr, lr_multipliers=dict(DEFAULT_LR_MULTIPLIERS if lr_multipliers is None
                                           else lr_multipliers))
    traces: list[EpochTrace] = []
    retries = 0
    base_lr = lr
    last_good = {k: v.copy() for k, v in problem.params.items()}
    for epoch in range(epochs):
        opt.lr = base_lr * lr_decay_per_epoch ** epoch
        geom = _sample_epoch_geometry(problem, np.random.default_rng([seed, epoch]))
        trace = EpochTrace(epoch=epoch, start_full=evaluate_full(problem, seed))
        traces.append(trace)
        for _ in range(iters_per_epoch):
            for attempt in range(MAX_STEP_RETRIES + 1):
                tape = dn.Tape()
                leaves = {k: tape.leaf(v, trainable=True) for k, v in problem.params.items()}
                total, _, _, _, _ = _objective(problem, geom, leaves, subset)
                loss_val = float(dn.value(total))
                if np.isfinite(loss_val):
                    break
                # roll back to the pre-step state and halve the step size
                retries += 1
                for k, v in last_good.items():
                    np.copyto(problem.params[k], v)
                base_lr *= 0.5
                opt.lr *= 0.5
                if attempt == MAX_STEP_RETRIES:
                    raise RuntimeError(
                        f"non-finite loss persisted after {MAX_STEP_RETRIES} halvings; "
                        f"trace: {[t.iter_losses[-3:] for t in traces]}")
            for k, v in problem.params.items():
                np.copyto(last_good[k], v)
            grads = tape.backward(total)
            named = {k: grads[v] for k, v in leaves.items() if v in grads}
            opt.step(problem.params, named)
            _project_params(problem.params)
            trace.iter_losses.append(loss_val)
        _write_back_poses(problem)
    final_full = evaluate_full(problem, seed)
    return OptimizeResult(problem, traces, final_full, initial_full, opt.lr, retries)


def _project_params(params: dict[str, np.ndarray]) -> None:
    """Keep scales, weights, and shifts in their admissible ranges."""
    np.maximum(params["alpha"], PARAM_FLOOR, out=params["alpha"])
    for name, arr in params.items():
        if name.startswith("w."):
            np.maximum(arr, PARAM_FLOOR, out=arr)


def _write_back_poses(problem: ReconProblem) -> None:
    for i in range(problem.n_frames - 1):
        rot = problem.params[f"rot.{i}"]
        angle = np.linalg.norm(rot)
        if angle >= np.pi:  # wrap into the canonical range
            rot *= (angle - 2.0 * np.pi) / angle
        problem.rel_poses[i] = PoseSE3(rot.copy(), problem.params[f"trans.{i}"].copy())
