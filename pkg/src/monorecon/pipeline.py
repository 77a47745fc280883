"""Runnable pipelines behind the CLI: synthetic dataset generation, the toy
adaptation training demo, single-pair alignment, full reconstruction, and the
evaluation commands.

Every pipeline is deterministic given (config, seed): reports contain no
timestamps and all randomness flows from seeded generators.  Reports are
written twice, as sorted key=value text and as JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as dn
from .alignment import AlignmentParams, apply_alignment, sample_patch_anchors
from .config import RunConfig
from .dataio import (
    atomic_write_text,
    load_depth,
    load_image,
    load_intrinsics,
    load_ply,
    load_poses,
    save_depth_png,
    save_image,
    save_intrinsics,
    save_ply,
    save_poses,
)
from .fusion import TsdfVolume, extract_surface, integrate, scene_bbox
from .geometry import (
    DepthMap,
    Image,
    Intrinsics,
    PoseSE3,
    bilinear_flat,
    pixel_grid,
    pose_compose,
    pose_inverse,
    project_flat,
    rodrigues,
    warp_depth,
)
from .losses import (
    edge_smoothness_values,
    geometric_consistency,
    photometric_loss_values,
    sssi_loss_values,
    total_depth_loss,
)
from .lora import Phase, ToyBackbone, TrainSchedule, bind_trainable, save_checkpoint
from .metrics import align_depth_lsq, apply_pose, ate_rpe_5frame, depth_metrics, \
    icp_register, recon_metrics
from .optim import AdamW
from .recon import ReconFrame, aligned_depths, camera_poses, init_problem, optimize
from . import synthetic


class DataError(ValueError):
    """Missing or malformed input data."""


def appearance_calibration(image: Image, frame_index: int) -> Image:
    """Hook for plugging in a lighting-calibration model; identity by default."""
    return image


# ---------------------------------------------------------------------------
# reporting


def format_report(data: dict) -> str:
    lines = []
    for key in sorted(data):
        val = data[key]
        if isinstance(val, float):
            lines.append(f"{key}={val:.9g}")
        elif isinstance(val, (list, tuple)):
            lines.append(f"{key}=" + ",".join(f"{v:.9g}" if isinstance(v, float) else str(v)
                                              for v in val))
        else:
            lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def write_report(out_dir: Path, name: str, data: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / f"{name}.txt", format_report(data))
    atomic_write_text(out_dir / f"{name}.json",
                      json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class Dataset:
    images: list[Image]
    depths: list[DepthMap]            # reconstruction inputs (may be corrupted)
    init_rel_poses: list[PoseSE3]     # adjacent initialization poses
    gt_poses: list[PoseSE3]           # camera-to-world ground truth
    intrinsics: Intrinsics
    gt_depths: list[DepthMap] | None = None


def synth_dataset(out_dir: Path, surface: str = "terrain", frames: int = 10,
                  seed: int = 0, width: int = 64, height: int = 48,
                  corrupt_scale: tuple[float, float] | None = None,
                  corrupt_shift_frac: float = 0.0,
                  pose_noise: float = 0.0) -> Path:
    """Render a synthetic dataset to disk; optionally write affine-corrupted
    depths and noisy initialization poses next to the clean ground truth."""
    out_dir = Path(out_dir)
    for sub in ("rgb", "depth", "gt_depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    scene = synthetic.make_scene(surface, width=width, height=height,
                                 n_frames=frames, seed=seed)
    rng = np.random.default_rng([seed, 1])
    poses = []
    corruption_log = []
    for i in range(frames):
        img, depth, pose = synthetic.render_frame(scene, i)
        poses.append(pose)
        save_image(out_dir / "rgb" / f"frame_{i:04d}.png", img)
        save_depth_png(out_dir / "gt_depth" / f"frame_{i:04d}.png", depth)
        stored = depth
        a, b = 1.0, 0.0
        if corrupt_scale is not None or corrupt_shift_frac:
            lo, hi = corrupt_scale if corrupt_scale is not None else (1.0, 1.0)
            a = float(rng.uniform(lo, hi))
            span = float(depth.depth[depth.valid].max())
            b = float(rng.uniform(-1.0, 1.0) * corrupt_shift_frac * span)
            stored = DepthMap(np.maximum(a * depth.depth + b, 1e-3), depth.valid)
        corruption_log.append({"frame": i, "scale": a, "shift": b})
        save_depth_png(out_dir / "depth" / f"frame_{i:04d}.png", stored)
    save_poses(out_dir / "poses.txt", poses)

    init_rel = []
    for i in range(frames - 1):
        rel = pose_compose(pose_inverse(poses[i + 1]), poses[i])
        if pose_noise:
            rel = PoseSE3(rel.rotation * (1.0 + pose_noise * rng.standard_normal(3)),
                          rel.translation * (1.0 + pose_noise * rng.standard_normal(3)))
        init_rel.append(rel)
    # store initialization as camera-to-world built from the (possibly noisy)
    # relative chain, frame 0 at the origin
    init_abs = [PoseSE3.identity()]
    for rel in init_rel:
        init_abs.append(pose_compose(init_abs[-1], pose_inverse(rel)))
    save_poses(out_dir / "init_poses.txt", init_abs)
    save_intrinsics(out_dir / "intrinsics.txt", scene.intrinsics)
    atomic_write_text(out_dir / "scene.json", json.dumps({
        "surface": surface, "frames": frames, "seed": seed,
        "width": width, "height": height, "pose_noise": pose_noise,
        "corruption": corruption_log,
    }, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    rgb_dir = data_dir / "rgb"
    depth_dir = data_dir / "depth"
    if not rgb_dir.is_dir() or not depth_dir.is_dir():
        raise DataError(f"{data_dir} lacks rgb/ and depth/ directories")
    rgb_files = sorted(rgb_dir.glob("*.png"))
    if not rgb_files:
        raise DataError(f"no images found under {rgb_dir}")
    images, depths = [], []
    for f in rgb_files:
        images.append(load_image(f))
        dfile = depth_dir / f.name
        pfm = dfile.with_suffix(".pfm")
        if dfile.exists():
            depths.append(load_depth(dfile))
        elif pfm.exists():
            depths.append(load_depth(pfm))
        else:
            raise DataError(f"missing depth for frame {f.name}")
    try:
        intr = load_intrinsics(data_dir / "intrinsics.txt")
    except OSError as exc:
        raise DataError(f"missing intrinsics.txt in {data_dir}: {exc}") from exc
    gt_poses = load_poses(data_dir / "poses.txt")
    init_file = data_dir / "init_poses.txt"
    init_abs = load_poses(init_file) if init_file.exists() else gt_poses
    if len(init_abs) != len(images):
        raise DataError("pose count does not match frame count")
    init_rel = [pose_compose(pose_inverse(init_abs[i + 1]), init_abs[i])
                for i in range(len(init_abs) - 1)]
    gt_depth_dir = data_dir / "gt_depth"
    gt_depths = None
    if gt_depth_dir.is_dir():
        gt_depths = [load_depth(gt_depth_dir / f.name) for f in rgb_files]
    return Dataset(images, depths, init_rel, gt_poses, intr, gt_depths)


# ---------------------------------------------------------------------------
# reconstruction pipeline


def run_reconstruct(cfg: RunConfig, data_dir: Path, out_dir: Path) -> dict:
    """init -> optimize -> fuse -> export; returns the run report dict."""
    ds = load_dataset(data_dir)
    images = [appearance_calibration(img, i) for i, img in enumerate(ds.images)]
    frames = [ReconFrame(img, d) for img, d in zip(images, ds.depths)]
    problem = init_problem(
        frames, ds.init_rel_poses, ds.intrinsics, weights=cfg.loss_weights(),
        patch_size=cfg.patch_size, local_window=cfg.local_window,
        global_stride=cfg.global_stride or None)
    result = optimize(problem, epochs=cfg.epochs, iters_per_epoch=cfg.iters_per_epoch,
                      lr=cfg.learning_rate, seed=cfg.seed,
                      subsample=cfg.subsample_stride)

    final_depths = aligned_depths(result.problem, seed=cfg.seed)
    poses = camera_poses(result.problem)
    lo, hi = scene_bbox(final_depths, poses, ds.intrinsics)
    vol = TsdfVolume.from_bbox(lo, hi, voxel_size=cfg.voxel_size_mm or None)
    for d, pose in zip(final_depths, poses):
        integrate(vol, d, pose, ds.intrinsics)
    cloud = extract_surface(vol)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_ply(out_dir / "cloud.ply", cloud)
    save_poses(out_dir / "optimized_poses.txt", poses)

    p = result.problem.params
    report = {
        "frames": problem.n_frames,
        "keyframe_pairs": len(problem.keyframes.pairs),
        "epochs": cfg.epochs,
        "iters_per_epoch": cfg.iters_per_epoch,
        "seed": cfg.seed,
        "voxel_size_mm": vol.voxel_size,
        "truncation_mm": vol.trunc,
        "cloud_points": len(cloud),
        "initial_total": result.initial_full["total"],
        "initial_photometric": result.initial_full["photometric"],
        "initial_geometric": result.initial_full["geometric"],
        "final_total": result.final_full["total"],
        "final_photometric": result.final_full["photometric"],
        "final_geometric": result.final_full["geometric"],
        "final_regularizer": result.final_full["regularizer"],
        "geometric_reduction": (0.0 if result.initial_full["geometric"] == 0 else
                                1.0 - result.final_full["geometric"]
                                / result.initial_full["geometric"]),
        "epoch_start_totals": [t.start_full["total"] for t in result.epochs],
        "alpha": [float(x) for x in p["alpha"]],
        "beta_mm": [float(x * result.problem.depth_norm) for x in p["beta"]],
        "weight_mean": float(np.mean([p[f"w.{i}"].mean()
                                      for i in range(problem.n_frames)])),
        "weight_spread": float(np.mean([p[f"w.{i}"].std()
                                        for i in range(problem.n_frames)])),
        "valid_pixel_fraction": float(np.mean([d.valid.mean() for d in final_depths])),
        "step_retries": result.step_retries,
    }
    write_report(out_dir, "run_report", report)
    return report


# ---------------------------------------------------------------------------
# toy adaptation demo


def _spot_gradient_check(build_loss, params: dict[str, np.ndarray], names: list[str],
                         rng: np.random.Generator, probes: int = 12,
                         eps: float = 1e-5) -> float:
    """Central-difference probes of random trainable elements; max rel error."""
    tape = dn.Tape()
    leaves = {n: tape.leaf(params[n], trainable=True) for n in names}
    loss = build_loss(leaves)
    grads = tape.backward(loss)
    by_name = {n: grads.get(v) for n, v in leaves.items()}

    def eval_plain() -> float:
        return float(np.asarray(dn.value(build_loss(params))).reshape(()))

    worst = 0.0
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        arr = params[name]
        flat = arr.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = eval_plain()
        flat[j] = orig - eps
        f_minus = eval_plain()
        flat[j] = orig
        g_fd = (f_plus - f_minus) / (2 * eps)
        g_ad = 0.0 if by_name[name] is None else float(by_name[name].reshape(-1)[j])
        worst = max(worst, abs(g_ad - g_fd) / max(1.0, abs(g_fd)))
    return worst


def run_demo_lora(cfg: RunConfig, out_dir: Path, iters: int = 40,
                  warmup: int = 20) -> dict:
    """Train the toy gated-LoRA network self-supervised on a rendered pair,
    with gradient spot checks and the warm-up -> vector phase switch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = synthetic.make_scene("terrain", width=32, height=32, n_frames=2,
                                 seed=cfg.seed, focal=40.0)
    img_t, _, _ = synthetic.render_frame(scene, 0)
    img_s, _, _ = synthetic.render_frame(scene, 1)
    backbone = ToyBackbone(width=32, height=32, patch=8, channels=16, n_blocks=2,
                           rank=cfg.rank, conv_neck_after=(0,), seed=cfg.seed,
                           d_min=cfg.depth_min_mm, d_max=cfg.depth_max_mm)
    schedule = TrainSchedule(warmup_steps=warmup)
    opt = AdamW(lr=1e-2)
    rng = np.random.default_rng([cfg.seed, 2])
    # a perfectly constant depth prediction cannot be normalized by the
    # scale/shift-invariant loss; start the depth head slightly off neutral
    backbone.params["head_depth_w"][:] = rng.normal(scale=0.02,
                                                    size=backbone.params["head_depth_w"].shape)
    weights = cfg.loss_weights()

    flat_t = img_t.values.reshape(-1)
    flat_s = img_s.values.reshape(-1)
    chans_t = [img_t.values[:, :, c] for c in range(3)]
    uu, vv = pixel_grid(32, 32)
    h = w = 32
    full_valid = np.ones((h, w), bool)

    def build_loss(bound, fixed_valid=None, mask_out=None):
        depth_t = backbone.forward_depth(flat_t, bound)
        depth_s = backbone.forward_depth(flat_s, bound)
        rot, trans, intr4 = backbone.forward_pose_intrinsics(flat_t, flat_s, bound)
        R = rodrigues(rot)
        us, vs, _ = project_flat(depth_t, uu, vv, R, trans, intr4, intr4)
        if fixed_valid is not None:
            valid = fixed_valid
        else:
            uvals, vvals = dn.value(us), dn.value(vs)
            valid = ((uvals >= 0) & (uvals <= w - 1) & (vvals >= 0)
                     & (vvals <= h - 1)).reshape(h, w)
        if not valid.any():
            valid = full_valid  # degenerate pose; keep the loss defined
        if mask_out is not None:
            mask_out.append(valid)
        chans_w = []
        for c in range(3):
            sampled, _ = bilinear_flat(img_s.values[:, :, c], w, h, us, vs)
            chans_w.append(sampled)
        l_p = photometric_loss_values(chans_t, chans_w, valid, w, h, weights.alpha)
        warped_depth, _ = bilinear_flat(depth_s, w, h, us, vs)
        l_sssi = sssi_loss_values(depth_t, warped_depth, valid.reshape(-1))
        l_e = edge_smoothness_values(dn.reshape(depth_t, (h, w)), full_valid,
                                     img_t.values, w, h)
        return total_depth_loss(l_p, l_sssi, l_e, weights)

    losses_trace = []
    grad_checks = {}
    switch_step = None
    for step in range(iters):
        phase = schedule.phase
        if switch_step is None and phase == Phase.VECTOR_TUNE:
            switch_step = step
        names = backbone.trainable_names(phase, include_heads=True)
        if phase.value not in grad_checks:
            # the validity mask is a constant of differentiation: freeze it
            # while probing so finite differences see the smooth objective
            box: list = []
            build_loss(backbone.params, mask_out=box)
            frozen = box[0]
            grad_checks[phase.value] = _spot_gradient_check(
                lambda bound: build_loss(bound, fixed_valid=frozen),
                backbone.params, names, rng)
        tape = dn.Tape()
        bound = bind_trainable(tape, backbone, names)
        loss = build_loss(bound)
        grads = tape.backward(loss)
        named = {n: grads[v] for n, v in bound.items() if v in grads}
        opt.step(backbone.params, named)
        losses_trace.append(float(dn.value(loss)))
        schedule.advance()

    save_checkpoint(out_dir / "checkpoint.npz", backbone, schedule)
    report = {
        "iters": iters,
        "warmup_steps": warmup,
        "phase_switch_step": -1 if switch_step is None else switch_step,
        "rank": cfg.rank,
        "seed": cfg.seed,
        "loss_first": losses_trace[0],
        "loss_last": losses_trace[-1],
        "loss_trace": losses_trace,
        "grad_check_warm_up": grad_checks.get("warm_up", -1.0),
        "grad_check_vector_tune": grad_checks.get("vector_tune", -1.0),
        "warmup_trainable_params": sum(
            backbone.params[n].size for n in backbone.lora_param_names(Phase.WARM_UP)),
        "vector_trainable_params": sum(
            backbone.params[n].size for n in backbone.lora_param_names(Phase.VECTOR_TUNE)),
    }
    write_report(out_dir, "demo_report", report)
    return report


# ---------------------------------------------------------------------------
# single-pair alignment demo


def run_align(cfg: RunConfig, data_dir: Path, out_dir: Path,
              frame_a: int = 0, frame_b: int = 1) -> dict:
    """Closed-form global alignment of frame A's depth against frame B plus
    the local fit; reports the pair's geometric residual before and after."""
    ds = load_dataset(data_dir)
    n = len(ds.images)
    if not (0 <= frame_a < n and 0 <= frame_b < n) or frame_a == frame_b:
        raise DataError(f"frame pair ({frame_a}, {frame_b}) invalid for {n} frames")
    d_a, d_b = ds.depths[frame_a], ds.depths[frame_b]
    pose_ba = pose_compose(pose_inverse(ds.gt_poses[frame_a]), ds.gt_poses[frame_b])

    def pair_gc(depth_a: DepthMap) -> float:
        frames = [(ds.images[frame_a], depth_a), (ds.images[frame_b], d_b)]
        poses = [ds.gt_poses[frame_a], ds.gt_poses[frame_b]]
        out, _ = geometric_consistency(frames, [(0, 1)], poses, ds.intrinsics)
        return out

    before = pair_gc(d_a)
    # compare both depths in frame a: sample a's map at b's projected pixels
    # and express b's depth in a's frame, then fit the affine that reconciles
    # them
    wd = warp_depth(d_a, d_b, pose_ba, ds.intrinsics)
    overlap = wd.valid
    if overlap.sum() < 16:
        raise DataError("frames share too little overlap for alignment")
    fit = align_depth_lsq(DepthMap(wd.sampled.depth, overlap),
                          DepthMap(wd.target_in_source, overlap))
    grid = sample_patch_anchors(d_a, min(cfg.patch_size, d_a.height // 2), seed=cfg.seed)
    params = AlignmentParams(max(fit.scale, 1e-3), fit.shift, np.ones(grid.n_anchors))
    aligned = apply_alignment(d_a, params, grid)
    after = pair_gc(aligned)

    report = {
        "frame_a": frame_a,
        "frame_b": frame_b,
        "fitted_scale": fit.scale,
        "fitted_shift_mm": fit.shift,
        "fit_degenerate": bool(fit.degenerate),
        "anchors": grid.n_anchors,
        "geometric_before": before,
        "geometric_after": after,
        "overlap_pixels": int(overlap.sum()),
    }
    write_report(out_dir, "align_report", report)
    return report


# ---------------------------------------------------------------------------
# evaluation commands


def _depth_files(path: Path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    files = sorted(list(path.glob("*.png")) + list(path.glob("*.pfm")))
    if not files:
        raise DataError(f"no depth files under {path}")
    return files


def run_eval_depth(cfg: RunConfig, pred: Path, gt: Path, out_dir: Path) -> dict:
    pred_files = _depth_files(pred)
    gt_files = _depth_files(gt)
    if len(pred_files) != len(gt_files):
        raise DataError(f"{len(pred_files)} predictions vs {len(gt_files)} ground truths")
    sums: dict[str, float] = {}
    n = 0
    for pf, gf in zip(pred_files, gt_files):
        d_pred = load_depth(pf)
        d_gt = load_depth(gf)
        res = align_depth_lsq(d_pred, d_gt, max_depth_mm=cfg.depth_cap_mm)
        rep = depth_metrics(res.pred, res.gt)
        for k, v in rep.values.items():
            sums[k] = sums.get(k, 0.0) + v
        n += 1
    report = {f"mean_{k}": v / n for k, v in sums.items()}
    report["frames"] = n
    report["depth_cap_mm"] = cfg.depth_cap_mm
    write_report(out_dir, "depth_eval", report)
    return report


def run_eval_pose(cfg: RunConfig, pred: Path, gt: Path, out_dir: Path) -> dict:
    pred_poses = load_poses(pred)
    gt_poses = load_poses(gt)
    rep = ate_rpe_5frame(pred_poses, gt_poses)
    report = dict(rep.values)
    report["snippets"] = rep.counts["snippets"]
    report["flags"] = list(rep.flags)
    write_report(out_dir, "pose_eval", report)
    return report


def run_eval_recon(cfg: RunConfig, pred: Path, gt: Path, out_dir: Path) -> dict:
    pred_cloud = load_ply(pred)
    gt_cloud = load_ply(gt)
    icp = icp_register(pred_cloud, gt_cloud)
    registered = apply_pose(pred_cloud, icp.pose)
    rep = recon_metrics(registered, gt_cloud, threshold=cfg.recon_threshold_mm)
    report = dict(rep.values)
    report.update({
        "threshold_mm": cfg.recon_threshold_mm,
        "icp_rms": icp.rms,
        "icp_fitness": icp.fitness,
        "icp_iterations": icp.iterations,
        "pred_points": rep.counts["pred_points"],
        "gt_points": rep.counts["gt_points"],
    })
    write_report(out_dir, "recon_eval", report)
    return report
