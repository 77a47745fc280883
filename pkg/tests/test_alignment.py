import numpy as np
import pytest

from monorecon import autodiff as dn
from monorecon.alignment import (
    AlignmentParams,
    apply_alignment,
    anchor_values,
    global_align,
    lwlr_maps,
    sample_patch_anchors,
    weighted_line_fit,
)
from monorecon.geometry import DepthMap
from monorecon import synthetic


class TestGlobalAlign:
    def test_identity(self):
        d = DepthMap(np.array([[5.0, 7.0], [9.0, 11.0]]))
        out = global_align(d, 1.0, 0.0)
        assert np.array_equal(out.depth, d.depth)
        assert np.array_equal(out.valid, d.valid)

    def test_hand_values(self):
        d = DepthMap(np.array([[1.0, 2.0]]))
        out = global_align(d, 2.0, 0.5)
        assert np.array_equal(out.depth, [[2.5, 4.5]])

    def test_nonpositive_result_invalidated(self):
        d = DepthMap(np.array([[1.0]]))
        out = global_align(d, 0.5, -1.0)
        assert not out.valid[0, 0]

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            global_align(DepthMap(np.ones((2, 2))), 0.0, 0.0)


class TestPatchAnchors:
    def test_one_anchor_per_quadrant(self):
        d = DepthMap(np.full((8, 8), 10.0))
        grid = sample_patch_anchors(d, 4, seed=0)
        assert grid.n_anchors == 4
        quadrant = 2 * (grid.rows // 4) + (grid.cols // 4)
        assert sorted(quadrant) == [0, 1, 2, 3]
        # every anchor inside its own patch
        assert np.array_equal(grid.patch_ids, quadrant)

    def test_fully_invalid_patch_skipped(self):
        depth = np.full((8, 8), 10.0)
        depth[:4, :4] = -1.0  # whole first quadrant invalid
        grid = sample_patch_anchors(DepthMap(depth), 4, seed=0)
        assert grid.n_anchors == 3
        assert 0 not in grid.patch_ids

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(1)
        d = DepthMap(rng.uniform(5, 50, size=(16, 16)))
        a = sample_patch_anchors(d, 4, seed=42)
        b = sample_patch_anchors(d, 4, seed=42)
        assert np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols)

    def test_no_anchors_rejected(self):
        with pytest.raises(ValueError):
            sample_patch_anchors(DepthMap(np.full((4, 4), -1.0)), 4)

    def test_spread_surrogates(self):
        rng = np.random.default_rng(2)
        d = DepthMap(rng.uniform(5, 50, size=(32, 32)))
        grid = sample_patch_anchors(d, 8, seed=3)
        pts = np.stack([grid.rows, grid.cols], axis=1).astype(float)
        dists = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() >= 1.0
        assert grid.n_anchors == 16


class TestAnchorValues:
    def test_unit_weights_reproduce_depths(self):
        rng = np.random.default_rng(4)
        d = DepthMap(rng.uniform(5, 50, size=(8, 8)))
        grid = sample_patch_anchors(d, 4, seed=0)
        vals = dn.value(anchor_values(d, grid, np.ones(grid.n_anchors)))
        assert np.array_equal(vals, d.depth.reshape(-1)[grid.flat_indices(8)])

    def test_weight_scales_anchor(self):
        d = DepthMap(np.full((4, 4), 5.0))
        grid = sample_patch_anchors(d, 4, seed=0)
        vals = dn.value(anchor_values(d, grid, np.array([2.0])))
        assert vals[0] == 10.0


class TestLineFit:
    def test_unit_weights_give_identity_fit_exactly(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(10, 100, size=6)
        kernel = rng.uniform(0.1, 1.0, size=(20, 6))
        slope, icept, fb = weighted_line_fit(x, x * 1.0, kernel)
        assert fb == 0
        assert np.array_equal(dn.value(slope), np.ones(20))
        assert np.array_equal(dn.value(icept), np.zeros(20))

    def test_pure_scaling_fit(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(10, 100, size=5)
        kernel = rng.uniform(0.1, 1.0, size=(8, 5))
        slope, icept, _ = weighted_line_fit(x, 3.0 * x, kernel)
        assert np.allclose(dn.value(slope), 3.0, atol=1e-9)
        assert np.allclose(dn.value(icept), 0.0, atol=1e-7)

    def test_two_point_line_by_hand(self):
        # anchors (1, 3) and (2, 5) with equal spatial weight: y = 2x + 1
        slope, icept, _ = weighted_line_fit(np.array([1.0, 2.0]), np.array([3.0, 5.0]),
                                            np.ones((4, 2)))
        assert np.allclose(dn.value(slope), 2.0, atol=1e-12)
        assert np.allclose(dn.value(icept), 1.0, atol=1e-12)

    def test_degenerate_fallback(self):
        # identical predictors: slope from the weighted-mean ratio, zero shift
        x = np.full(3, 10.0)
        slope, icept, fb = weighted_line_fit(x, 2.0 * x, np.ones((5, 3)))
        assert fb == 5
        assert np.allclose(dn.value(slope), 2.0, atol=1e-12)
        assert np.array_equal(dn.value(icept), np.zeros(5))

    def test_anchor_order_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(10, 100, size=8)
        y = 1.7 * x + rng.normal(size=8)
        kernel = rng.uniform(0.1, 1.0, size=(10, 8))
        s0, i0, _ = weighted_line_fit(x, y, kernel)
        perm = rng.permutation(8)
        s1, i1, _ = weighted_line_fit(x[perm], y[perm], kernel[:, perm])
        assert np.allclose(dn.value(s0), dn.value(s1), atol=1e-12)
        assert np.allclose(dn.value(i0), dn.value(i1), atol=1e-12)


class TestApplyAlignment:
    def test_identity_parameters_exact(self):
        scene = synthetic.make_scene("terrain", width=32, height=32, n_frames=2, seed=8)
        _, d, _ = synthetic.render_frame(scene, 0)
        grid = sample_patch_anchors(d, 8, seed=1)
        out = apply_alignment(d, AlignmentParams.identity(grid.n_anchors), grid)
        assert np.array_equal(out.depth[out.valid], d.depth[d.valid])
        assert np.array_equal(out.valid, d.valid)

    def test_recovers_known_affine_corruption(self):
        # corrupt with a=1.7, b=12mm; closed-form inverse restores within 1e-6
        scene = synthetic.make_scene("terrain", width=32, height=32, n_frames=2, seed=9)
        _, d, _ = synthetic.render_frame(scene, 0)
        a, b = 1.7, 12.0
        corrupted = DepthMap(a * d.depth + b, d.valid)
        grid = sample_patch_anchors(corrupted, 8, seed=2)
        params = AlignmentParams(1.0 / a, -b / a, np.ones(grid.n_anchors))
        restored = apply_alignment(corrupted, params, grid)
        err = np.abs(restored.depth - d.depth)[restored.valid]
        assert err.max() < 1e-6

    def test_validity_never_revived(self):
        rng = np.random.default_rng(10)
        depth = rng.uniform(20, 80, size=(16, 16))
        valid = rng.uniform(size=(16, 16)) > 0.2
        d = DepthMap(depth, valid)
        grid = sample_patch_anchors(d, 4, seed=3)
        out = apply_alignment(d, AlignmentParams(0.9, -1.0, np.ones(grid.n_anchors)), grid)
        assert not np.any(out.valid & ~d.valid)

    def test_lwlr_rejects_constant_anchors(self):
        d = DepthMap(np.full((8, 8), 30.0))
        grid = sample_patch_anchors(d, 4, seed=0)
        with pytest.raises(ValueError):
            lwlr_maps(d, grid, np.ones(grid.n_anchors))

    def test_differentiable_in_weights_and_global_params(self):
        scene = synthetic.make_scene("terrain", width=16, height=16, n_frames=2, seed=11)
        _, d, _ = synthetic.render_frame(scene, 0)
        grid = sample_patch_anchors(d, 8, seed=4)
        from monorecon.alignment import global_align_values, spatial_kernel

        kernel = spatial_kernel(16, 16, grid)
        idx = grid.flat_indices(16)

        def f(v):
            dg = global_align_values(d.depth.reshape(-1), v["alpha"], v["beta"])
            preds = dn.gather(dg, idx)
            targets = dn.mul(v["w"], preds)
            slope, icept, _ = weighted_line_fit(preds, targets, kernel)
            aligned = dn.add(dn.mul(slope, dg), icept)
            return dn.mean(dn.smooth_abs(dn.sub(aligned, d.depth.reshape(-1))))

        report = dn.finite_diff_check(
            f,
            {
                "alpha": (np.array(1.3), True),
                "beta": (np.array(-2.0), True),
                "w": (np.full(grid.n_anchors, 1.1), True),
            },
        )
        assert report.max_rel_error < 1e-4
