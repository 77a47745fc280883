import numpy as np
import pytest

from monorecon import synthetic
from monorecon.fusion import PointCloud, TsdfVolume, extract_surface, integrate, scene_bbox
from monorecon.geometry import DepthMap, Intrinsics, PoseSE3


def axis_ray_setup(voxel_z=95.0, trunc=10.0):
    """Camera at origin looking +z; a single-voxel column straddling the axis."""
    k = Intrinsics(fx=50.0, fy=50.0, cx=8.0, cy=8.0, width=17, height=17)
    d = DepthMap(np.full((17, 17), 100.0))
    vol = TsdfVolume(origin=[-1.0, -1.0, voxel_z - 1.0], dims=(1, 1, 1),
                     voxel_size=2.0, trunc=trunc)
    return k, d, vol


class TestIntegrate:
    def test_signed_distance_of_front_voxel(self):
        # plane at 100mm, voxel at z=95 on the axis: tsdf = +5 / tau
        k, d, vol = axis_ray_setup(voxel_z=95.0, trunc=10.0)
        integrate(vol, d, PoseSE3.identity(), k)
        assert vol.weight[0, 0, 0] == 1.0
        assert vol.tsdf[0, 0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_voxel_behind_beyond_truncation_untouched(self):
        k, d, vol = axis_ray_setup(voxel_z=115.0, trunc=10.0)
        integrate(vol, d, PoseSE3.identity(), k)
        assert vol.weight[0, 0, 0] == 0.0
        assert vol.tsdf[0, 0, 0] == 1.0

    def test_clamped_far_in_front(self):
        k, d, vol = axis_ray_setup(voxel_z=50.0, trunc=10.0)
        integrate(vol, d, PoseSE3.identity(), k)
        assert vol.tsdf[0, 0, 0] == 1.0
        assert vol.weight[0, 0, 0] == 1.0

    def test_same_frame_twice_doubles_weight_keeps_tsdf(self):
        k, d, vol = axis_ray_setup()
        integrate(vol, d, PoseSE3.identity(), k)
        once = vol.tsdf.copy()
        integrate(vol, d, PoseSE3.identity(), k)
        assert np.array_equal(vol.tsdf, once)
        assert vol.weight[0, 0, 0] == 2.0

    def test_no_coverage_is_noop(self):
        k, d, _ = axis_ray_setup()
        vol = TsdfVolume(origin=[1000.0, 1000.0, 1000.0], dims=(4, 4, 4), voxel_size=2.0)
        integrate(vol, d, PoseSE3.identity(), k)
        assert vol.weight.sum() == 0.0

    def test_order_independence(self):
        scene = synthetic.make_scene("terrain", width=32, height=24, n_frames=4, seed=1)
        frames = [synthetic.render_frame(scene, i) for i in range(4)]
        depths = [f[1] for f in frames]
        poses = [f[2] for f in frames]
        lo, hi = scene_bbox(depths, poses, scene.intrinsics)

        def fuse(order):
            vol = TsdfVolume.from_bbox(lo, hi, voxel_size=3.0)
            for i in order:
                integrate(vol, depths[i], poses[i], scene.intrinsics)
            return vol.tsdf

        a = fuse([0, 1, 2, 3])
        b = fuse([3, 1, 0, 2])
        assert np.max(np.abs(a - b)) < 1e-9


class TestExtractSurface:
    def test_empty_volume_warns_and_returns_empty(self):
        vol = TsdfVolume(origin=[0, 0, 0], dims=(3, 3, 3), voxel_size=1.0)
        with pytest.warns(UserWarning):
            cloud = extract_surface(vol)
        assert len(cloud) == 0

    def test_fused_plane_points_near_plane(self):
        scene = synthetic.make_scene("plane", width=48, height=36, n_frames=6, seed=2)
        vol = None
        for i in range(6):
            _, d, pose = synthetic.render_frame(scene, i)
            if vol is None:
                lo, hi = scene_bbox([d], [pose], scene.intrinsics)
                vol = TsdfVolume.from_bbox(lo, hi, voxel_size=2.0)
            integrate(vol, d, pose, scene.intrinsics)
        cloud = extract_surface(vol)
        assert len(cloud) > 200
        dist = np.abs(cloud.points[:, 2] - scene.plane_z)
        assert (dist <= vol.voxel_size).mean() >= 0.95

    def test_sphere_radius_error_median_below_voxel(self):
        scene = synthetic.make_scene("sphere", width=48, height=48, n_frames=20, seed=3)
        depths, poses = [], []
        for i in range(20):
            _, d, pose = synthetic.render_frame(scene, i)
            depths.append(d)
            poses.append(pose)
        lo, hi = scene_bbox(depths, poses, scene.intrinsics)
        vol = TsdfVolume.from_bbox(lo, hi, voxel_size=1.5)
        for d, pose in zip(depths, poses):
            integrate(vol, d, pose, scene.intrinsics)
        cloud = extract_surface(vol)
        assert len(cloud) > 500
        radii = np.linalg.norm(cloud.points - scene.sphere_center, axis=1)
        err = np.abs(radii - scene.sphere_radius)
        assert np.median(err) < vol.voxel_size

    def test_extracted_points_inside_bounds(self):
        scene = synthetic.make_scene("terrain", width=32, height=24, n_frames=3, seed=4)
        depths, poses = [], []
        for i in range(3):
            _, d, pose = synthetic.render_frame(scene, i)
            depths.append(d)
            poses.append(pose)
        lo, hi = scene_bbox(depths, poses, scene.intrinsics)
        vol = TsdfVolume.from_bbox(lo, hi, voxel_size=3.0)
        for d, pose in zip(depths, poses):
            integrate(vol, d, pose, scene.intrinsics)
        cloud = extract_surface(vol)
        vlo, vhi = vol.bounds()
        assert np.all(cloud.points >= vlo - 1e-9)
        assert np.all(cloud.points <= vhi + 1e-9)


class TestVolumeValidation:
    def test_truncation_must_cover_a_voxel(self):
        with pytest.raises(ValueError):
            TsdfVolume(origin=[0, 0, 0], dims=(2, 2, 2), voxel_size=2.0, trunc=1.0)

    def test_point_cloud_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, 0.0, np.nan]]))
