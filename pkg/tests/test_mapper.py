import numpy as np
import pytest

from splatstream.geometry import (CameraIntrinsics, DepthMap, ImageBuffer,
                                  Pose)
from splatstream.mapper import (MapperConfig, PointCloud, extract_points,
                                init_splats, schedule_iterations,
                                unexplored_mask, voxel_downsample)
from splatstream.splats import gef_density
from splatstream.splats.raster import RenderOutput


def as_render(pixels, alpha=1.0):
    h, w = pixels.shape[:2]
    return RenderOutput(color=ImageBuffer(pixels),
                        depth=DepthMap(np.zeros((h, w))),
                        alpha=np.full((h, w), float(alpha)))


def surface_distance(points):
    """Distance to the nearest analytic surface of the default room scene."""
    room_lo, room_hi = np.array([-2.0, -1.5, -2.0]), np.array([2.0, 1.5, 2.0])
    wall = np.minimum(np.abs(points - room_lo),
                      np.abs(room_hi - points)).min(axis=1)
    lo, hi = np.array([1.0, 0.4, -1.5]), np.array([1.7, 1.5, -0.8])
    q = np.maximum(lo - points, points - hi)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.abs(np.minimum(q.max(axis=1), 0.0))
    crate = np.where(q.max(axis=1) > 0, outside, inside)
    sphere = np.abs(np.linalg.norm(points - np.array([-1.35, 0.9, 1.1]),
                                   axis=1) - 0.45)
    return np.minimum(np.minimum(wall, crate), sphere)


class TestUnexploredMask:
    def test_perfect_render_empty_mask(self, rng):
        img = ImageBuffer(rng.uniform(0, 1, (32, 32, 3)))
        mask = unexplored_mask(img, as_render(img.pixels.copy(), alpha=1.0))
        assert not mask.any()

    def test_zero_alpha_full_mask(self, rng):
        img = ImageBuffer(rng.uniform(0, 1, (32, 32, 3)))
        mask = unexplored_mask(img, as_render(img.pixels.copy(), alpha=0.0))
        assert mask.all()

    def test_uniform_error_patch_masked(self):
        img = ImageBuffer(np.full((32, 32, 3), 0.5))
        bad = img.pixels.copy()
        bad[:16, :16] += 0.1  # patch PSNR = 20 dB < 40
        mask = unexplored_mask(img, as_render(bad))
        assert mask[:16, :16].all()
        assert not mask[16:, 16:].any()

    def test_resolution_mismatch(self, rng):
        img = ImageBuffer(rng.uniform(0, 1, (32, 32, 3)))
        with pytest.raises(ValueError):
            unexplored_mask(img, as_render(np.zeros((16, 16, 3))))


class TestExtractPoints:
    def test_empty_mask(self, simple_K):
        depth = DepthMap(np.full((100, 100), 2.0))
        img = ImageBuffer(np.full((100, 100, 3), 0.5))
        cloud = extract_points(depth, img, np.zeros((100, 100), dtype=bool),
                               Pose.identity(), simple_K)
        assert len(cloud) == 0

    def test_frontoparallel_plane(self, simple_K):
        depth = DepthMap(np.full((100, 100), 2.0))
        img = ImageBuffer(np.full((100, 100, 3), 0.5))
        cloud = extract_points(depth, img, np.ones((100, 100), dtype=bool),
                               Pose.identity(), simple_K)
        assert len(cloud) == 100 * 100
        assert np.allclose(cloud.positions[:, 2], 2.0)
        assert np.allclose(cloud.colors, 0.5)

    def test_invalid_depth_skipped(self, simple_K):
        vals = np.full((100, 100), 2.0)
        vals[10, 10] = 0.0
        cloud = extract_points(DepthMap(vals),
                               ImageBuffer(np.full((100, 100, 3), 0.5)),
                               np.ones((100, 100), dtype=bool),
                               Pose.identity(), simple_K)
        assert len(cloud) == 100 * 100 - 1

    def test_gt_depth_lands_on_scene_surfaces(self, room_frames_small):
        scene, frames = room_frames_small
        frame = frames[3]
        mask = np.ones(frame.depth.shape, dtype=bool)
        cloud = extract_points(frame.depth, frame.image, mask, frame.pose,
                               scene.intrinsics)
        assert surface_distance(cloud.positions).max() < 1e-3


class TestVoxelDownsample:
    def test_single_voxel_centroid(self, rng):
        pos = rng.uniform(0.0, 0.004, (1000, 3))
        col = rng.uniform(0, 1, (1000, 3))
        out = voxel_downsample(PointCloud(pos, col), 0.005)
        assert len(out) == 1
        assert np.allclose(out.positions[0], pos.mean(axis=0))
        assert np.allclose(out.colors[0], col.mean(axis=0))

    def test_far_points_untouched(self):
        pos = np.arange(12, dtype=np.float64).reshape(4, 3)  # meters apart
        col = np.full((4, 3), 0.5)
        out = voxel_downsample(PointCloud(pos, col), 0.005)
        assert np.array_equal(out.positions, pos)

    def test_voxel_assignment_bruteforce(self, rng):
        pos = rng.uniform(-0.05, 0.05, (500, 3))
        cloud = PointCloud(pos, rng.uniform(0, 1, (500, 3)))
        out = voxel_downsample(cloud, 0.01)
        in_keys = set(map(tuple, np.floor(pos / 0.01).astype(int)))
        out_keys = [tuple(k) for k in
                    np.floor(out.positions / 0.01).astype(int)]
        assert len(out_keys) == len(set(out_keys))
        assert set(out_keys) <= in_keys
        assert len(out) == len(in_keys)

    def test_idempotent(self, rng):
        cloud = PointCloud(rng.uniform(-0.5, 0.5, (300, 3)),
                           rng.uniform(0, 1, (300, 3)))
        once = voxel_downsample(cloud, 0.05)
        twice = voxel_downsample(once, 0.05)
        assert np.array_equal(once.positions, twice.positions)

    def test_empty(self):
        assert len(voxel_downsample(PointCloud.empty(), 0.01)) == 0


class TestInitSplats:
    def test_empty_cloud(self):
        assert init_splats(PointCloud.empty()) == []

    def test_single_point_prescription(self):
        cloud = PointCloud(np.array([[1.0, 2.0, 3.0]]),
                           np.array([[0.5, 0.5, 0.5]]))
        (s,) = init_splats(cloud)
        assert np.array_equal(s.mu, [1.0, 2.0, 3.0])
        assert np.array_equal(s.color, [0.5, 0.5, 0.5])
        assert np.array_equal(s.quat, [1.0, 0.0, 0.0, 0.0])
        assert s.beta == pytest.approx(2.0, abs=1e-12)
        assert s.opacity == pytest.approx(0.1, abs=1e-12)
        assert gef_density(s.mu, s) == 1.0

    def test_order_preserving(self, rng):
        pos = rng.uniform(-1, 1, (20, 3))
        col = rng.uniform(0, 1, (20, 3))
        splats = init_splats(PointCloud(pos, col))
        assert len(splats) == 20
        for i, s in enumerate(splats):
            assert np.array_equal(s.mu, pos[i])
            assert np.array_equal(s.color, col[i])

    def test_scale_tracks_neighbor_spacing(self):
        voxel = 0.005
        pos = np.array([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0], [0.04, 0.0, 0.0]])
        splats = init_splats(PointCloud(pos, np.full((3, 3), 0.5)), voxel)
        assert np.allclose(splats[0].scale, 0.01)  # half of 0.02
        # widely separated points are clamped to 10 * voxel
        far = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        splats = init_splats(PointCloud(far, np.full((2, 3), 0.5)), voxel)
        assert np.allclose(splats[0].scale, 10 * voxel)


class TestScheduleIterations:
    def test_single_keyframe(self):
        cfg = MapperConfig(iters_window=500, iters_global=500)
        sched = schedule_iterations(0, [0], cfg)
        assert len(sched) == 1000
        assert (sched == 0).all()

    def test_window_and_global_membership(self):
        cfg = MapperConfig(iters_window=500, iters_global=500, window_span=5)
        all_k = list(range(100))
        sched = schedule_iterations(50, all_k, cfg)
        assert len(sched) == 1000
        assert (np.abs(sched[:500] - 50) <= 5).all()
        assert ((sched >= 0) & (sched <= 99)).all()
        assert (np.abs(sched[500:] - 50) > 5).any()  # global part roams

    def test_seeded_determinism(self):
        cfg = MapperConfig(window_span=3, seed=7)
        a = schedule_iterations(10, list(range(30)), cfg)
        b = schedule_iterations(10, list(range(30)), cfg)
        assert np.array_equal(a, b)

    def test_no_keyframes(self):
        with pytest.raises(ValueError):
            schedule_iterations(0, [], MapperConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MapperConfig(patch_size=0)
        with pytest.raises(ValueError):
            MapperConfig(voxel_size=0.0)
