import numpy as np
import pytest

from nerfkit.cameras import Camera, warp_point
from nerfkit.scene import (
    BoxSceneConfig,
    TextureSpec,
    format_scene_config,
    gt_pixel_samples,
    load_scene,
    make_box_scene,
    make_sparse_points,
    parse_scene_config,
    render_ground_truth,
    scene_to_bundle,
    write_scene,
)


@pytest.fixture(scope="module")
def scene():
    return make_box_scene(BoxSceneConfig())


def axis_facing_camera(scene, res=64):
    """Camera at the box center looking straight at the x-hi wall."""
    center = 0.5 * (scene.lo + scene.hi)
    focal = 0.5 * res / np.tan(np.radians(35.0))
    K = np.array([[focal, 0, (res - 1) / 2], [0, focal, (res - 1) / 2], [0, 0, 1.0]])
    # world->camera: x_cam = -y_world (right), y_cam = -z_world (down), z_cam = +x_world
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ center
    return Camera(K, M, res, res)


class TestMakeBoxScene:
    def test_deterministic(self):
        a = make_box_scene(BoxSceneConfig(seed=0))
        b = make_box_scene(BoxSceneConfig(seed=0))
        assert len(a.cameras) == 23
        for ca, cb in zip(a.cameras, b.cameras):
            assert np.array_equal(ca.M, cb.M)

    def test_seed_changes_trajectory(self):
        a = make_box_scene(BoxSceneConfig(), seed=0)
        b = make_box_scene(BoxSceneConfig(), seed=1)
        assert not np.allclose(a.cameras[0].M, b.cameras[0].M)

    def test_single_camera_rejected(self):
        with pytest.raises(ValueError):
            BoxSceneConfig(n_cameras=1, test_views=(0,))

    def test_cameras_inside_box(self, scene):
        for cam in scene.cameras:
            c = cam.center()
            assert np.all(c > scene.lo) and np.all(c < scene.hi)

    def test_train_test_split(self, scene):
        assert scene.test_indices == [5, 11, 17]
        assert len(scene.train_indices) == 20
        assert set(scene.train_indices) | set(scene.test_indices) == set(range(23))

    def test_bounds_cover_geometry(self, scene):
        assert 0 < scene.t_near < scene.t_far
        assert scene.t_far >= scene.diagonal


class TestGroundTruth:
    def test_axial_ray_depth(self, scene):
        cam = axis_facing_camera(scene)
        # principal pixel: ray along +x from the center hits x-hi at half extent
        _, z, _, faces = gt_pixel_samples(scene, cam, np.array([[31.5, 31.5]]))
        assert faces[0] == 1
        assert z[0] == pytest.approx(scene.hi[0] - 0.5 * (scene.lo[0] + scene.hi[0]), abs=1e-12)

    def test_fronto_parallel_wall_constant_depth(self, scene):
        cam = axis_facing_camera(scene)
        rgb, depth = render_ground_truth(scene, cam, 64, 64)
        central = depth[24:40, 24:40]
        np.testing.assert_allclose(central, central[0, 0], atol=1e-12)
        assert rgb.shape == (64, 64, 3)

    def test_depth_bounds(self, scene):
        for cam in scene.cameras[:5]:
            _, depth = render_ground_truth(scene, cam, 64, 64)
            assert np.all(depth > 0)
            assert np.all(depth <= scene.diagonal + 1e-9)

    def test_flat_wall_points_coplanar(self, scene):
        # back-projected GT depths of one wall must sit on an exact plane
        cam = scene.cameras[0]
        us, vs = np.meshgrid(np.arange(64), np.arange(64))
        pixels = np.stack([us.ravel(), vs.ravel()], axis=-1).astype(float)
        _, z, _, faces = gt_pixel_samples(scene, cam, pixels)
        face = np.bincount(faces).argmax()
        sel = faces == face
        from nerfkit.cameras import back_project

        pts = back_project(pixels[sel], z[sel], cam.K)
        centroid = pts.mean(axis=0)
        _, svals, vt = np.linalg.svd(pts - centroid)
        normal = vt[-1]
        dev = np.abs((pts - centroid) @ normal)
        assert dev.mean() < 1e-9

    def test_warp_with_gt_depth_matches_color(self, scene):
        # end-to-end oracle: warping with true depth lands on the same
        # surface point, whose Lambertian color is identical
        rng = np.random.default_rng(0)
        cam_t, cam_s = scene.cameras[0], scene.cameras[1]
        pixels = rng.uniform(5, 58, size=(200, 2))
        colors_t, z_t, _, faces_t = gt_pixel_samples(scene, cam_t, pixels)
        checked = 0
        for p, c_t, z, f_t in zip(pixels, colors_t, z_t, faces_t):
            try:
                uv, ok = warp_point(p, z, cam_t, cam_s)
            except Exception:
                continue
            if not ok:
                continue
            c_s, _, _, f_s = gt_pixel_samples(scene, cam_s, uv[None])
            if f_s[0] != f_t:
                continue  # grazing hit switched faces right at an edge
            np.testing.assert_allclose(c_s[0], c_t, atol=1e-6)
            checked += 1
        assert checked > 50

    def test_warp_composition_recovers_pixel(self, scene):
        rng = np.random.default_rng(1)
        cam_t, cam_s = scene.cameras[2], scene.cameras[3]
        pixels = rng.uniform(5, 58, size=(100, 2))
        _, z_t, _, _ = gt_pixel_samples(scene, cam_t, pixels)
        checked = 0
        for p, z in zip(pixels, z_t):
            try:
                uv, ok = warp_point(p, z, cam_t, cam_s)
            except Exception:
                continue
            if not ok:
                continue
            _, z_s, _, _ = gt_pixel_samples(scene, cam_s, uv[None])
            back, _ = warp_point(uv, z_s[0], cam_s, cam_t)
            np.testing.assert_allclose(back, p, atol=1e-6)
            checked += 1
        assert checked > 30


class TestSparsePoints:
    def test_exact_geometry(self, scene):
        points = make_sparse_points(scene, 50, pixel_noise_sigma=0.0, outlier_fraction=0.0, seed=0)
        bundle = scene_to_bundle(scene, points)
        for p in bundle.points:
            assert p.e_i < 1e-6
            assert p.w_i > 1 - 1e-6

    def test_outlier_count_and_weights(self, scene):
        lower = 0
        for seed in range(10):
            points = make_sparse_points(
                scene, 100, pixel_noise_sigma=0.5, outlier_fraction=0.1, seed=seed
            )
            bundle = scene_to_bundle(scene, points)
            outlier_ids = {p.point_id for p in points[-100:] if False}
            # outliers were displaced in-place; recover them by reprojection error rank
            ws = np.array([p.w_i for p in bundle.points])
            es = np.array([p.e_i for p in bundle.points])
            n_out = 10
            out_mask = np.zeros(100, dtype=bool)
            out_mask[np.argsort(es)[-n_out:]] = True
            if ws[out_mask].mean() < ws[~out_mask].mean():
                lower += 1
        assert lower >= 9  # displaced points carry lower confidence

    def test_exactly_n_corrupted(self, scene):
        clean = make_sparse_points(scene, 100, 0.5, 0.0, seed=3)
        dirty = make_sparse_points(scene, 100, 0.5, 0.1, seed=3)
        moved = sum(
            0 if np.array_equal(c.xyz, d.xyz) else 1 for c, d in zip(clean, dirty)
        )
        assert moved == 10

    def test_deterministic(self, scene):
        a = make_sparse_points(scene, 30, 0.5, 0.1, seed=5)
        b = make_sparse_points(scene, 30, 0.5, 0.1, seed=5)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.xyz, pb.xyz)
            assert len(pa.observations) == len(pb.observations)

    def test_rejects_zero_points(self, scene):
        with pytest.raises(ValueError):
            make_sparse_points(scene, 0)


class TestSceneIO:
    def test_config_roundtrip(self, scene):
        text = format_scene_config(scene.config, scene)
        config, t_near, t_far = parse_scene_config(text)
        assert config == scene.config
        assert t_near == scene.t_near and t_far == scene.t_far

    def test_write_and_load(self, tmp_path, scene):
        points = make_sparse_points(scene, 40, 0.5, 0.1, seed=0)
        write_scene(scene, points, tmp_path / "scene")
        loaded = load_scene(tmp_path / "scene")
        assert len(loaded.images) == 23
        assert len(loaded.train_ids) == 20 and len(loaded.test_ids) == 3
        assert loaded.t_near == scene.t_near
        # PNG quantization is the only loss on images
        rgb, depth = render_ground_truth(scene, scene.cameras[0], 64, 64)
        first = loaded.view_order[0]
        assert np.max(np.abs(loaded.images[first] - rgb)) <= 0.5 / 255 + 1e-12
        # PFM depth is float32-exact
        np.testing.assert_allclose(loaded.gt_depths[first], depth, atol=1e-5)
        # keypoint weights survive the round trip
        assert len(loaded.bundle.points) == 40
        assert all(p.w_i > 0 for p in loaded.bundle.usable_points())

    def test_texture_validation(self):
        with pytest.raises(ValueError):
            TextureSpec("plaid", (1, 0, 0))
        with pytest.raises(ValueError):
            TextureSpec("checker", (1, 0, 0), scale=0.0)
