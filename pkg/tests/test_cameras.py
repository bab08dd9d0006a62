import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfkit.cameras import (
    Camera,
    CameraError,
    PointBehindCamera,
    SupportPatch,
    back_project,
    bilinear_sample,
    camera_rays,
    project,
    support_domain,
    warp_patch,
    warp_point,
)


def make_K(fx=100.0, fy=100.0, cx=50.0, cy=50.0):
    return np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def make_camera(K=None, R=None, t=None, width=100, height=100):
    K = make_K() if K is None else K
    M = np.eye(4)
    if R is not None:
        M[:3, :3] = R
    if t is not None:
        M[:3, 3] = t
    return Camera(K, M, width, height)


class TestCamera:
    def test_rejects_bad_rotation(self):
        M = np.eye(4)
        M[0, 0] = 2.0
        with pytest.raises(CameraError):
            Camera(make_K(), M, 10, 10)

    def test_rejects_reflection(self):
        M = np.eye(4)
        M[0, 0] = -1.0  # det -1
        with pytest.raises(CameraError):
            Camera(make_K(), M, 10, 10)

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(CameraError):
            Camera(make_K(fx=-1.0), np.eye(4), 10, 10)

    def test_center_and_inverse(self):
        R = rotation_about([0, 0, 1], 0.3)
        t = np.array([1.0, -2.0, 0.5])
        cam = make_camera(R=R, t=t)
        np.testing.assert_allclose(cam.M @ cam.inverse_M(), np.eye(4), atol=1e-12)
        np.testing.assert_allclose(cam.M[:3, :3] @ cam.center() + cam.t, 0, atol=1e-12)


class TestBackProject:
    def test_principal_point_on_axis(self):
        p = back_project(np.array([50.0, 50.0]), 2.0, make_K())
        np.testing.assert_allclose(p, [0.0, 0.0, 2.0])

    def test_identity_intrinsics(self):
        p = back_project(np.array([1.0, 1.0]), 3.0, np.eye(3))
        np.testing.assert_allclose(p, [3.0, 3.0, 3.0])

    def test_hand_evaluated_chain(self):
        # K^-1 [60, 40, 1] = [0.1, -0.1, 1]; times depth 5 -> (0.5, -0.5, 5)
        p = back_project(np.array([60.0, 40.0]), 5.0, make_K())
        np.testing.assert_allclose(p, [0.5, -0.5, 5.0], atol=1e-12)

    def test_z_exact(self):
        p = back_project(np.array([13.0, 77.0]), 0.3, make_K(fx=123.4, fy=77.7))
        assert p[2] == 0.3

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            back_project(np.array([0.0, 0.0]), 0.0, make_K())


class TestProject:
    def test_optical_axis(self):
        np.testing.assert_allclose(project(np.array([0.0, 0.0, 2.0]), make_K()), [50.0, 50.0])

    def test_inverse_of_back_project(self):
        np.testing.assert_allclose(
            project(np.array([0.5, -0.5, 5.0]), make_K()), [60.0, 40.0], atol=1e-12
        )

    def test_behind_camera(self):
        with pytest.raises(PointBehindCamera):
            project(np.array([0.0, 0.0, -1.0]), make_K())

    @given(
        u=st.floats(0, 99),
        v=st.floats(0, 99),
        depth=st.floats(0.01, 100),
    )
    @settings(max_examples=100, deadline=None)
    def test_roundtrip_property(self, u, v, depth):
        K = make_K(fx=80.0, fy=120.0, cx=47.5, cy=53.25)
        uv = project(back_project(np.array([u, v]), depth, K), K)
        np.testing.assert_allclose(uv, [u, v], atol=1e-10)


class TestWarpPoint:
    def test_identity_pose_pair(self):
        R = rotation_about([1, 2, 3], 0.4)
        cam = make_camera(R=R, t=np.array([0.3, 0.1, -0.2]))
        uv, ok = warp_point(np.array([31.0, 62.0]), 2.5, cam, cam)
        assert ok
        np.testing.assert_allclose(uv, [31.0, 62.0], atol=1e-10)

    def test_motion_along_optical_axis_fixes_principal_point(self):
        cam_t = make_camera()
        # source camera shifted one unit forward along its own optical axis
        M_s = np.eye(4)
        M_s[2, 3] = -1.0
        cam_s = Camera(make_K(), M_s, 100, 100)
        uv, _ = warp_point(np.array([50.0, 50.0]), 2.0, cam_t, cam_s)
        np.testing.assert_allclose(uv, [50.0, 50.0], atol=1e-10)

    def test_matches_matrix_chain_oracle(self):
        # independent evaluation of the homogeneous 4x4 chain
        rng = np.random.default_rng(42)
        K = make_K()
        for _ in range(10):
            R_t = rotation_about(rng.standard_normal(3), rng.uniform(-0.5, 0.5))
            R_s = rotation_about(rng.standard_normal(3), rng.uniform(-0.5, 0.5))
            t_t, t_s = rng.normal(0, 0.2, 3), rng.normal(0, 0.2, 3)
            cam_t = make_camera(R=R_t, t=t_t)
            cam_s = make_camera(R=R_s, t=t_s)
            depth = 5.0
            p = np.array([60.0, 40.0])

            Kinv = np.linalg.inv(K)
            hom = depth * (Kinv @ np.array([p[0], p[1], 1.0]))
            world = np.linalg.inv(cam_t.M) @ np.array([*hom, 1.0])
            src = cam_s.M @ world
            expect = (K @ src[:3]) / src[2]

            uv, _ = warp_point(p, depth, cam_t, cam_s)
            np.testing.assert_allclose(uv, expect[:2], atol=1e-9)

    def test_behind_camera_raises(self):
        cam_t = make_camera()
        # source camera rotated half a turn: everything in front of the
        # target is behind the source
        cam_s = make_camera(R=rotation_about([0, 1, 0], np.pi))
        with pytest.raises(PointBehindCamera):
            warp_point(np.array([50.0, 50.0]), 2.0, cam_t, cam_s)

    def test_out_of_bounds_flag(self):
        cam_t = make_camera()
        # 0.6 rad about y shifts the principal ray by fx*tan(0.6) ~ 68 px
        cam_s = make_camera(R=rotation_about([0, 1, 0], 0.6))
        uv, ok = warp_point(np.array([50.0, 50.0]), 2.0, cam_t, cam_s)
        assert not ok
        assert not cam_s.contains(uv)


class TestSupportDomain:
    def test_paper_spacing(self):
        coords = support_domain((10, 10), 2)
        assert coords.shape == (9, 2)
        expect = {(u, v) for u in (8, 10, 12) for v in (8, 10, 12)}
        assert {tuple(c) for c in coords} == expect

    def test_zero_spacing_degenerates(self):
        coords = support_domain((4, 7), 0)
        assert np.all(coords == [4, 7])

    def test_boundary_can_go_negative(self):
        coords = support_domain((0, 0), 2)
        assert (-2, -2) in {tuple(c) for c in coords}

    def test_center_and_symmetry(self):
        coords = support_domain((5, 9), 3)
        np.testing.assert_array_equal(coords[4], [5, 9])
        flipped = {(2 * 5 - u, 2 * 9 - v) for u, v in map(tuple, coords)}
        assert flipped == {tuple(c) for c in coords}


class TestWarpPatch:
    def test_identity(self):
        cam = make_camera()
        patch = SupportPatch(np.array([30.0, 40.0]), support_domain((30, 40), 2), 2, depth=3.0)
        coords, valid = warp_patch(patch, cam, cam)
        assert valid
        np.testing.assert_allclose(coords, patch.coords, atol=1e-10)

    def test_equals_elementwise_warp_point(self):
        cam_t = make_camera()
        cam_s = make_camera(R=rotation_about([0, 1, 0], 0.1), t=np.array([0.2, 0.0, 0.1]))
        patch = SupportPatch(np.array([50.0, 50.0]), support_domain((50, 50), 2), 2, depth=4.0)
        coords, valid = warp_patch(patch, cam_t, cam_s)
        assert valid
        for i, c in enumerate(patch.coords):
            uv, _ = warp_point(c, 4.0, cam_t, cam_s)
            np.testing.assert_allclose(coords[i], uv, atol=1e-12)

    def test_behind_camera_invalidates_whole_patch(self):
        cam_t = make_camera()
        cam_s = make_camera(R=rotation_about([0, 1, 0], np.pi))
        patch = SupportPatch(np.array([50.0, 50.0]), support_domain((50, 50), 2), 2, depth=2.0)
        _, valid = warp_patch(patch, cam_t, cam_s)
        assert not valid


class TestBilinearSample:
    def test_integer_coords_exact(self):
        rng = np.random.default_rng(0)
        img = rng.random((6, 7, 3))
        vals, valid = bilinear_sample(img, np.array([[3.0, 2.0], [6.0, 5.0], [0.0, 0.0]]))
        assert valid.all()
        np.testing.assert_allclose(vals, [img[2, 3], img[5, 6], img[0, 0]])

    def test_midpoint(self):
        img = np.array([[0.0, 1.0]])
        vals, valid = bilinear_sample(img, np.array([[0.5, 0.0]]))
        assert valid.all()
        assert vals[0] == pytest.approx(0.5)

    def test_constant_image(self):
        img = np.full((5, 5), 0.7)
        coords = np.array([[1.3, 2.7], [0.01, 3.99], [4.0, 4.0]])
        vals, valid = bilinear_sample(img, coords)
        assert valid.all()
        np.testing.assert_allclose(vals, 0.7)

    def test_out_of_bounds_masked(self):
        img = np.ones((4, 4))
        vals, valid = bilinear_sample(img, np.array([[-0.1, 1.0], [2.5, 1.0], [2.0, 3.2]]))
        np.testing.assert_array_equal(valid, [False, True, False])
        np.testing.assert_array_equal(vals[~valid], 0.0)


class TestCameraRays:
    def test_unit_directions_and_zscale(self):
        cam = make_camera(R=rotation_about([0, 0, 1], 0.7), t=np.array([0.1, 0.2, 0.3]))
        pixels = np.array([[50.0, 50.0], [10.0, 90.0]])
        origins, dirs, zscale = camera_rays(cam, pixels)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(origins[0], cam.center())
        # a point at distance t along the ray has camera z equal to t*zscale
        t = 2.37
        pts = origins + t * dirs
        cam_pts = (cam.M[:3, :3] @ pts.T).T + cam.t
        np.testing.assert_allclose(cam_pts[:, 2], t * zscale, atol=1e-12)

    def test_principal_ray_along_axis(self):
        cam = make_camera()
        _, dirs, zscale = camera_rays(cam, np.array([[50.0, 50.0]]))
        np.testing.assert_allclose(dirs[0], [0, 0, 1.0], atol=1e-12)
        assert zscale[0] == pytest.approx(1.0)
