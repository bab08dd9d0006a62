import numpy as np
import pytest

from nerfkit import autodiff as ad
from nerfkit.autodiff import ParamStore, backward, check_gradients, forward_eval
from nerfkit.cameras import Camera
from nerfkit.field import (
    FieldConfig,
    Ray,
    composite,
    field_eval,
    field_forward,
    init_params,
    positional_encoding,
    render_image,
    render_ray,
    render_rays,
    sample_ts,
)

TINY = FieldConfig(pos_freqs=2, dir_freqs=1, hidden_layers=2, hidden_width=8, skip_layer=1)


def riemann_oracle(sigma_fn, color_fn, t_near, t_far, n=100_000):
    """Dense Riemann quadrature of the emission-absorption integrals."""
    ts = np.linspace(t_near, t_far, n)
    dt = ts[1] - ts[0]
    sig = sigma_fn(ts)
    trans = np.exp(-np.cumsum(sig) * dt)
    color = np.sum(trans * sig * color_fn(ts)[..., 0] * dt)
    depth = np.sum(trans * sig * ts * dt)
    return color, depth


class TestPositionalEncoding:
    def test_zero_input(self):
        out = positional_encoding(np.zeros(3), 4)
        assert out.shape == (27,)
        for j in range(4):
            np.testing.assert_array_equal(out[3 + 6 * j : 6 + 6 * j], 0.0)  # sin block
            np.testing.assert_array_equal(out[6 + 6 * j : 9 + 6 * j], 1.0)  # cos block

    def test_zero_freqs_identity(self):
        v = np.array([0.3, -0.2, 0.9])
        assert positional_encoding(v, 0) is v

    def test_half_direct_evaluation(self):
        out = positional_encoding(np.array([0.5]), 2)
        np.testing.assert_allclose(out, [0.5, 1.0, 0.0, 0.0, -1.0], atol=1e-15)

    def test_output_length(self):
        assert positional_encoding(np.zeros((7, 3)), 6).shape == (7, 3 * 13)


class TestFieldEval:
    def test_zero_final_layers(self):
        params = init_params(TINY, np.random.default_rng(0))
        for name in ("sigma.weight", "sigma.bias", "rgb.weight", "rgb.bias"):
            params.set(name, np.zeros(params.shape_of(name)))
        rgb, sigma = field_eval(np.array([0.1, 0.2, 0.3]), np.array([0.0, 0.0, 1.0]), params, TINY)
        assert sigma == pytest.approx(np.log(2.0))
        np.testing.assert_allclose(rgb, 0.5)

    def test_sigma_independent_of_direction(self):
        params = init_params(TINY, np.random.default_rng(1))
        x = np.array([0.5, -0.2, 0.1])
        dirs = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
        sigmas = [field_eval(x, d, params, TINY)[1] for d in dirs]
        assert sigmas[0] == sigmas[1] == sigmas[2]

    def test_deterministic(self):
        params = init_params(TINY, np.random.default_rng(2))
        x, d = np.array([0.1, 0.9, -0.4]), np.array([0.0, 1.0, 0.0])
        a = field_eval(x, d, params, TINY)
        b = field_eval(x, d, params, TINY)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_rejects_non_unit_direction(self):
        params = init_params(TINY, np.random.default_rng(0))
        with pytest.raises(ValueError):
            field_eval(np.zeros(3), np.array([1.0, 1.0, 0.0]), params, TINY)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FieldConfig(hidden_layers=0)
        with pytest.raises(ValueError):
            FieldConfig(skip_layer=9)
        with pytest.raises(ValueError):
            FieldConfig(pos_freqs=-1)


class TestComposite:
    def test_empty_space(self):
        ts = np.linspace(0.1, 4.0, 16)[None]
        sig = np.zeros((1, 16))
        col = np.full((1, 16, 3), 0.8)
        color, depth, weights = composite(ts, 4.0, sig, col)
        np.testing.assert_array_equal(color, 0.0)
        np.testing.assert_array_equal(depth, 0.0)
        np.testing.assert_array_equal(weights, 0.0)

    def test_opaque_sample_is_delta_surface(self):
        ts = np.array([[1.0, 2.0, 3.0]])
        sig = np.array([[0.0, 1e9, 0.0]])
        col = np.zeros((1, 3, 3))
        col[0, 1] = [0.2, 0.4, 0.6]
        color, depth, _ = composite(ts, 4.0, sig, col)
        np.testing.assert_allclose(color[0], [0.2, 0.4, 0.6], atol=1e-12)
        assert depth[0] == pytest.approx(2.0, abs=1e-12)

    def test_constant_density_matches_riemann_oracle(self):
        oracle_c, oracle_d = riemann_oracle(
            lambda t: np.ones_like(t), lambda t: np.full(t.shape + (3,), 0.7), 0.0, 4.0
        )
        ts = sample_ts(0.0, 4.0, 256, stratified=False)
        color, depth, _ = composite(ts, 4.0, np.ones((1, 256)), np.full((1, 256, 3), 0.7))
        assert color[0, 0] == pytest.approx(oracle_c, abs=1e-3)
        assert depth[0] == pytest.approx(oracle_d, abs=1e-3)

    def test_error_halves_as_samples_double(self):
        oracle_c, oracle_d = riemann_oracle(
            lambda t: np.ones_like(t), lambda t: np.full(t.shape + (3,), 0.7), 0.0, 4.0
        )
        errs = []
        for n in (64, 128, 256):
            ts = sample_ts(0.0, 4.0, n, stratified=False)
            color, depth, _ = composite(ts, 4.0, np.ones((1, n)), np.full((1, n, 3), 0.7))
            errs.append(abs(depth[0] - oracle_d))
        for coarse, fine in zip(errs, errs[1:]):
            ratio = coarse / fine
            assert 2.0 * 0.7 <= ratio <= 2.0 * 1.3

    def test_weights_bounded(self):
        rng = np.random.default_rng(3)
        ts = sample_ts(0.5, 3.5, 32, stratified=True, rng=rng, n_rays=5)
        sig = np.abs(rng.standard_normal((5, 32))) * 3
        col = rng.random((5, 32, 3))
        _, depth, weights = composite(ts, 3.5, sig, col)
        assert np.all(weights >= 0) and np.all(weights <= 1)
        assert np.all(weights.sum(axis=1) <= 1 + 1e-12)
        acc = weights.sum(axis=1)
        assert np.all((depth >= 0.5 * acc) & (depth <= 3.5 * acc))


class TestSampleTs:
    def test_strictly_increasing(self):
        rng = np.random.default_rng(0)
        ts = sample_ts(0.2, 5.0, 64, stratified=True, rng=rng, n_rays=10)
        assert np.all(np.diff(ts, axis=1) > 0)
        assert np.all(ts >= 0.2) and np.all(ts <= 5.0)

    def test_rejects_single_sample(self):
        with pytest.raises(ValueError):
            sample_ts(0.0, 1.0, 1, stratified=False)

    def test_deterministic_midpoints(self):
        ts = sample_ts(0.0, 4.0, 4, stratified=False)
        np.testing.assert_allclose(ts[0], [0.5, 1.5, 2.5, 3.5])


class TestRenderRay:
    def test_trained_shapes_and_record(self):
        params = init_params(TINY, np.random.default_rng(4))
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.1, 3.0)
        rec = render_ray(ray, params, TINY, 32)
        assert rec.ts.shape == (32,) and rec.colors.shape == (32, 3)
        assert np.all(rec.sigmas >= 0) and np.all((rec.colors >= 0) & (rec.colors <= 1))
        assert 0 <= rec.weights.sum() <= 1

    def test_depth_within_bounds_when_visible(self):
        params = init_params(TINY, np.random.default_rng(5))
        params.set("sigma.bias", np.array([3.0]))  # dense fog: rays terminate
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.5, 2.5)
        rec = render_ray(ray, params, TINY, 64)
        assert rec.weights.sum() > 0.5
        assert 0.5 <= rec.depth / rec.weights.sum() <= 2.5

    def test_gradients_of_color_and_depth(self):
        config = TINY
        params = init_params(config, np.random.default_rng(6))
        origins = np.zeros((4, 3))
        dirs = np.tile(np.array([0.0, 0.0, 1.0]), (4, 1))
        ts = sample_ts(0.1, 3.0, 8, stratified=False, n_rays=4)

        def color_closure(p):
            color, _, _ = render_rays(origins, dirs, ts, 3.0, p, config)
            return ad.vsum(color * color)

        def depth_closure(p):
            _, depth, _ = render_rays(origins, dirs, ts, 3.0, p, config)
            return ad.vsum(depth * depth)

        for closure in (color_closure, depth_closure):
            report = check_gradients(closure, params, step=1e-5, tolerance=1e-4, n_coords=60)
            assert report.passed, report


class TestRenderImage:
    def _camera(self, w=4, h=4):
        K = np.array([[3.0, 0, (w - 1) / 2], [0, 3.0, (h - 1) / 2], [0, 0, 1]])
        return Camera(K, np.eye(4), w, h)

    def test_empty_field_black(self):
        params = init_params(TINY, np.random.default_rng(7))
        params.set("sigma.bias", np.array([-40.0]))  # softplus(-40) ~ 0
        rgb, depth, acc = render_image(self._camera(), params, TINY, 8, 0.1, 2.0)
        np.testing.assert_allclose(rgb, 0.0, atol=1e-12)
        np.testing.assert_allclose(depth, 0.0, atol=1e-12)
        np.testing.assert_allclose(acc, 0.0, atol=1e-12)

    def test_matches_per_pixel_rays(self):
        params = init_params(TINY, np.random.default_rng(8))
        cam = self._camera()
        rgb, depth, _ = render_image(cam, params, TINY, 8, 0.1, 2.0, chunk=3, z_depth=False)
        from nerfkit.cameras import camera_rays

        pixels = np.array([[u, v] for v in range(4) for u in range(4)], dtype=float)
        origins, dirs, _ = camera_rays(cam, pixels)
        for i, (o, d) in enumerate(zip(origins, dirs)):
            ray = Ray(o, d, 0.1, 2.0)
            rec = render_ray(ray, params, TINY, 8)
            np.testing.assert_allclose(rgb[i // 4, i % 4], rec.color, atol=1e-12)
            np.testing.assert_allclose(depth[i // 4, i % 4], rec.depth, atol=1e-12)
