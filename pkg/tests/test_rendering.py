import math

import numpy as np
import pytest

from fieldfuse.encoding import FrequencyWeights
from fieldfuse.errors import DimensionMismatch, PixelOutOfBounds
from fieldfuse.field import (
    AnalyticField,
    AnalyticFieldModel,
    Blob,
    FieldConfig,
    MlpField,
    init_field_params,
)
from fieldfuse.geometry import Pose, Twist, exp_map, random_twist
from fieldfuse.rendering import (
    Camera,
    RenderConfig,
    camera_ray_batch,
    composite,
    composite_backward,
    distortion_loss,
    generate_ray,
    generate_rays,
    photometric_loss,
    ray_loss,
    render_image,
    render_rays,
    sample_ray,
    sample_rays,
    twist_gradient,
)
from helpers import assert_close, central_difference


def make_camera(pose=None, size=16):
    return Camera(
        fx=size * 0.8,
        fy=size * 0.8,
        cx=size / 2,
        cy=size / 2,
        width=size,
        height=size,
        pose=pose or Pose.identity(),
    )


def two_blob_field():
    return AnalyticField(
        blobs=(
            Blob([0.0, 0.0, 4.0], 0.7, 3.0, [0.9, 0.2, 0.1]),
            Blob([0.8, -0.5, 5.0], 0.5, 2.0, [0.1, 0.7, 0.8]),
        )
    )


def test_generate_ray_principal_point_is_optical_axis():
    cam = make_camera()
    origin, direction, footprint = generate_ray(cam, (cam.cx, cam.cy))
    assert np.allclose(origin, 0.0)
    assert np.allclose(direction, [0.0, 0.0, 1.0], atol=1e-15)
    assert footprint == pytest.approx(1.0 / (cam.fx * math.sqrt(12.0)))


def test_generate_ray_translation_moves_origin_only():
    cam = make_camera()
    moved = make_camera(pose=Pose(np.eye(3), [3.0, -1.0, 2.0]))
    o0, d0, _ = generate_ray(cam, (4.0, 9.0))
    o1, d1, _ = generate_ray(moved, (4.0, 9.0))
    assert np.allclose(o1, [3.0, -1.0, 2.0])
    assert np.allclose(d0, d1, atol=1e-15)


def test_generate_ray_focal_off_axis_45_degrees():
    cam = Camera(fx=4.0, fy=4.0, cx=8.0, cy=8.0, width=16, height=16)
    origin, direction, _ = generate_ray(cam, (cam.cx + cam.fx, cam.cy))
    angle = math.degrees(math.acos(direction @ np.array([0.0, 0.0, 1.0])))
    assert angle == pytest.approx(45.0, abs=1e-9)


def test_generate_ray_out_of_bounds():
    cam = make_camera()
    with pytest.raises(PixelOutOfBounds):
        generate_ray(cam, (-1.0, 3.0))
    with pytest.raises(PixelOutOfBounds):
        generate_ray(cam, (3.0, cam.height + 0.5))


def test_sample_rays_partition_and_midpoints():
    origins = np.zeros((3, 3))
    dirs = np.tile(np.array([0.0, 0.0, 1.0]), (3, 1))
    s = sample_rays(origins, dirs, 1.0, 5.0, 8, np.zeros(3))
    assert np.allclose(s.t_edges[:, 0], 1.0)
    assert np.allclose(s.t_edges[:, -1], 5.0)
    assert np.allclose(s.widths.sum(axis=-1), 4.0, atol=1e-15)
    expected_mids = 1.0 + 0.5 * 0.5 + 0.5 * np.arange(8)
    assert np.allclose(s.midpoints, expected_mids)


def test_sample_rays_stratified_keeps_partition():
    rng = np.random.default_rng(4)
    origins = np.zeros((64, 3))
    dirs = np.tile(np.array([0.0, 0.0, 1.0]), (64, 1))
    s = sample_rays(origins, dirs, 0.5, 9.5, 16, np.zeros(64), stratified=True, rng=rng)
    assert np.all(s.widths > 0.0)
    assert np.allclose(s.t_edges[:, 0], 0.5)
    assert np.allclose(s.t_edges[:, -1], 9.5)
    assert np.allclose(s.widths.sum(axis=-1), 9.0, atol=1e-12)


def test_sample_ray_variance_conventions():
    # zero footprint: radial variance 0, along-ray variance delta^2/12
    s = sample_ray([0, 0, 0], [0, 0, 1.0], 1.0, 3.0, 4, footprint=0.0)
    delta = s.widths[0]
    assert np.allclose(s.region.variance[:, 2], delta**2 / 12.0)
    assert np.allclose(s.region.variance[:, 0], 0.0)
    assert np.allclose(s.region.variance[:, 1], 0.0)

    # with a footprint the radial variance is (footprint * t_mid)^2
    fp = 0.01
    s = sample_ray([0, 0, 0], [0, 0, 1.0], 1.0, 3.0, 4, footprint=fp)
    assert np.allclose(s.region.variance[:, 0], (fp * s.midpoints) ** 2)


def test_composite_empty_space_returns_background():
    t_edges = np.linspace(1.0, 2.0, 9)[None, :]
    sigma = np.zeros((1, 8))
    color = np.ones((1, 8, 3))
    pixel, weights, tail = composite(sigma, color, t_edges, (0.2, 0.5, 0.7))
    assert np.allclose(pixel, [0.2, 0.5, 0.7])
    assert np.allclose(weights, 0.0)
    assert tail[0] == 1.0


def test_composite_opaque_front_surface():
    t_edges = np.linspace(1.0, 2.0, 5)[None, :]
    sigma = np.array([[1e9, 0.0, 0.0, 0.0]])
    color = np.zeros((1, 4, 3))
    color[0, 0] = [0.9, 0.1, 0.3]
    pixel, weights, _ = composite(sigma, color, t_edges, (0.0, 0.0, 0.0))
    assert np.allclose(pixel, [0.9, 0.1, 0.3], atol=1e-12)
    assert weights[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_composite_constant_density_matches_transmittance_integral():
    sigma_val = 1.7
    t_edges = np.linspace(0.5, 1.5, 1001)[None, :]
    sigma = np.full((1, 1000), sigma_val)
    color = np.ones((1, 1000, 3))
    _, weights, tail = composite(sigma, color, t_edges, (0.0, 0.0, 0.0))
    assert weights.sum() == pytest.approx(1.0 - math.exp(-sigma_val), abs=1e-3)
    assert weights.sum() == pytest.approx(1.0 - tail[0], abs=1e-12)


def test_composite_weight_sum_bounded():
    rng = np.random.default_rng(9)
    t_edges = np.sort(rng.uniform(1.0, 9.0, size=(32, 17)), axis=-1)
    t_edges += np.arange(17) * 1e-6  # guard against duplicate edges
    sigma = rng.uniform(0.0, 5.0, size=(32, 16))
    color = rng.uniform(0.0, 1.0, size=(32, 16, 3))
    _, weights, tail = composite(sigma, color, t_edges, (0.5, 0.5, 0.5))
    sums = weights.sum(axis=-1)
    assert np.all(sums <= 1.0 + 1e-12)
    assert np.allclose(sums, 1.0 - tail, atol=1e-12)


def test_photometric_loss_examples():
    a = np.zeros((4, 4, 3))
    assert photometric_loss(a, a) == 0.0
    assert photometric_loss(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 1.0
    b = np.zeros((2, 2, 3))
    c = b.copy()
    c[0, 1, 2] = 0.5
    assert photometric_loss(b, c) == pytest.approx(0.25 / 12.0)
    with pytest.raises(DimensionMismatch):
        photometric_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def distortion_oracle(weights, t_edges):
    # direct double-sum evaluation
    mids = 0.5 * (t_edges[1:] + t_edges[:-1])
    delta = t_edges[1:] - t_edges[:-1]
    pair = sum(
        weights[j] * weights[k] * abs(mids[j] - mids[k])
        for j in range(len(weights))
        for k in range(len(weights))
    )
    return pair + np.sum(weights**2 * delta) / 3.0


def test_distortion_loss_examples():
    edges = np.linspace(0.0, 1.0, 9)
    assert distortion_loss(np.zeros(8), edges) == 0.0

    w = np.zeros(8)
    w[3] = 0.7
    delta = edges[4] - edges[3]
    assert distortion_loss(w, edges) == pytest.approx(0.7**2 * delta / 3.0, abs=1e-15)

    # two near-point masses at 0.2 and 0.8 (zero-width supports, empty
    # middle interval): pairwise term 2 * (1 * 1 * 0.6) = 1.2, self terms -> 0
    eps = 1e-7
    edges2 = np.array([0.2 - eps, 0.2 + eps, 0.8 - eps, 0.8 + eps])
    w2 = np.array([1.0, 0.0, 1.0])
    expected = distortion_oracle(w2, edges2)
    got = distortion_loss(w2, edges2)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(1.2, abs=1e-6)


def test_distortion_loss_matches_double_sum_oracle():
    rng = np.random.default_rng(14)
    for _ in range(30):
        n = rng.integers(2, 20)
        edges = np.sort(rng.uniform(0.0, 1.0, n + 1))
        edges += np.arange(n + 1) * 1e-9
        w = rng.uniform(0.0, 0.3, n)
        assert distortion_loss(w, edges) == pytest.approx(
            distortion_oracle(w, edges), abs=1e-12
        )


def test_distortion_gradient_matches_finite_differences():
    rng = np.random.default_rng(15)
    edges = np.sort(rng.uniform(0.0, 1.0, 11))
    w = rng.uniform(0.0, 0.3, 10)
    from fieldfuse.rendering import _distortion_with_grad

    _, d_w = _distortion_with_grad(w[None, :], edges[None, :])
    fd = central_difference(lambda ww: distortion_oracle(ww, edges), w, h=1e-7)
    assert_close(d_w[0], fd, rel=1e-6, abs_floor=1e-9)


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(16)
    n = 12
    t_edges = np.sort(rng.uniform(1.0, 4.0, (2, n + 1)), axis=-1)
    sigma = rng.uniform(0.0, 2.0, (2, n))
    color = rng.uniform(0.0, 1.0, (2, n, 3))
    bg = np.array([0.5, 0.5, 0.5])
    d_pixel = rng.normal(size=(2, 3))
    d_w_extra = rng.normal(size=(2, n)) * 0.1

    _, weights, _ = composite(sigma, color, t_edges, bg)
    d_sigma, d_color = composite_backward(d_pixel, d_w_extra, sigma, color, t_edges, bg, weights)

    def scalar(sig):
        pixel, w, _ = composite(sig, color, t_edges, bg)
        return float(np.sum(pixel * d_pixel) + np.sum(w * d_w_extra))

    fd = central_difference(scalar, sigma, h=1e-6)
    assert_close(d_sigma, fd, rel=1e-5, abs_floor=1e-9)

    def scalar_c(col):
        pixel, w, _ = composite(sigma, col, t_edges, bg)
        return float(np.sum(pixel * d_pixel) + np.sum(w * d_w_extra))

    fd_c = central_difference(scalar_c, color, h=1e-6)
    assert_close(d_color, fd_c, rel=1e-5, abs_floor=1e-9)


def test_render_refinement_stability():
    fld = AnalyticFieldModel(two_blob_field())
    cam = make_camera(size=8)
    lo = render_image(fld, cam, RenderConfig(near=1.0, far=9.0, n_samples=128))
    hi = render_image(fld, cam, RenderConfig(near=1.0, far=9.0, n_samples=256))
    assert np.abs(lo - hi).max() < 1e-3


def _twist_fd_check(model, pose, seed, rel, floor):
    rng = np.random.default_rng(seed)
    cam = make_camera(pose=pose, size=12)
    cfg = RenderConfig(near=1.0, far=9.0, n_samples=24)
    pixels = np.stack(
        [rng.uniform(1, cam.width - 1, 20), rng.uniform(1, cam.height - 1, 20)], axis=-1
    )
    target = rng.uniform(0.0, 1.0, (20, 3))
    footprints = np.full(20, cam.footprint)

    def loss_at(xi_vec):
        p = exp_map(Twist(xi_vec[:3], xi_vec[3:])).compose(pose)
        origins, dirs = generate_rays(cam.with_pose(p), pixels)
        return ray_loss(model, origins, dirs, footprints, target, cfg).total

    origins, dirs = generate_rays(cam, pixels)
    res = ray_loss(model, origins, dirs, footprints, target, cfg, need_ray_grads=True)
    analytic = twist_gradient(origins, res.d_origins, dirs, res.d_dirs)
    fd = central_difference(loss_at, np.zeros(6), h=1e-5)
    assert_close(analytic, fd, rel=rel, abs_floor=floor)


def test_twist_gradient_through_render_analytic_field():
    pose = exp_map(Twist([0.03, -0.05, 0.1], [0.3, -0.2, -0.5]))
    _twist_fd_check(AnalyticFieldModel(two_blob_field()), pose, seed=19, rel=1e-3, floor=1e-9)


def test_twist_gradient_through_render_mlp_field():
    cfg = FieldConfig(
        pos_frequencies=4, dir_frequencies=2, hidden_width=16, hidden_depth=2,
        feature_dim=8, color_width=8, position_scale=2.0,
    )
    model = MlpField(init_field_params(cfg, seed=3))
    pose = exp_map(Twist([0.02, 0.04, -0.03], [0.1, 0.3, -0.2]))
    _twist_fd_check(model, pose, seed=20, rel=1e-3, floor=1e-9)


def test_twist_gradient_with_distortion_term():
    cfgf = FieldConfig(
        pos_frequencies=3, dir_frequencies=1, hidden_width=8, hidden_depth=1,
        feature_dim=4, color_width=4, position_scale=2.0,
    )
    model = MlpField(init_field_params(cfgf, seed=8))
    pose = Pose.identity()
    rng = np.random.default_rng(21)
    cam = make_camera(size=10)
    cfg = RenderConfig(near=1.0, far=7.0, n_samples=16)
    pixels = np.stack([rng.uniform(1, 9, 8), rng.uniform(1, 9, 8)], axis=-1)
    target = rng.uniform(0.0, 1.0, (8, 3))
    fp = np.full(8, cam.footprint)

    def loss_at(xi_vec):
        p = exp_map(Twist(xi_vec[:3], xi_vec[3:])).compose(pose)
        o, d = generate_rays(cam.with_pose(p), pixels)
        return ray_loss(model, o, d, fp, target, cfg, lambda_dist=0.05).total

    o, d = generate_rays(cam, pixels)
    res = ray_loss(model, o, d, fp, target, cfg, lambda_dist=0.05, need_ray_grads=True)
    analytic = twist_gradient(o, res.d_origins, d, res.d_dirs)
    fd = central_difference(loss_at, np.zeros(6), h=1e-5)
    assert_close(analytic, fd, rel=1e-3, abs_floor=1e-9)


def test_param_gradients_through_render_match_fd():
    cfgf = FieldConfig(
        pos_frequencies=2, dir_frequencies=1, hidden_width=4, hidden_depth=1,
        feature_dim=2, color_width=4, position_scale=2.0,
    )
    params = init_field_params(cfgf, seed=12)
    model = MlpField(params)
    rng = np.random.default_rng(23)
    cam = make_camera(size=10)
    cfg = RenderConfig(near=1.0, far=7.0, n_samples=12)
    pixels = np.stack([rng.uniform(1, 9, 6), rng.uniform(1, 9, 6)], axis=-1)
    target = rng.uniform(0.0, 1.0, (6, 3))
    fp = np.full(6, cam.footprint)
    origins, dirs = generate_rays(cam, pixels)

    res = ray_loss(model, origins, dirs, fp, target, cfg,
                   lambda_dist=0.02, need_param_grads=True)

    from fieldfuse.field import FieldParams

    for name in ("trunk.0.w", "sigma.b", "rgb.w", "color.0.b"):
        def f(values, name=name):
            trial = FieldParams(params.config, dict(params.weights))
            trial.weights[name] = values
            return ray_loss(MlpField(trial), origins, dirs, fp, target, cfg,
                            lambda_dist=0.02).total

        fd = central_difference(f, params.weights[name], h=1e-5)
        assert_close(res.param_grads[name], fd, rel=1e-4, abs_floor=1e-8)


def test_render_rays_and_image_agree():
    fld = AnalyticFieldModel(two_blob_field())
    cam = make_camera(size=6)
    cfg = RenderConfig(near=1.0, far=9.0, n_samples=32)
    img = render_image(fld, cam, cfg)
    ii, jj = np.meshgrid(np.arange(6), np.arange(6))
    pixels = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
    origins, dirs = generate_rays(cam, pixels)
    colors, _ = render_rays(fld, origins, dirs, np.full(36, cam.footprint), cfg)
    assert np.array_equal(img.reshape(-1, 3), colors)


def test_camera_ray_batch_targets():
    rng = np.random.default_rng(2)
    cam = make_camera(size=8)
    image = rng.uniform(0.0, 1.0, (8, 8, 3))
    origins, dirs, fps, targets = camera_ray_batch(cam, image, 16, rng)
    assert origins.shape == (16, 3) and dirs.shape == (16, 3)
    assert np.all((targets >= 0.0) & (targets <= 1.0))
