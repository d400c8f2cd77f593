import numpy as np
import pytest

from fieldfuse.encoding import FrequencyWeights, GaussianRegion
from fieldfuse.field import (
    AnalyticField,
    AnalyticFieldModel,
    Blob,
    FieldConfig,
    FieldParams,
    analytic_backward,
    analytic_query,
    analytic_query_with_cache,
    field_backward,
    field_query,
    field_query_with_cache,
    init_field_params,
    load_field,
    quantize_params,
    save_field,
    zero_like_params,
)
from helpers import assert_close, central_difference

TINY = FieldConfig(
    pos_frequencies=2,
    dir_frequencies=1,
    hidden_width=2,
    hidden_depth=1,
    feature_dim=2,
    color_width=2,
)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_zero_params_fixed_point():
    params = init_field_params(TINY, seed=0)
    params.weights = zero_like_params(params)
    region = GaussianRegion.point(np.array([0.4, -1.0, 2.0]))
    sigma, rgb = field_query(params, region, _unit([0.0, 0.0, 1.0]))
    assert sigma == pytest.approx(np.log(2.0), abs=1e-12)  # softplus(0)
    assert np.allclose(rgb, 0.5, atol=1e-12)


def test_forward_deterministic():
    params = init_field_params(TINY, seed=3)
    region = GaussianRegion(np.array([0.1, 0.2, 0.3]), np.array([0.01, 0.02, 0.0]))
    d = _unit([1.0, 2.0, -1.0])
    s1, c1 = field_query(params, region, d)
    s2, c2 = field_query(params, region, d)
    assert np.array_equal(s1, s2)
    assert np.array_equal(c1, c2)


def test_forward_locally_lipschitz():
    rng = np.random.default_rng(5)
    params = init_field_params(TINY, seed=5)
    x = rng.normal(size=3)
    region = GaussianRegion.point(x)
    d = _unit(rng.normal(size=3))
    s0, c0 = field_query(params, region, d)
    eps = 1e-7
    bumped = GaussianRegion.point(x + eps)
    s1, c1 = field_query(params, bumped, d)
    # crude Lipschitz bound from products of weight-matrix norms and the
    # encoding frequency growth
    w = params.weights
    gain = 2.0 ** TINY.pos_frequencies * np.sqrt(TINY.pos_frequencies * 6 + 3)
    for name in ("trunk.0", "sigma"):
        gain *= np.linalg.norm(w[f"{name}.w"], 2)
    assert abs(s1 - s0) <= gain * eps * 3.1


def test_density_and_color_ranges():
    rng = np.random.default_rng(11)
    params = init_field_params(FieldConfig(), seed=9)
    means = rng.normal(scale=3.0, size=(10_000, 3))
    variances = rng.uniform(0.0, 1.0, size=(10_000, 3))
    dirs = rng.normal(size=(10_000, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    sigma, rgb = field_query(params, GaussianRegion(means, variances), dirs)
    assert np.all(sigma >= 0.0)
    assert np.all((rgb >= 0.0) & (rgb <= 1.0))


def test_zero_upstream_gives_zero_gradients():
    params = init_field_params(TINY, seed=1)
    region = GaussianRegion.point(np.array([0.3, 0.1, -0.2]))
    w = FrequencyWeights.ones(TINY.pos_frequencies)
    _, _, cache = field_query_with_cache(params, region, _unit([0, 0, 1.0]), w)
    grads, d_mean, d_var, d_dir = field_backward(
        params, cache, np.zeros(()), np.zeros(3)
    )
    assert all(np.all(g == 0.0) for g in grads.values())
    assert np.all(d_mean == 0.0) and np.all(d_var == 0.0) and np.all(d_dir == 0.0)


def test_param_gradients_match_finite_differences():
    # finite-difference oracle, h=1e-4, on a 2-hidden-unit network
    rng = np.random.default_rng(21)
    params = init_field_params(TINY, seed=21)
    region = GaussianRegion(rng.normal(size=(4, 3)), rng.uniform(0.01, 0.2, (4, 3)))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    w = FrequencyWeights([1.0, 0.6])
    u_sigma = rng.normal(size=4)
    u_rgb = rng.normal(size=(4, 3))

    _, _, cache = field_query_with_cache(params, region, dirs, w)
    grads, _, _, _ = field_backward(params, cache, u_sigma, u_rgb)

    def scalar_for(name):
        def f(values):
            trial = FieldParams(params.config, dict(params.weights))
            trial.weights[name] = values
            s, c, _ = field_query_with_cache(trial, region, dirs, w)
            return float(np.sum(s * u_sigma) + np.sum(c * u_rgb))

        return f

    for name, value in params.weights.items():
        fd = central_difference(scalar_for(name), value, h=1e-4)
        assert_close(grads[name], fd, rel=1e-4, abs_floor=1e-7)


def test_input_gradients_match_finite_differences():
    rng = np.random.default_rng(22)
    params = init_field_params(TINY, seed=22)
    mean = rng.normal(size=3)
    var = rng.uniform(0.01, 0.2, size=3)
    direction = _unit(rng.normal(size=3))
    w = FrequencyWeights([1.0, 0.8])
    u_sigma = rng.normal()
    u_rgb = rng.normal(size=3)

    _, _, cache = field_query_with_cache(params, GaussianRegion(mean, var), direction, w)
    _, d_mean, d_var, _ = field_backward(params, cache, np.array(u_sigma), u_rgb)

    def f_mean(m):
        s, c, _ = field_query_with_cache(params, GaussianRegion(m, var), direction, w)
        return float(s * u_sigma + c @ u_rgb)

    def f_var(v):
        s, c, _ = field_query_with_cache(params, GaussianRegion(mean, v), direction, w)
        return float(s * u_sigma + c @ u_rgb)

    assert_close(d_mean, central_difference(f_mean, mean, h=1e-4), rel=1e-4, abs_floor=1e-7)
    assert_close(d_var, central_difference(f_var, var, h=1e-4), rel=1e-4, abs_floor=1e-7)


def test_param_gradient_probe_sweep():
    # 100 random probes through random tiny networks
    rng = np.random.default_rng(33)
    failures = 0
    for probe in range(100):
        params = init_field_params(TINY, seed=100 + probe)
        mean = rng.normal(size=3)
        var = rng.uniform(0.0, 0.1, size=3)
        direction = _unit(rng.normal(size=3))
        w = FrequencyWeights.ones(2)
        u_sigma, u_rgb = rng.normal(), rng.normal(size=3)
        _, _, cache = field_query_with_cache(params, GaussianRegion(mean, var), direction, w)
        grads, _, _, _ = field_backward(params, cache, np.array(u_sigma), u_rgb)
        name = "trunk.0.w"

        def f(values, name=name, params=params, mean=mean, var=var,
              direction=direction, w=w, u_sigma=u_sigma, u_rgb=u_rgb):
            trial = FieldParams(params.config, dict(params.weights))
            trial.weights[name] = values
            s, c, _ = field_query_with_cache(trial, GaussianRegion(mean, var), direction, w)
            return float(s * u_sigma + c @ u_rgb)

        fd = central_difference(f, params.weights[name], h=1e-4)
        err = np.abs(grads[name] - fd)
        if np.any(err > 1e-4 * np.abs(fd) + 1e-7):
            failures += 1
    assert failures == 0


def test_analytic_field_examples():
    blob_a = Blob(center=[0, 0, 0], radius=1.0, peak=2.0, color=[1.0, 0.0, 0.0])
    blob_b = Blob(center=[4, 0, 0], radius=1.0, peak=2.0, color=[0.0, 1.0, 0.0])
    fld = AnalyticField(blobs=(blob_a, blob_b))

    d, c = analytic_query(fld, np.zeros(3))
    assert d == pytest.approx(2.0 + 2.0 * np.exp(-8.0), abs=1e-12)
    assert c[0] > 0.99

    d, _ = analytic_query(fld, np.array([500.0, 0, 0]))
    assert d == pytest.approx(0.0, abs=1e-12)

    _, c = analytic_query(fld, np.array([2.0, 0, 0]))
    assert np.allclose(c, [0.5, 0.5, 0.0], atol=1e-12)


def test_analytic_far_point_uses_background():
    fld = AnalyticField(
        blobs=(Blob([0, 0, 0], 0.5, 1.0, [1, 0, 0]),), background=[0.2, 0.3, 0.4]
    )
    d, c = analytic_query(fld, np.array([100.0, 0, 0]))
    assert d == 0.0
    assert np.allclose(c, [0.2, 0.3, 0.4])


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    fld = AnalyticField(
        blobs=(
            Blob([0.5, -0.2, 0.1], 0.8, 1.5, [0.9, 0.1, 0.2]),
            Blob([-0.4, 0.3, 0.6], 1.2, 0.7, [0.1, 0.8, 0.5]),
        )
    )
    x = rng.normal(size=3)
    u_d, u_c = rng.normal(), rng.normal(size=3)
    _, _, cache = analytic_query_with_cache(fld, x)
    d_x = analytic_backward(cache, np.array(u_d), u_c)

    def f(xv):
        dd, cc = analytic_query(fld, xv)
        return float(dd * u_d + cc @ u_c)

    assert_close(d_x, central_difference(f, x, h=1e-6), rel=1e-5, abs_floor=1e-9)


def test_checkpoint_round_trip(tmp_path):
    params = quantize_params(init_field_params(FieldConfig(hidden_depth=2, hidden_width=8), seed=4))
    path = tmp_path / "net.field"
    save_field(path, params, render={"near": 1.0, "far": 5.0}, metadata={"seed": 4})
    ckpt = load_field(path)
    assert ckpt.render["near"] == 1.0
    assert ckpt.metadata["seed"] == 4
    region = GaussianRegion.point(np.array([[0.2, 0.4, -0.3], [1.0, 0.0, 0.5]]))
    d = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    s0, c0 = field_query(params, region, d)
    s1, c1 = field_query(ckpt.params, region, d)
    assert np.array_equal(s0, s1)
    assert np.array_equal(c0, c1)


def test_checkpoint_stable_after_first_quantization(tmp_path):
    params = init_field_params(FieldConfig(hidden_depth=1, hidden_width=4), seed=6)
    p1 = tmp_path / "a.field"
    p2 = tmp_path / "b.field"
    save_field(p1, params)
    once = load_field(p1).params
    save_field(p2, once)
    twice = load_field(p2).params
    for k in once.weights:
        assert np.array_equal(once.weights[k], twice.weights[k])


def test_analytic_model_adapter_interface():
    fld = AnalyticField(blobs=(Blob([0, 0, 0], 1.0, 2.0, [1, 0, 0]),))
    model = AnalyticFieldModel(fld)
    region = GaussianRegion(np.zeros((2, 5, 3)), np.full((2, 5, 3), 0.1))
    sigma, rgb, cache = model.query(region, np.array([0.0, 0.0, 1.0]))
    assert sigma.shape == (2, 5)
    assert rgb.shape == (2, 5, 3)
    _, d_mean, d_var, d_dir = model.query_backward(cache, np.ones((2, 5)), np.zeros((2, 5, 3)))
    assert d_mean.shape == (2, 5, 3)
    assert np.all(d_var == 0.0) and np.all(d_dir == 0.0)
