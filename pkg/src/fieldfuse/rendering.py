"""Ray generation, frustum sampling, quadrature compositing, and losses.

The camera model is pinhole, OpenCV axes (+x right, +y down, +z forward),
with camera-to-world poses. Each pixel casts a cone; ray intervals carry an
axis-aligned Gaussian approximation of their conical frustum:

- along-ray variance  delta^2 / 12          (uniform over the interval)
- radial variance     (footprint * t_mid)^2 (footprint = pixel width /
                                             (focal * sqrt(12)), i.e. the
                                             std of a uniform pixel at unit
                                             depth)

projected onto world axes as sigma_t^2 d^2 + sigma_r^2 (1 - d^2) per axis.

``ray_loss`` is the single differentiable engine used by training and by
pose optimization: it renders a batch of rays, compares against target
colors (MSE, optionally plus a distortion regularizer) and backpropagates
into field parameters and/or per-ray origin/direction gradients. Origin
and direction gradients contract into a pose-twist gradient with
``twist_gradient`` (left perturbation at the identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import FrequencyWeights, GaussianRegion
from .errors import DimensionMismatch, PixelOutOfBounds
from .geometry import Pose, Twist


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image bounds")

    def with_pose(self, pose: Pose) -> "Camera":
        return replace(self, pose=pose)

    @property
    def footprint(self) -> float:
        """Pixel footprint radius per unit depth: width 1/fx over sqrt(12)."""
        return 1.0 / (self.fx * np.sqrt(12.0))


def generate_ray(camera: Camera, pixel) -> tuple:
    """World-space ray through one pixel: (origin, unit direction, footprint).

    pixel = (u, v) in continuous image coordinates; raises PixelOutOfBounds
    outside [0, width] x [0, height].
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise PixelOutOfBounds(f"pixel ({u}, {v}) outside {camera.width}x{camera.height}")
    origins, dirs = generate_rays(camera, np.array([[u, v]]))
    return origins[0], dirs[0], camera.footprint


def generate_rays(camera: Camera, pixels: np.ndarray) -> tuple:
    """Vectorized ray generation for pixels of shape (R, 2); no bounds check."""
    pixels = np.asarray(pixels, dtype=float)
    d_cam = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            np.ones(pixels.shape[0]),
        ],
        axis=-1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = camera.pose.rotate(d_cam)
    origins = np.broadcast_to(camera.pose.translation, dirs.shape)
    return origins, dirs


@dataclass
class RaySamples:
    """Per-ray quadrature state, filled in as the pipeline advances.

    t_edges (R, N+1) are sorted interval endpoints with strictly positive
    widths; region holds the per-interval Gaussians; density/color/weights
    and per-field origin distances are attached by later stages.
    """

    t_edges: np.ndarray
    region: GaussianRegion
    density: np.ndarray | None = None
    color: np.ndarray | None = None
    weights: np.ndarray | None = None
    origin_distance: np.ndarray | None = None

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.t_edges[..., 1:] + self.t_edges[..., :-1])

    @property
    def widths(self) -> np.ndarray:
        return self.t_edges[..., 1:] - self.t_edges[..., :-1]


def sample_ray(origin, direction, near, far, n, footprint=0.0, stratified=False, rng=None):
    """Frustum samples for a single ray; see sample_rays."""
    origins = np.asarray(origin, dtype=float)[None]
    dirs = np.asarray(direction, dtype=float)[None]
    samples = sample_rays(origins, dirs, near, far, n, np.array([footprint]), stratified, rng)
    return RaySamples(samples.t_edges[0], GaussianRegion(samples.region.mean[0], samples.region.variance[0]))


def sample_rays(origins, dirs, near, far, n, footprints, stratified=False, rng=None) -> RaySamples:
    """Partition [near, far] into n intervals per ray and build frustum Gaussians.

    Stratification jitters the interior interval edges by up to half a cell,
    which keeps the edges sorted and the union exactly [near, far]. Without
    stratification edges are the uniform grid (deterministic midpoints).
    """
    if not 0 < near < far:
        raise ValueError("need 0 < near < far")
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    footprints = np.asarray(footprints, dtype=float)
    r = origins.shape[0]
    h = (far - near) / n
    grid = near + h * np.arange(n + 1)
    t_edges = np.broadcast_to(grid, (r, n + 1)).copy()
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = (rng.random((r, n - 1)) - 0.5) * h
        t_edges[:, 1:-1] += jitter
    mids = 0.5 * (t_edges[:, 1:] + t_edges[:, :-1])
    widths = t_edges[:, 1:] - t_edges[:, :-1]
    mean = origins[:, None, :] + mids[..., None] * dirs[:, None, :]
    var_t = widths**2 / 12.0
    var_r = (footprints[:, None] * mids) ** 2
    d_sq = dirs[:, None, :] ** 2
    variance = var_t[..., None] * d_sq + var_r[..., None] * (1.0 - d_sq)
    return RaySamples(t_edges, GaussianRegion(mean, variance))


def composite(density, color, t_edges, background):
    """Quadrature compositing: returns (pixel colors, weights, tail transmittance).

    alpha_k = 1 - exp(-sigma_k delta_k); w_k = T_k alpha_k with T_k the
    transmittance before sample k; leftover transmittance falls onto the
    background color.
    """
    density = np.asarray(density, dtype=float)
    color = np.asarray(color, dtype=float)
    background = np.asarray(background, dtype=float)
    delta = t_edges[..., 1:] - t_edges[..., :-1]
    beta = density * delta
    trans = np.exp(-beta)
    t_after = np.cumprod(trans, axis=-1)
    t_before = np.concatenate([np.ones_like(t_after[..., :1]), t_after[..., :-1]], axis=-1)
    weights = t_before * (-np.expm1(-beta))
    tail = t_after[..., -1]
    pixel = np.einsum("...k,...kc->...c", weights, color) + tail[..., None] * background
    return pixel, weights, tail


def composite_backward(d_pixel, d_weights_extra, density, color, t_edges, background, weights):
    """Gradients of the composite w.r.t. per-sample density and color.

    d_pixel is dL/d(pixel color); d_weights_extra is an optional additional
    dL/d(weights) term (e.g. from the distortion regularizer). Uses the
    identity w_k = T_k - T_{k+1} to avoid dividing by (1 - alpha).
    """
    background = np.asarray(background, dtype=float)
    delta = t_edges[..., 1:] - t_edges[..., :-1]
    beta = density * delta
    t_after = np.cumprod(np.exp(-beta), axis=-1)
    g = np.einsum("...c,...kc->...k", d_pixel, color - background)
    if d_weights_extra is not None:
        g = g + d_weights_extra
    gw = g * weights
    suffix = np.flip(np.cumsum(np.flip(gw, axis=-1), axis=-1), axis=-1) - gw
    d_beta = g * t_after - suffix
    d_density = d_beta * delta
    d_color = weights[..., None] * d_pixel[..., None, :]
    return d_density, d_color


def photometric_loss(rendered: np.ndarray, observed: np.ndarray) -> float:
    """Mean squared error over all pixels and channels."""
    rendered = np.asarray(rendered, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if rendered.shape != observed.shape:
        raise DimensionMismatch(f"image shapes differ: {rendered.shape} vs {observed.shape}")
    return float(np.mean((rendered - observed) ** 2))


def distortion_loss(weights: np.ndarray, t_edges: np.ndarray) -> float:
    """Compactness regularizer on compositing weights along a ray.

    sum_{j,k} w_j w_k |m_j - m_k| + (1/3) sum_k w_k^2 delta_k, with m the
    interval midpoints; averaged over rays. Expects intervals already
    expressed in normalized ray distance. Zero only when all weight mass
    sits at a single zero-width point.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    t_edges = np.atleast_2d(np.asarray(t_edges, dtype=float))
    if weights.shape[-1] != t_edges.shape[-1] - 1:
        raise DimensionMismatch("weights must align with intervals")
    loss, _ = _distortion_with_grad(weights, t_edges)
    return float(loss.mean())


def _distortion_with_grad(weights, t_edges):
    """Per-ray distortion values and dL/dw, via prefix sums (samples sorted)."""
    mids = 0.5 * (t_edges[..., 1:] + t_edges[..., :-1])
    delta = t_edges[..., 1:] - t_edges[..., :-1]
    wm = weights * mids
    cw = np.cumsum(weights, axis=-1)
    cwm = np.cumsum(wm, axis=-1)
    total_w = cw[..., -1:]
    total_wm = cwm[..., -1:]
    # sum_j w_j |m_k - m_j| split into j <= k and j > k parts
    abs_sum = mids * cw - cwm + (total_wm - cwm) - mids * (total_w - cw)
    pair = np.sum(weights * abs_sum, axis=-1)
    self_term = np.sum(weights**2 * delta, axis=-1) / 3.0
    loss = pair + self_term
    d_w = 2.0 * abs_sum + (2.0 / 3.0) * weights * delta
    return loss, d_w


@dataclass(frozen=True)
class RenderConfig:
    """Quadrature settings shared by training, rendering and blending."""

    near: float
    far: float
    n_samples: int = 32
    background: tuple = (0.5, 0.5, 0.5)

    def to_dict(self) -> dict:
        return {
            "near": self.near,
            "far": self.far,
            "n_samples": self.n_samples,
            "background": list(self.background),
        }

    @staticmethod
    def from_dict(d: dict) -> "RenderConfig":
        return RenderConfig(
            near=float(d["near"]),
            far=float(d["far"]),
            n_samples=int(d["n_samples"]),
            background=tuple(d["background"]),
        )


@dataclass
class RayLossResult:
    total: float
    photometric: float
    distortion: float
    param_grads: dict | None
    d_origins: np.ndarray | None
    d_dirs: np.ndarray | None


def render_rays(fld, origins, dirs, footprints, cfg: RenderConfig, pos_weights=None,
                stratified=False, rng=None):
    """Forward render of a ray batch; returns (colors (R,3), RaySamples)."""
    samples = sample_rays(origins, dirs, cfg.near, cfg.far, cfg.n_samples,
                          footprints, stratified, rng)
    dirs_b = np.asarray(dirs, dtype=float)[:, None, :]
    sigma, rgb, _ = fld.query(samples.region, dirs_b, pos_weights)
    pixel, weights, _ = composite(sigma, rgb, samples.t_edges, cfg.background)
    samples.density = sigma
    samples.color = rgb
    samples.weights = weights
    return pixel, samples


def render_image(fld, camera: Camera, cfg: RenderConfig, pos_weights=None, chunk=8192) -> np.ndarray:
    """Deterministic full-frame render (stratification off), chunked over pixels."""
    ii, jj = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    pixels = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
    origins, dirs = generate_rays(camera, pixels)
    footprints = np.full(pixels.shape[0], camera.footprint)
    out = np.empty((pixels.shape[0], 3))
    for start in range(0, pixels.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl], _ = render_rays(fld, origins[sl], dirs[sl], footprints[sl], cfg, pos_weights)
    return out.reshape(camera.height, camera.width, 3)


def ray_loss(
    fld,
    origins,
    dirs,
    footprints,
    targets,
    cfg: RenderConfig,
    pos_weights=None,
    stratified=False,
    rng=None,
    lambda_dist: float = 0.0,
    need_param_grads: bool = False,
    need_ray_grads: bool = False,
) -> RayLossResult:
    """Photometric (+ optional distortion) loss over a ray batch, with gradients.

    Returns parameter gradients summed over the batch and/or per-ray
    gradients w.r.t. ray origin and direction (all paths included: sample
    means, frustum covariances, and the view-direction conditioning).
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n_rays = origins.shape[0]
    samples = sample_rays(origins, dirs, cfg.near, cfg.far, cfg.n_samples,
                          footprints, stratified, rng)
    dirs_b = dirs[:, None, :]
    sigma, rgb, cache = fld.query(samples.region, dirs_b, pos_weights)
    pixel, weights, _ = composite(sigma, rgb, samples.t_edges, cfg.background)

    residual = pixel - targets
    photo = float(np.mean(residual**2))
    d_pixel = 2.0 * residual / residual.size

    dist = 0.0
    d_w_extra = None
    if lambda_dist > 0.0:
        span = cfg.far - cfg.near
        s_edges = (samples.t_edges - cfg.near) / span
        dist_per_ray, d_w = _distortion_with_grad(weights, s_edges)
        dist = float(dist_per_ray.mean())
        d_w_extra = lambda_dist * d_w / n_rays

    total = photo + lambda_dist * dist
    if not (need_param_grads or need_ray_grads) or not np.isfinite(total):
        return RayLossResult(total, photo, dist, None, None, None)

    d_sigma, d_rgb = composite_backward(
        d_pixel, d_w_extra, sigma, rgb, samples.t_edges, cfg.background, weights
    )
    param_grads, d_mean, d_var, d_vdirs = fld.query_backward(
        cache, d_sigma, d_rgb, need_param_grads=need_param_grads
    )

    d_origins = d_dirs = None
    if need_ray_grads:
        mids = samples.midpoints
        d_origins = d_mean.sum(axis=1)
        d_dirs = np.einsum("rk,rkc->rc", mids, d_mean)
        # covariance path: d(var_axis)/d(dir_axis) = 2 dir_axis (var_t - var_r)
        var_t = samples.widths**2 / 12.0
        var_r = (np.asarray(footprints, dtype=float)[:, None] * mids) ** 2
        d_dirs += np.einsum("rk,rkc->rc", var_t - var_r, d_var) * 2.0 * dirs
        d_dirs += d_vdirs.sum(axis=1)
    return RayLossResult(total, photo, dist, param_grads, d_origins, d_dirs)


def twist_gradient(origins: np.ndarray, d_origins: np.ndarray,
                   dirs: np.ndarray, d_dirs: np.ndarray) -> np.ndarray:
    """Contract per-ray origin/direction gradients into dL/d(twist) at xi = 0.

    For a left perturbation exp(xi) applied to the pose(s) that produced
    these rays, the rotational gradient is the sum of (world vector) x
    (its gradient) over ray origins and directions; the translational
    gradient is the summed origin gradient. Rays may come from several
    cameras sharing one twist (each row carries its own origin). Returns
    the 6-vector in Twist order (rotation, translation).
    """
    g_trans = d_origins.sum(axis=0)
    g_rot = np.cross(origins, d_origins).sum(axis=0) + np.cross(dirs, d_dirs).sum(axis=0)
    return np.concatenate([g_rot, g_trans])


def pixel_targets(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Colors of integer pixel locations (R, 2) given as (u, v) = (col, row)."""
    px = pixels.astype(int)
    return image[px[:, 1], px[:, 0], :]


def camera_ray_batch(camera: Camera, image: np.ndarray, n_rays: int, rng) -> tuple:
    """Random pixel batch of one image: (origins, dirs, footprints, targets)."""
    u = rng.integers(0, camera.width, size=n_rays)
    v = rng.integers(0, camera.height, size=n_rays)
    pixels = np.stack([u, v], axis=-1)
    origins, dirs = generate_rays(camera, pixels + 0.5)
    footprints = np.full(n_rays, camera.footprint)
    return origins, dirs, footprints, pixel_targets(image, pixels)


def apply_twist_step(pose: Pose, step: np.ndarray) -> Pose:
    """One re-centered pose update: exp(step) @ pose, renormalized.

    An exactly-zero step returns the pose untouched: re-orthonormalizing
    would inject ulp-level noise that an adaptive optimizer then amplifies,
    walking the pose away from an exact optimum.
    """
    from .geometry import exp_map

    if not np.any(step):
        return pose
    xi = Twist(step[:3], step[3:])
    return exp_map(xi).compose(pose).renormalized()
