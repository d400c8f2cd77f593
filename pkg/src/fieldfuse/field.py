"""Differentiable radiance fields.

Two implementations share one query interface (used by the renderer):

- ``MlpField``: a small trainable MLP over integrated positional encodings,
  with hand-rolled reverse-mode gradients for parameters and inputs.
- ``AnalyticFieldModel``: a closed-form sum of Gaussian density blobs used
  as ground truth for synthetic scenes and as an independent oracle in
  tests. It is differentiable w.r.t. position, ignores the view direction
  and the region covariance.

Density is softplus-activated (non-negative), color sigmoid-activated
(inside [0,1]^3). Checkpoints are a versioned JSON header followed by a
raw little-endian float32 weight blob (extension ``.field``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .encoding import (
    EncodingConfig,
    FrequencyWeights,
    GaussianRegion,
    encode_gaussian_backward,
    encode_gaussian_with_cache,
)

CHECKPOINT_MAGIC = b"FFLD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    """Architecture and input-conditioning choices for the MLP field.

    position_scale divides world coordinates before encoding so that the
    scene spans roughly [-pi, pi] in encoder units; density_shift is added
    to the raw density logit before softplus (a negative value makes a
    freshly initialized field nearly transparent).
    """

    pos_frequencies: int = 8
    dir_frequencies: int = 2
    include_identity: bool = True
    hidden_width: int = 64
    hidden_depth: int = 4
    feature_dim: int = 16
    color_width: int = 32
    position_scale: float = 1.0
    density_shift: float = 0.0
    compute_dtype: str = "float64"  # "float32" roughly triples training speed

    @property
    def pos_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.pos_frequencies, self.include_identity)

    @property
    def dir_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.dir_frequencies, self.include_identity)

    @property
    def dtype(self):
        return np.dtype(self.compute_dtype)


@dataclass
class FieldParams:
    """Trainable weights keyed by layer name, plus the architecture."""

    config: FieldConfig
    weights: dict


def _layer_sizes(cfg: FieldConfig) -> list:
    """(name, fan_in, fan_out) triples in a fixed serialization order."""
    sizes = []
    d_in = cfg.pos_encoding.output_dim
    for i in range(cfg.hidden_depth):
        sizes.append((f"trunk.{i}", d_in, cfg.hidden_width))
        d_in = cfg.hidden_width
    sizes.append(("sigma", d_in, 1))
    sizes.append(("feature", d_in, cfg.feature_dim))
    sizes.append(("color.0", cfg.feature_dim + cfg.dir_encoding.output_dim, cfg.color_width))
    sizes.append(("rgb", cfg.color_width, 3))
    return sizes


def init_field_params(cfg: FieldConfig, seed: int = 0) -> FieldParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, fan_in, fan_out in _layer_sizes(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        weights[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(cfg.dtype)
        weights[f"{name}.b"] = rng.uniform(-bound, bound, size=(fan_out,)).astype(cfg.dtype)
    return FieldParams(cfg, weights)


def zero_like_params(params: FieldParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


def quantize_params(params: FieldParams) -> FieldParams:
    """Round weights to checkpoint (float32) precision.

    Training returns quantized parameters so that a save/load cycle is an
    exact no-op on the forward pass.
    """
    weights = {
        k: v.astype(np.float32).astype(params.config.dtype)
        for k, v in params.weights.items()
    }
    return FieldParams(params.config, weights)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def field_query_with_cache(
    params: FieldParams,
    region: GaussianRegion,
    view_dirs: np.ndarray,
    pos_weights: FrequencyWeights,
    validate: bool = False,
):
    """Forward pass over a batch of regions; returns (sigma, rgb, cache).

    region mean/variance are (..., 3); view_dirs broadcasts against the
    same batch shape and must be unit vectors. Internally the batch is
    flattened so every layer runs as a single matrix product.
    """
    cfg = params.config
    w = params.weights
    batch = region.mean.shape[:-1]
    dtype = cfg.dtype
    dirs = np.broadcast_to(np.asarray(view_dirs), region.mean.shape)
    dirs = np.ascontiguousarray(dirs, dtype=dtype).reshape(-1, 3)
    mean = np.ascontiguousarray(region.mean, dtype=dtype).reshape(-1, 3)
    var = np.ascontiguousarray(region.variance, dtype=dtype).reshape(-1, 3)
    if validate:
        norms = np.linalg.norm(dirs, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("view directions must be unit-normalized within 1e-6")

    scale = cfg.position_scale
    scaled = GaussianRegion(mean / scale, var / (scale * scale))
    x, enc_cache = encode_gaussian_with_cache(scaled, cfg.pos_encoding, pos_weights)

    pre = []
    post = [x]
    h = x
    for i in range(cfg.hidden_depth):
        z = h @ w[f"trunk.{i}.w"] + w[f"trunk.{i}.b"]
        h = np.maximum(z, 0.0)
        pre.append(z)
        post.append(h)

    sigma_raw = (h @ w["sigma.w"] + w["sigma.b"])[:, 0] + cfg.density_shift
    sigma = _softplus(sigma_raw)
    feat = h @ w["feature.w"] + w["feature.b"]

    dir_region = GaussianRegion.point(dirs)
    dir_w = FrequencyWeights.ones(cfg.dir_frequencies)
    d_enc, dir_cache = encode_gaussian_with_cache(dir_region, cfg.dir_encoding, dir_w)
    c_in = np.concatenate([feat, d_enc], axis=-1)
    zc = c_in @ w["color.0.w"] + w["color.0.b"]
    hc = np.maximum(zc, 0.0)
    rgb_raw = hc @ w["rgb.w"] + w["rgb.b"]
    rgb = _sigmoid(rgb_raw)

    cache = {
        "batch": batch,
        "enc": enc_cache,
        "dir_enc": dir_cache,
        "pre": pre,
        "post": post,
        "sigma_raw": sigma_raw,
        "feat_dim": cfg.feature_dim,
        "c_in": c_in,
        "zc": zc,
        "hc": hc,
        "rgb": rgb,
    }
    return sigma.reshape(batch), rgb.reshape(batch + (3,)), cache


def field_query(
    params: FieldParams,
    region: GaussianRegion,
    view_dirs: np.ndarray,
    pos_weights: FrequencyWeights | None = None,
):
    """Density (non-negative) and color (in [0,1]^3) for a batch of regions."""
    if pos_weights is None:
        pos_weights = FrequencyWeights.ones(params.config.pos_frequencies)
    sigma, rgb, _ = field_query_with_cache(params, region, view_dirs, pos_weights, validate=True)
    return sigma, rgb


def field_backward(
    params: FieldParams,
    cache: dict,
    d_sigma: np.ndarray,
    d_rgb: np.ndarray,
    need_param_grads: bool = True,
):
    """Exact reverse-mode gradients of ``field_query_with_cache``.

    Returns (param_grads or None, d_mean, d_variance, d_view_dirs), each
    input gradient shaped like the corresponding forward input. Parameter
    gradients are summed over the batch.
    """
    cfg = params.config
    w = params.weights
    batch = cache["batch"]
    dtype = cfg.dtype
    d_sigma = np.asarray(d_sigma, dtype=dtype).reshape(-1)
    d_rgb = np.asarray(d_rgb, dtype=dtype).reshape(-1, 3)
    grads = zero_like_params(params) if need_param_grads else None

    def _accumulate(name, inp, delta):
        if grads is not None:
            grads[f"{name}.w"] += inp.T @ delta
            grads[f"{name}.b"] += delta.sum(axis=0)

    # color head
    d_rgb_raw = d_rgb * cache["rgb"] * (1.0 - cache["rgb"])
    _accumulate("rgb", cache["hc"], d_rgb_raw)
    d_hc = d_rgb_raw @ w["rgb.w"].T
    d_zc = d_hc * (cache["zc"] > 0.0)
    _accumulate("color.0", cache["c_in"], d_zc)
    d_cin = d_zc @ w["color.0.w"].T
    f = cache["feat_dim"]
    d_feat = d_cin[:, :f]
    d_direnc = d_cin[:, f:]
    d_dirs, _ = encode_gaussian_backward(d_direnc, cache["dir_enc"])

    # density head
    d_sigma_raw = d_sigma * _sigmoid(cache["sigma_raw"])
    h_last = cache["post"][-1]
    _accumulate("sigma", h_last, d_sigma_raw[:, None])
    _accumulate("feature", h_last, d_feat)
    d_h = d_sigma_raw[:, None] * w["sigma.w"][:, 0] + d_feat @ w["feature.w"].T

    # trunk
    for i in range(cfg.hidden_depth - 1, -1, -1):
        d_z = d_h * (cache["pre"][i] > 0.0)
        _accumulate(f"trunk.{i}", cache["post"][i], d_z)
        d_h = d_z @ w[f"trunk.{i}.w"].T

    d_enc_mean, d_enc_var = encode_gaussian_backward(d_h, cache["enc"])
    scale = cfg.position_scale
    d_mean = (d_enc_mean / scale).reshape(batch + (3,))
    d_var = (d_enc_var / (scale * scale)).reshape(batch + (3,))
    return grads, d_mean, d_var, d_dirs.reshape(batch + (3,))


class MlpField:
    """Renderer-facing adapter around FieldParams."""

    def __init__(self, params: FieldParams):
        self.params = params

    @property
    def pos_frequencies(self) -> int:
        return self.params.config.pos_frequencies

    def query(self, region: GaussianRegion, view_dirs, pos_weights=None):
        if pos_weights is None:
            pos_weights = FrequencyWeights.ones(self.pos_frequencies)
        return field_query_with_cache(self.params, region, view_dirs, pos_weights)

    def query_backward(self, cache, d_sigma, d_rgb, need_param_grads=False):
        return field_backward(self.params, cache, d_sigma, d_rgb, need_param_grads)


@dataclass(frozen=True)
class Blob:
    """Isotropic Gaussian density lobe with a flat color."""

    center: np.ndarray
    radius: float
    peak: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form scene: density = sum of blobs, color = density-weighted mix."""

    blobs: tuple
    background: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(self.blobs))
        object.__setattr__(self, "background", np.asarray(self.background, dtype=float).reshape(3))


# Total blob density below this threshold falls back to the background color.
_DENSITY_FLOOR = 1e-9


def analytic_query_with_cache(fld: AnalyticField, x: np.ndarray, view_dirs=None):
    x = np.asarray(x, dtype=float)
    contributions = np.empty(x.shape[:-1] + (len(fld.blobs),))
    for b, blob in enumerate(fld.blobs):
        sq = np.sum((x - blob.center) ** 2, axis=-1)
        contributions[..., b] = blob.peak * np.exp(-sq / (2.0 * blob.radius**2))
    density = contributions.sum(axis=-1)
    colors = np.stack([b.color for b in fld.blobs])           # (B, 3)
    numer = contributions @ colors
    safe = np.maximum(density, _DENSITY_FLOOR)
    color = numer / safe[..., None]
    flat = density < _DENSITY_FLOOR
    color[flat] = fld.background
    cache = (fld, x, contributions, density, color, flat)
    return density, color, cache


def analytic_query(fld: AnalyticField, x: np.ndarray, view_dirs=None):
    """Closed-form density and color at points x of shape (..., 3)."""
    density, color, _ = analytic_query_with_cache(fld, x, view_dirs)
    return density, color


def analytic_backward(cache, d_density: np.ndarray, d_color: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the query positions (the fallback region is flat)."""
    fld, x, contributions, density, color, flat = cache
    safe = np.maximum(density, _DENSITY_FLOOR)
    d_contrib = np.empty_like(contributions)
    for b, blob in enumerate(fld.blobs):
        # color_j = sum_b g_b c_bj / D: d(color_j)/d(g_b) = (c_bj - color_j)/D
        dc = np.sum(d_color * (blob.color - color), axis=-1) / safe
        d_contrib[..., b] = d_density + np.where(flat, 0.0, dc)
    d_x = np.zeros_like(x)
    for b, blob in enumerate(fld.blobs):
        diff = (blob.center - x) / blob.radius**2
        d_x += (d_contrib[..., b] * contributions[..., b])[..., None] * diff
    return d_x


class AnalyticFieldModel:
    """Renderer-facing adapter for AnalyticField.

    Point evaluation at the region mean: the covariance and view direction
    do not enter, so their gradients are identically zero.
    """

    def __init__(self, fld: AnalyticField):
        self.field = fld

    def query(self, region: GaussianRegion, view_dirs, pos_weights=None):
        return analytic_query_with_cache(self.field, region.mean, view_dirs)

    def query_backward(self, cache, d_sigma, d_rgb, need_param_grads=False):
        d_mean = analytic_backward(cache, d_sigma, d_rgb)
        zeros = np.zeros_like(d_mean)
        return None, d_mean, zeros, zeros


@dataclass
class FieldCheckpoint:
    """In-memory form of a ``.field`` file."""

    params: FieldParams
    render: dict
    metadata: dict


def save_field(path, params: FieldParams, render: dict | None = None, metadata: dict | None = None):
    """Write a checkpoint: magic, version, JSON header, float32 LE blob."""
    order = []
    for name, _, _ in _layer_sizes(params.config):
        order.extend([f"{name}.w", f"{name}.b"])
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "render": dict(render or {}),
        "metadata": dict(metadata or {}),
        "tensors": [{"name": k, "shape": list(params.weights[k].shape)} for k in order],
        "dtype": "<f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(params.weights[k].astype("<f4").tobytes() for k in order)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_field(path) -> FieldCheckpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a field checkpoint: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        cfg = FieldConfig(**header["config"])
        weights = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            weights[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(cfg.dtype).reshape(shape)
            )
    params = FieldParams(cfg, weights)
    return FieldCheckpoint(params, header["render"], header["metadata"])
