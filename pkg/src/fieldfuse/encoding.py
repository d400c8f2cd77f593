"""Sinusoidal positional encoding and its frequency-weight schedules.

Two schedules gate the per-frequency components:

- a coarse-to-fine cosine ramp that activates frequencies progressively as
  training advances, and
- a truncated low-pass filter that keeps only a fixed low band until the
  optimization progress crosses a release threshold, then opens everything.

Points are encoded directly; Gaussian regions (mean + diagonal covariance)
are encoded in expectation, which attenuates each frequency by
exp(-0.5 * 4^k * var) per axis. Feature layout, per sample:

    [x, y, z]                          (only when include_identity)
    [sin(2^k x), sin(2^k y), sin(2^k z),
     cos(2^k x), cos(2^k y), cos(2^k z)]   for k = 0 .. L-1
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EncodingConfig:
    """Number of frequency octaves and whether the raw input passes through."""

    num_frequencies: int = 8
    include_identity: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    @property
    def output_dim(self) -> int:
        return 6 * self.num_frequencies + (3 if self.include_identity else 0)


@dataclass(frozen=True)
class FrequencyWeights:
    """Per-frequency gate values in [0, 1], non-increasing in k."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.shape[0]

    @staticmethod
    def ones(num_frequencies: int) -> "FrequencyWeights":
        return FrequencyWeights(np.ones(num_frequencies))


@dataclass(frozen=True)
class GaussianRegion:
    """Axis-aligned Gaussian volume: mean (..., 3) and diagonal covariance (..., 3).

    Arrays may carry any leading batch shape; covariance entries are >= 0.
    """

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        # floating dtypes pass through (float32 pipelines stay float32)
        mean = np.asarray(self.mean)
        var = np.asarray(self.variance)
        if not np.issubdtype(mean.dtype, np.floating):
            mean = mean.astype(float)
        if var.dtype != mean.dtype:
            var = var.astype(mean.dtype)
        if mean.shape[-1] != 3 or var.shape != mean.shape:
            raise ValueError(f"mean/variance must both be (..., 3), got {mean.shape} {var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @staticmethod
    def point(mean) -> "GaussianRegion":
        mean = np.asarray(mean)
        if not np.issubdtype(mean.dtype, np.floating):
            mean = mean.astype(float)
        return GaussianRegion(mean, np.zeros_like(mean))


def c2f_weights(alpha: float, num_frequencies: int) -> FrequencyWeights:
    """Coarse-to-fine cosine-ramp weights.

    For frequency index k (0-based):
        0                         if alpha < k
        (1 - cos((alpha-k) pi))/2 if 0 <= alpha - k < 1
        1                         if alpha - k >= 1
    alpha runs over [0, L]; at alpha = L all frequencies are active.
    """
    if not 0.0 <= alpha <= num_frequencies:
        raise ValueError(f"alpha must lie in [0, {num_frequencies}], got {alpha}")
    k = np.arange(num_frequencies, dtype=float)
    ramp = np.clip(alpha - k, 0.0, 1.0)
    return FrequencyWeights((1.0 - np.cos(ramp * np.pi)) / 2.0)


def tdlf_weights(
    progress: float,
    tau: float,
    alpha0_fraction: float,
    num_frequencies: int,
) -> FrequencyWeights:
    """Truncated low-pass weights: binary mask with a single release event.

    Before progress reaches tau, only frequencies k <= alpha0_fraction * L
    are active; at progress >= tau (inclusive) every frequency is released.
    alpha0_fraction is a fraction of L, so the truncation point scales with
    the configured number of octaves.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    alpha = float(num_frequencies) if progress >= tau else alpha0_fraction * num_frequencies
    k = np.arange(num_frequencies, dtype=float)
    return FrequencyWeights(np.where(alpha >= k, 1.0, 0.0))


def _frequency_grid(num_frequencies: int) -> np.ndarray:
    return 2.0 ** np.arange(num_frequencies, dtype=float)


def encode_point(x, cfg: EncodingConfig, w: FrequencyWeights) -> np.ndarray:
    """Weighted sinusoidal features of points with shape (..., 3)."""
    region = GaussianRegion.point(x)
    out, _ = encode_gaussian_with_cache(region, cfg, w)
    return out


def encode_gaussian(g: GaussianRegion, cfg: EncodingConfig, w: FrequencyWeights) -> np.ndarray:
    """Expected encoding under the Gaussian region.

    Equals ``encode_point(mean)`` with every frequency-k sin/cos term
    attenuated by exp(-0.5 * 4^k * variance) on its axis; the identity
    passthrough stays at the mean.
    """
    out, _ = encode_gaussian_with_cache(g, cfg, w)
    return out


def encode_gaussian_with_cache(g: GaussianRegion, cfg: EncodingConfig, w: FrequencyWeights):
    """Forward encoding that also returns the cache needed by the backward pass."""
    if len(w) != cfg.num_frequencies:
        raise ValueError(f"weights length {len(w)} != num_frequencies {cfg.num_frequencies}")
    if np.any(g.variance < 0):
        raise ValueError("variance entries must be >= 0")
    dtype = g.mean.dtype
    freqs = _frequency_grid(cfg.num_frequencies).astype(dtype)
    wts = w.weights.astype(dtype)
    phase = g.mean[..., None, :] * freqs[:, None]            # (..., L, 3)
    if g.variance.any():
        atten = np.exp((-0.5 * freqs**2).astype(dtype)[:, None] * g.variance[..., None, :])
        gate = wts[:, None] * atten                          # (..., L, 3)
    else:
        gate = np.broadcast_to(wts[:, None], phase.shape)
    sin_g = gate * np.sin(phase)
    cos_g = gate * np.cos(phase)
    batch = g.mean.shape[:-1]
    blocks = np.concatenate([sin_g, cos_g], axis=-1)         # (..., L, 6)
    features = blocks.reshape(batch + (6 * cfg.num_frequencies,))
    if cfg.include_identity:
        features = np.concatenate([g.mean, features], axis=-1)
    cache = (cfg, freqs, sin_g, cos_g)
    return features, cache


def encode_gaussian_backward(upstream: np.ndarray, cache) -> tuple:
    """Gradients of the encoding w.r.t. region mean and variance.

    upstream has the feature shape (..., D); returns (d_mean, d_variance),
    each (..., 3).
    """
    cfg, freqs, sin_g, cos_g = cache
    batch = sin_g.shape[:-2]
    if cfg.include_identity:
        d_identity = upstream[..., :3]
        upstream = upstream[..., 3:]
    else:
        d_identity = None
    blocks = upstream.reshape(batch + (cfg.num_frequencies, 6))
    up_sin = blocks[..., :3]
    up_cos = blocks[..., 3:]
    # d(sin_g)/d(mean) = f * cos_g, d(cos_g)/d(mean) = -f * sin_g
    f = freqs[:, None]
    d_mean = np.sum(f * (up_sin * cos_g - up_cos * sin_g), axis=-2)
    # d/d(var) multiplies each term by -0.5 f^2
    d_var = np.sum(-0.5 * (f**2) * (up_sin * sin_g + up_cos * cos_g), axis=-2)
    if d_identity is not None:
        d_mean = d_mean + d_identity
    return d_mean, d_var
