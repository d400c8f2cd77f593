"""Merging two fields' ray samples into one quadrature and blending them.

Both fields sample the same world-space ray (field j's ray is the camera
ray mapped through the relative transform, which leaves the scalar ray
parameter unchanged). Midpoints are merged, sorted and deduplicated; the
merged interval edges sit halfway between consecutive midpoints, with the
outermost edges mirroring the adjacent half-gap, so merging a grid with
itself reproduces it exactly.

Per merged point, each field contributes density and color, weighted by a
saturated inverse-distance ratio on the distances to the two field origins
(fifth power, cut off at distance ratios 0.5 and 2). The raw branch values
of the two sides need not sum to one at the ratio boundaries, so the pair
is renormalized; strictly inside the middle branch it already sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, NonPositiveDistance
from .geometry import Pose
from .rendering import Camera, RenderConfig, RaySamples, composite, generate_rays

# midpoints closer than this merge into one quadrature node
DEDUP_TOLERANCE = 1e-9

IDW_POWER = 5
RATIO_LOW = 0.5
RATIO_HIGH = 2.0


def idw_branch_weight(d_self, d_other):
    """Raw saturated-IDW branch value for one field (before renormalization).

    1 when this field's origin is less than half as far as the other's,
    0 when it is at least twice as far, and the fifth-power ratio
    d_other^5 / (d_self^5 + d_other^5) in between.
    """
    d_self = np.asarray(d_self, dtype=float)
    d_other = np.asarray(d_other, dtype=float)
    if np.any(d_self <= 0.0) or np.any(d_other <= 0.0):
        raise NonPositiveDistance("origin distances must be strictly positive")
    ratio = d_self / d_other
    middle = d_other**IDW_POWER / (d_self**IDW_POWER + d_other**IDW_POWER)
    out = np.where(ratio < RATIO_LOW, 1.0, np.where(ratio < RATIO_HIGH, middle, 0.0))
    return out if out.ndim else float(out)


def idw_weight(d_i, d_j):
    """Normalized blend weights (w_i, w_j) for the two fields.

    Each side's raw branch value comes from idw_branch_weight with the
    roles swapped; the pair is renormalized to sum to one (inside the open
    middle branch it already does; at the saturation boundaries exactly one
    side is positive and the pair becomes (1,0) or (0,1)).
    """
    raw_i = np.asarray(idw_branch_weight(d_i, d_j), dtype=float)
    raw_j = np.asarray(idw_branch_weight(d_j, d_i), dtype=float)
    total = raw_i + raw_j
    w_i = raw_i / total
    w_j = raw_j / total
    if w_i.ndim:
        return w_i, w_j
    return float(w_i), float(w_j)


@dataclass
class MergedRay:
    """One ray's merged quadrature with both fields' per-point values."""

    midpoints: np.ndarray
    widths: np.ndarray
    density_i: np.ndarray
    color_i: np.ndarray
    distance_i: np.ndarray
    density_j: np.ndarray
    color_j: np.ndarray
    distance_j: np.ndarray
    weight_i: np.ndarray
    weight_j: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.midpoints) <= 0.0):
            raise ValueError("merged midpoints must be strictly increasing")
        if np.any(self.widths <= 0.0):
            raise ValueError("merged widths must be positive")


def merge_midpoints(mids_a: np.ndarray, mids_b: np.ndarray) -> np.ndarray:
    """Sorted union of two midpoint sets, deduplicated at DEDUP_TOLERANCE."""
    merged = np.sort(np.concatenate([mids_a, mids_b]))
    if merged.size == 0:
        return merged
    keep = np.concatenate([[True], np.diff(merged) > DEDUP_TOLERANCE])
    return merged[keep]


def edges_from_midpoints(mids: np.ndarray, fallback_width: float = 1.0) -> np.ndarray:
    """Interval edges implied by midpoints.

    Interior edges sit halfway between neighbors; the outer edges extend
    the first/last midpoint by half its adjacent gap, so a uniform grid
    round-trips to its own edges. A single midpoint gets fallback_width.
    """
    if mids.size == 0:
        raise EmptyInput("no midpoints")
    if mids.size == 1:
        half = fallback_width / 2.0
        return np.array([mids[0] - half, mids[0] + half])
    inner = 0.5 * (mids[1:] + mids[:-1])
    first = mids[0] - 0.5 * (mids[1] - mids[0])
    last = mids[-1] + 0.5 * (mids[-1] - mids[-2])
    return np.concatenate([[first], inner, [last]])


def _is_empty(samples: RaySamples | None) -> bool:
    return samples is None or samples.t_edges.shape[-1] < 2


def merge_samples(
    samples_i: RaySamples | None,
    samples_j: RaySamples | None,
    query_i=None,
    query_j=None,
) -> MergedRay:
    """Merge two single-ray sample sets into one blended quadrature.

    Each query callback maps merged midpoints (K,) to that field's
    (density, color, origin distance) along the shared ray; a field whose
    samples are empty and that has no callback contributes nothing and the
    other side gets weight one everywhere. Raises EmptyInput when both
    sample sets are empty.
    """
    empty_i = _is_empty(samples_i)
    empty_j = _is_empty(samples_j)
    if empty_i and empty_j:
        raise EmptyInput("both sample sets are empty")
    mids_i = samples_i.midpoints if not empty_i else np.zeros(0)
    mids_j = samples_j.midpoints if not empty_j else np.zeros(0)
    mids = merge_midpoints(np.atleast_1d(mids_i), np.atleast_1d(mids_j))
    fallback = 1.0
    if not empty_i:
        fallback = float(np.mean(samples_i.widths))
    elif not empty_j:
        fallback = float(np.mean(samples_j.widths))
    edges = edges_from_midpoints(mids, fallback)
    widths = np.diff(edges)

    has_i = query_i is not None or not empty_i
    has_j = query_j is not None or not empty_j

    def _values(query, samples, empty, present):
        k = mids.shape[0]
        if not present:
            return np.zeros(k), np.zeros((k, 3)), np.full(k, np.nan)
        if query is not None:
            return query(mids)
        # no callback: only valid when the merged grid is this field's own
        if empty or samples.density is None or not np.array_equal(mids, samples.midpoints):
            raise ValueError("merging resampled midpoints requires a query callback")
        dist = samples.origin_distance
        if dist is None:
            dist = np.full(k, np.nan)
        return samples.density, samples.color, dist

    density_i, color_i, dist_i = _values(query_i, samples_i, empty_i, has_i)
    density_j, color_j, dist_j = _values(query_j, samples_j, empty_j, has_j)

    if has_i and has_j:
        weight_i, weight_j = idw_weight(dist_i, dist_j)
    elif has_i:
        weight_i = np.ones_like(mids)
        weight_j = np.zeros_like(mids)
    else:
        weight_i = np.zeros_like(mids)
        weight_j = np.ones_like(mids)

    return MergedRay(
        midpoints=mids,
        widths=widths,
        density_i=density_i,
        color_i=color_i,
        distance_i=dist_i,
        density_j=density_j,
        color_j=color_j,
        distance_j=dist_j,
        weight_i=weight_i,
        weight_j=weight_j,
    )


def _uniform_midpoints(cfg: RenderConfig) -> np.ndarray:
    edges = np.linspace(cfg.near, cfg.far, cfg.n_samples + 1)
    return 0.5 * (edges[1:] + edges[:-1])


def _field_values_on_grid(fld, origins, dirs, mids, edges, footprints, cfg, pos_weights):
    """Evaluate one field over the shared merged grid, clamping out of band."""
    from .encoding import GaussianRegion

    mean = origins[:, None, :] + mids[None, :, None] * dirs[:, None, :]
    widths = np.diff(edges)
    var_t = widths**2 / 12.0
    var_r = (footprints[:, None] * mids[None, :]) ** 2
    d_sq = dirs[:, None, :] ** 2
    variance = var_t[None, :, None] * d_sq + var_r[..., None] * (1.0 - d_sq)
    sigma, rgb, _ = fld.query(GaussianRegion(mean, variance), dirs[:, None, :], pos_weights)
    in_band = (mids >= cfg.near) & (mids <= cfg.far)
    sigma = np.where(in_band[None, :], sigma, 0.0)
    distance = np.linalg.norm(mean, axis=-1)
    return sigma, rgb, distance


def blend_render(
    field_i,
    field_j,
    t_ji: Pose,
    camera: Camera,
    render_i: RenderConfig,
    render_j: RenderConfig | None = None,
    chunk: int = 4096,
) -> np.ndarray:
    """Render the camera (posed in frame i) from both fields and blend.

    Every pixel ray is sampled on the merged quadrature of the two render
    configurations; both fields are evaluated at every merged point (a
    field queried outside its near/far band contributes zero density), and
    per-point densities and colors mix with the normalized IDW weights
    before a single composite.
    """
    render_j = render_j or render_i
    mids = merge_midpoints(_uniform_midpoints(render_i), _uniform_midpoints(render_j))
    edges = edges_from_midpoints(mids)

    ii, jj = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    pixels = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
    out = np.empty((pixels.shape[0], 3))
    for start in range(0, pixels.shape[0], chunk):
        sl = slice(start, start + chunk)
        origins_i, dirs_i = generate_rays(camera, pixels[sl])
        footprints = np.full(origins_i.shape[0], camera.footprint)
        sigma_i, rgb_i, dist_i = _field_values_on_grid(
            field_i, origins_i, dirs_i, mids, edges, footprints, render_i, None
        )
        origins_j = t_ji.apply(origins_i)
        dirs_j = t_ji.rotate(dirs_i)
        sigma_j, rgb_j, dist_j = _field_values_on_grid(
            field_j, origins_j, dirs_j, mids, edges, footprints, render_j, None
        )
        w_i, w_j = idw_weight(dist_i, dist_j)
        sigma = w_i * sigma_i + w_j * sigma_j
        rgb = w_i[..., None] * rgb_i + w_j[..., None] * rgb_j
        colors, _, _ = composite(sigma, rgb, edges[None, :], render_i.background)
        out[sl] = colors
    return out.reshape(camera.height, camera.width, 3)
