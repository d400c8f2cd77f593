"""Pose recovery against trained fields and transform estimation between them.

Stage 2 (frame-to-model): gradient descent of the photometric loss of a
render against one observed image, optimizing a pose twist on the tangent
space at the identity and re-centering every step. A truncated low-pass
filter keeps only low encoding frequencies until the iteration progress
crosses its threshold, which smooths the loss landscape enough to escape
the local optima that large initial offsets produce.

Stage 3 (model-to-model): the relative transform between two fields is
assembled from frame-to-model results in both directions, candidates are
ranked by the inverse-composition consistency residual, and the winner is
refined against cross-rendered images (fewer steps, full frequencies).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .bundle_adjust import Adam, exp_decay
from .encoding import FrequencyWeights, tdlf_weights
from .errors import DivergenceDetected, InvalidArgument, NoValidCandidates
from .geometry import Pose, consistency_residual
from .rendering import (
    Camera,
    RenderConfig,
    apply_twist_step,
    generate_rays,
    pixel_targets,
    ray_loss,
    render_image,
    twist_gradient,
)


@dataclass
class Frame2ModelConfig:
    """Settings for single-image pose recovery against a frozen field."""

    max_iterations: int = 300
    pose_lr_init: float = 1e-2
    pose_lr_final: float = 1e-3
    translation_lr_scale: float = 1.0
    tau: float = 0.8
    alpha0_fraction: float = 0.6
    use_tdlf: bool = True
    rays_per_step: int = 512
    # last fraction of iterations repeats one fixed large pixel subset
    # (deterministic gradient), letting the pose settle into the photometric
    # minimum instead of random-walking on minibatch noise
    polish_fraction: float = 0.2
    polish_rays: int = 4096
    convergence_threshold: float = 1e-5
    model2model_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 0.0 < self.alpha0_fraction <= 1.0:
            raise ValueError("alpha0_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Frame2ModelConfig":
        return Frame2ModelConfig(**d)


@dataclass
class Frame2ModelResult:
    pose: Pose
    residuals: list
    converged: bool


@dataclass
class PairRegistration:
    """Both directed transforms recovered from one co-view image pair."""

    t_ji: Pose
    t_ij: Pose
    consistency: float
    photometric: float
    pair: tuple


@dataclass
class RegistrationResult:
    """Winning relative transform with its diagnostics."""

    transform: Pose  # maps frame-i coordinates into frame j
    consistency: float
    photometric: float
    pair: tuple
    n_candidates: int = 1
    n_skipped: int = 0


def _pose_lr_vector(cfg: Frame2ModelConfig, progress: float) -> np.ndarray:
    lr = exp_decay(cfg.pose_lr_init, cfg.pose_lr_final, progress)
    return np.concatenate([np.full(3, lr), np.full(3, lr * cfg.translation_lr_scale)])


def frame2model(
    fld,
    observed: np.ndarray,
    init_pose: Pose,
    camera: Camera,
    render: RenderConfig,
    cfg: Frame2ModelConfig,
) -> Frame2ModelResult:
    """Recover the camera pose of one observed image inside a trained field.

    Minimizes the photometric loss over a fresh random subset of rays per
    step; the pose update is exp(step) @ pose (re-centered each step).
    Raises DivergenceDetected on a non-finite loss; a run that ends with a
    twist update above the convergence threshold is flagged, not fatal.
    """
    if observed.shape != (camera.height, camera.width, 3):
        raise InvalidArgument(
            f"observed image {observed.shape} does not match intrinsics "
            f"({camera.height}, {camera.width}, 3)"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))
    num_freq = getattr(fld, "pos_frequencies", 8)
    pose = init_pose
    adam = Adam({"xi": np.zeros(6)})
    residuals = []
    update_norm = np.inf
    denom = max(1, cfg.max_iterations - 1)
    polish_pixels = None
    for it in range(cfg.max_iterations):
        progress = it / denom
        if cfg.use_tdlf:
            weights = tdlf_weights(progress, cfg.tau, cfg.alpha0_fraction, num_freq)
        else:
            weights = FrequencyWeights.ones(num_freq)
        if progress >= 1.0 - cfg.polish_fraction:
            if polish_pixels is None:
                n_all = camera.width * camera.height
                if cfg.polish_rays >= n_all:
                    uu, vv = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
                    polish_pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)
                else:
                    flat = rng.choice(n_all, size=cfg.polish_rays, replace=False)
                    polish_pixels = np.stack([flat % camera.width, flat // camera.width], axis=-1)
            pixels = polish_pixels
        else:
            u = rng.integers(0, camera.width, size=cfg.rays_per_step)
            v = rng.integers(0, camera.height, size=cfg.rays_per_step)
            pixels = np.stack([u, v], axis=-1)
        origins, dirs = generate_rays(camera.with_pose(pose), pixels + 0.5)
        footprints = np.full(pixels.shape[0], camera.footprint)
        targets = pixel_targets(observed, pixels)
        res = ray_loss(
            fld, origins, dirs, footprints, targets, render,
            pos_weights=weights, need_ray_grads=True,
        )
        if not np.isfinite(res.total):
            raise DivergenceDetected(f"non-finite loss at iteration {it}")
        residuals.append(res.photometric)
        g = twist_gradient(origins, res.d_origins, dirs, res.d_dirs)
        step = adam.step({"xi": g}, _pose_lr_vector(cfg, progress))["xi"]
        pose = apply_twist_step(pose, -step)
        update_norm = float(np.linalg.norm(step))
        if update_norm < cfg.convergence_threshold and it > 10:
            break
    return Frame2ModelResult(pose, residuals, update_norm <= cfg.convergence_threshold)


def frame2model_pairwise(
    field_i,
    field_j,
    dataset_i,
    dataset_j,
    pairs,
    render_i: RenderConfig,
    render_j: RenderConfig,
    cfg: Frame2ModelConfig,
) -> tuple:
    """Run frame-to-model in both directions for each co-view pair.

    For pair (k, t): image k of agent i is located inside field j starting
    from agent j's pose t, giving T_j^{C_k} and the transform
    T_ji = T_j^{C_k} (T_i^{C_k})^-1; the mirrored run gives T_ij. Returns
    (list of PairRegistration, number of skipped pairs); a pair whose
    optimization diverges is skipped and counted.
    """
    results = []
    skipped = 0
    for pair_index, (k, t, _dist) in enumerate(pairs):
        try:
            fwd = frame2model(
                field_j, dataset_i.images[k], dataset_j.poses[t],
                dataset_i.camera, render_j,
                replace(cfg, seed=cfg.seed + 101 * pair_index),
            )
            rev = frame2model(
                field_i, dataset_j.images[t], dataset_i.poses[k],
                dataset_j.camera, render_i,
                replace(cfg, seed=cfg.seed + 101 * pair_index + 50),
            )
        except DivergenceDetected:
            skipped += 1
            continue
        t_ji = fwd.pose.compose(dataset_i.poses[k].inverse())
        t_ij = rev.pose.compose(dataset_j.poses[t].inverse())
        results.append(
            PairRegistration(
                t_ji=t_ji,
                t_ij=t_ij,
                consistency=consistency_residual(t_ji, t_ij),
                photometric=fwd.residuals[-1] + rev.residuals[-1],
                pair=(int(k), int(t)),
            )
        )
    return results, skipped


def select_candidate(results: list, n_skipped: int = 0) -> RegistrationResult:
    """Pick the pair whose transforms are most mutually consistent.

    Minimum consistency residual wins; exact ties fall back to the lower
    summed photometric residual, then to the pair ids (making selection
    permutation-invariant).
    """
    if not results:
        raise NoValidCandidates("no successful registration pairs")
    best = min(results, key=lambda r: (r.consistency, r.photometric, r.pair))
    return RegistrationResult(
        transform=best.t_ji,
        consistency=best.consistency,
        photometric=best.photometric,
        pair=best.pair,
        n_candidates=len(results),
        n_skipped=n_skipped,
    )


def jittered_query_poses(base_poses: list, extent: float, n_jitter: int = 4,
                         seed: int = 0) -> list:
    """Co-view poses plus jittered copies (+-1% of extent translation)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    out = list(base_poses)
    for p in base_poses:
        for _ in range(n_jitter):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            shift = direction * 0.01 * extent * rng.uniform(0.0, 1.0)
            out.append(Pose(p.rotation, p.translation + shift))
    return out


def model2model_refine(
    field_i,
    field_j,
    t_init: Pose,
    query_poses: list,
    camera: Camera,
    render_i: RenderConfig,
    render_j: RenderConfig,
    cfg: Frame2ModelConfig,
) -> Pose:
    """Refine the relative transform against cross-rendered images.

    Field i renders at the query poses (frame i) serve as detached
    observations; field j is rendered at the transform-mapped poses and a
    single shared twist correction on the transform is optimized. Runs a
    configured fraction of the frame-to-model budget with full-frequency
    weights (no low-pass filter).
    """
    if not query_poses:
        raise InvalidArgument("model-to-model refinement needs at least one query pose")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(4,)))
    weights = FrequencyWeights.ones(getattr(field_j, "pos_frequencies", 8))
    observations = [
        render_image(field_i, camera.with_pose(p), render_i) for p in query_poses
    ]
    iterations = max(1, int(round(cfg.max_iterations * cfg.model2model_fraction)))
    denom = max(1, iterations - 1)
    transform = t_init
    adam = Adam({"xi": np.zeros(6)})
    n_query = len(query_poses)
    rays_per_query = max(1, cfg.rays_per_step // n_query)
    polish_per_query = max(rays_per_query, cfg.polish_rays // n_query)
    polish_pixels = None
    for it in range(iterations):
        progress = it / denom
        if progress >= 1.0 - cfg.polish_fraction and polish_pixels is None:
            n_all = camera.width * camera.height
            polish_pixels = []
            for _q in range(n_query):
                flat = rng.choice(n_all, size=min(polish_per_query, n_all), replace=False)
                polish_pixels.append(
                    np.stack([flat % camera.width, flat // camera.width], axis=-1)
                )
        all_origins, all_dirs, all_targets = [], [], []
        for q, base in enumerate(query_poses):
            pose_in_j = transform.compose(base)
            if polish_pixels is not None:
                pixels = polish_pixels[q]
            else:
                u = rng.integers(0, camera.width, size=rays_per_query)
                v = rng.integers(0, camera.height, size=rays_per_query)
                pixels = np.stack([u, v], axis=-1)
            origins, dirs = generate_rays(camera.with_pose(pose_in_j), pixels + 0.5)
            all_origins.append(origins)
            all_dirs.append(dirs)
            all_targets.append(pixel_targets(observations[q], pixels))
        origins = np.concatenate(all_origins)
        dirs = np.concatenate(all_dirs)
        targets = np.concatenate(all_targets)
        footprints = np.full(origins.shape[0], camera.footprint)
        res = ray_loss(
            field_j, origins, dirs, footprints, targets, render_j,
            pos_weights=weights, need_ray_grads=True,
        )
        if not np.isfinite(res.total):
            raise DivergenceDetected(f"non-finite loss at refinement iteration {it}")
        g = twist_gradient(origins, res.d_origins, dirs, res.d_dirs)
        step = adam.step({"xi": g}, _pose_lr_vector(cfg, progress))["xi"]
        transform = apply_twist_step(transform, -step)
    return transform
