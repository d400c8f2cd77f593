"""Joint optimization of a radiance field and its camera poses.

One agent's images plus imperfect initial poses go in; a trained field and
refined poses come out. Scene parameters and pose twists are both driven by
Adam with separate exponentially decaying learning-rate schedules; the
coarse-to-fine frequency schedule ramps the encoding weights linearly over
a configured fraction of training. The first camera is frozen to pin the
gauge; evaluation still aligns the remaining global ambiguity out with
``gauge_align``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .encoding import FrequencyWeights, c2f_weights, tdlf_weights
from .errors import DegenerateConfiguration, DivergenceDetected
from .field import FieldConfig, FieldParams, MlpField, init_field_params, quantize_params
from .geometry import Pose, pose_error
from .rendering import (
    Camera,
    RenderConfig,
    apply_twist_step,
    generate_rays,
    pixel_targets,
    ray_loss,
    twist_gradient,
)


@dataclass
class AgentDataset:
    """One agent's capture: images, initial camera-to-world poses, shared intrinsics."""

    agent_id: str
    images: list
    poses: list
    camera: Camera

    def __post_init__(self):
        if len(self.images) < 2:
            raise ValueError("an agent dataset needs at least 2 images")
        if len(self.images) != len(self.poses):
            raise ValueError("images and poses must align")
        shape = (self.camera.height, self.camera.width, 3)
        for img in self.images:
            if img.shape != shape:
                raise ValueError(f"all images must share dimensions {shape}")

    @property
    def m(self) -> int:
        return len(self.images)


@dataclass
class TrainConfig:
    """Bundle-adjustment settings; serializable to/from the experiment config."""

    iterations: int = 2000
    rays_per_batch: int = 1024
    scene_lr_init: float = 2e-3
    scene_lr_final: float = 2e-5
    pose_lr_init: float = 2e-2
    pose_lr_final: float = 6e-3
    pose_translation_lr_scale: float = 1.0
    lambda_dist: float = 0.01
    schedule: str = "c2f"  # "c2f" | "tdlf" | "none"
    c2f_fraction: float = 0.7
    tau: float = 0.8
    alpha0_fraction: float = 0.6
    optimize_poses: bool = True
    seed: int = 0
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderConfig = dc_field(default_factory=lambda: RenderConfig(near=1.0, far=10.0))

    def __post_init__(self):
        if self.scene_lr_init <= 0 or self.pose_lr_init <= 0:
            raise ValueError("learning rates must be positive")
        if self.scene_lr_final > self.scene_lr_init or self.pose_lr_final > self.pose_lr_init:
            raise ValueError("final learning rate must not exceed the initial one")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field"] = asdict(self.field)
        d["render"] = self.render.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["field"] = FieldConfig(**d.get("field", {}))
        d["render"] = RenderConfig.from_dict(d["render"]) if "render" in d else RenderConfig(1.0, 10.0)
        return TrainConfig(**d)


class Adam:
    """Adam over a dict of arrays; step() returns the update to subtract."""

    def __init__(self, template: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in template.items()}
        self.v = {k: np.zeros_like(v) for k, v in template.items()}
        self.t = 0

    def step(self, grads: dict, lr) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        updates = {}
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            updates[k] = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updates


def exp_decay(init: float, final: float, progress: float) -> float:
    """Exponential interpolation from init (progress 0) to final (progress 1)."""
    return float(init * (final / init) ** progress)


def schedule_weights(cfg: TrainConfig, progress: float) -> FrequencyWeights:
    num = cfg.field.pos_frequencies
    if cfg.schedule == "c2f":
        alpha = num * min(1.0, progress / cfg.c2f_fraction)
        return c2f_weights(alpha, num)
    if cfg.schedule == "tdlf":
        return tdlf_weights(progress, cfg.tau, cfg.alpha0_fraction, num)
    return FrequencyWeights.ones(num)


def bundle_adjust(dataset: AgentDataset, cfg: TrainConfig):
    """Train the field and refine the per-image poses.

    Returns (FieldParams, refined poses, loss history); the history rows
    are (iteration, total, photometric, distortion). Parameters come back
    at checkpoint (float32) precision so saving them is lossless. Raises
    DivergenceDetected on a non-finite loss.
    """
    params = init_field_params(cfg.field, seed=cfg.seed)
    poses = list(dataset.poses)
    if cfg.iterations == 0:
        return params, poses, []

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    scene_opt = Adam(params.weights)
    pose_opts = [Adam({"xi": np.zeros(6)}) for _ in range(dataset.m)]
    images = np.stack(dataset.images)
    cam = dataset.camera
    history = []
    denom = max(1, cfg.iterations - 1)

    for it in range(cfg.iterations):
        progress = it / denom
        weights = schedule_weights(cfg, progress)
        # one image per iteration: concentrating the batch on a single pose
        # keeps the pose-twist gradient SNR high enough for Adam
        img = int(rng.integers(0, dataset.m))
        u = rng.integers(0, cam.width, size=cfg.rays_per_batch)
        v = rng.integers(0, cam.height, size=cfg.rays_per_batch)
        pixels = np.stack([u, v], axis=-1)

        origins, dirs = generate_rays(cam.with_pose(poses[img]), pixels + 0.5)
        footprints = np.full(cfg.rays_per_batch, cam.footprint)
        targets = images[img, pixels[:, 1], pixels[:, 0], :]

        res = ray_loss(
            MlpField(params),
            origins,
            dirs,
            footprints,
            targets,
            cfg.render,
            pos_weights=weights,
            stratified=True,
            rng=rng,
            lambda_dist=cfg.lambda_dist,
            need_param_grads=True,
            need_ray_grads=cfg.optimize_poses,
        )
        if not np.isfinite(res.total):
            raise DivergenceDetected(f"non-finite loss at iteration {it}")
        history.append((it, res.total, res.photometric, res.distortion))

        scene_lr = exp_decay(cfg.scene_lr_init, cfg.scene_lr_final, progress)
        for k, upd in scene_opt.step(res.param_grads, scene_lr).items():
            params.weights[k] -= upd

        # first camera stays frozen to fix the gauge
        if cfg.optimize_poses and img != 0:
            pose_lr = exp_decay(cfg.pose_lr_init, cfg.pose_lr_final, progress)
            lr_vec = np.concatenate(
                [np.full(3, pose_lr), np.full(3, pose_lr * cfg.pose_translation_lr_scale)]
            )
            g = twist_gradient(origins, res.d_origins, dirs, res.d_dirs)
            upd = pose_opts[img].step({"xi": g}, lr_vec)["xi"]
            poses[img] = apply_twist_step(poses[img], -upd)

    return quantize_params(params), poses, history


def gauge_align(poses_est: list, poses_truth: list):
    """Closed-form global SE(3) aligning estimated poses onto the truth.

    Solves the orthogonal Procrustes problem on camera centers (scale fixed
    at 1): returns the transform G minimizing sum ||G(t_est) - t_truth||^2
    and the per-pose errors after alignment. Bundle adjustment recovers
    poses only up to such a global transform, so evaluation removes it.

    Raises DegenerateConfiguration when the centers carry no rotation
    signal: all coincident, or three or more collinear within 1e-9. (Two
    centers are always collinear; that minimal case stays valid, with the
    rotation fixed deterministically by the SVD and the residual split per
    least squares.)
    """
    if len(poses_est) != len(poses_truth):
        raise ValueError("pose lists must have equal length")
    n = len(poses_est)
    if n < 2:
        raise ValueError("need at least 2 pose pairs")
    pe = np.stack([p.translation for p in poses_est])
    pt = np.stack([p.translation for p in poses_truth])
    ce, ct = pe.mean(axis=0), pt.mean(axis=0)
    ae, at = pe - ce, pt - ct
    sv = np.linalg.svd(ae, compute_uv=False)
    if sv[0] <= 1e-9:
        raise DegenerateConfiguration("all camera centers coincide")
    if n >= 3 and sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("camera centers are collinear")
    h = ae.T @ at
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    g = Pose(rot, ct - rot @ ce).renormalized()
    errors = [pose_error(g.compose(e), t) for e, t in zip(poses_est, poses_truth)]
    return g, errors


def history_to_csv(history: list) -> str:
    lines = ["iteration,total,photometric,distortion"]
    lines += [f"{it},{tot:.10g},{ph:.10g},{di:.10g}" for it, tot, ph, di in history]
    return "\n".join(lines) + "\n"
