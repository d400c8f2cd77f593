"""Synthetic multi-agent dataset generation, file formats, and image metrics.

Each agent gets its own coordinate frame: world camera poses are
left-multiplied by the inverse of a hidden per-agent frame offset before
being written, so the agents genuinely disagree about coordinates. The
offsets are sealed into ``_truth/truth.json``, which only evaluation reads.

On-disk layout per agent:

    <agent>/images/NNNN.png
    <agent>/poses.json        [{"file": ..., "pose": [16 row-major floats]}]
    <agent>/intrinsics.json   {"fx","fy","cx","cy","width","height"}
    <agent>/_truth/truth.json {"agent_id", "frame_offset": [16 floats]}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .bundle_adjust import AgentDataset
from .errors import DimensionMismatch, ImageTooSmall, InvalidSpec
from .field import AnalyticField, AnalyticFieldModel, Blob
from .geometry import Pose, exp_map, Twist
from .rendering import Camera, RenderConfig, render_image

PSNR_CAP_DB = 99.0


# ---------------------------------------------------------------------------
# image IO


def float_to_u8(image: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes; rounding is round-half-to-even."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_to_float(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(float_to_u8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return u8_to_float(np.asarray(img.convert("RGB")))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class QualityMetrics:
    psnr: float
    ssim: float


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on [0,1] images, capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _luma(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    return image @ np.array([0.299, 0.587, 0.114])


def _window_mean(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(x, w.shape)
    return np.einsum("ijkl,kl->ij", views, w)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM on luma; 11x11 Gaussian window (sigma 1.5),
    C1=(0.01)^2, C2=(0.03)^2 on the [0,1] range."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ImageTooSmall(f"min side {min(a.shape[:2])} < window {window}")
    x = _luma(a)
    y = _luma(b)
    w = _gaussian_window(window, sigma)
    c1 = 0.01**2
    c2 = 0.03**2
    mu_x = _window_mean(x, w)
    mu_y = _window_mean(y, w)
    var_x = _window_mean(x * x, w) - mu_x**2
    var_y = _window_mean(y * y, w) - mu_y**2
    cov = _window_mean(x * y, w) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class AgentSpec:
    """Trajectory and camera of one simulated agent.

    frame_offset is the hidden ground-truth transform from the agent's
    local frame to the world frame (x_world = frame_offset @ x_local).
    """

    agent_id: str
    n_images: int = 48
    width: int = 64
    height: int = 64
    focal: float = 40.0
    trajectory: str = "orbit"  # "orbit" | "grid"
    orbit_radius: float = 26.0
    altitude: tuple = (14.0, 26.0)
    grid_extent: float = 20.0
    frame_offset: Pose = dc_field(default_factory=Pose.identity)

    def camera(self) -> Camera:
        return Camera(
            fx=self.focal,
            fy=self.focal,
            cx=self.width / 2.0,
            cy=self.height / 2.0,
            width=self.width,
            height=self.height,
        )

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "n_images": self.n_images,
            "width": self.width,
            "height": self.height,
            "focal": self.focal,
            "trajectory": self.trajectory,
            "orbit_radius": self.orbit_radius,
            "altitude": list(self.altitude),
            "grid_extent": self.grid_extent,
            "frame_offset": Pose.to_flat(self.frame_offset),
        }

    @staticmethod
    def from_dict(d: dict) -> "AgentSpec":
        d = dict(d)
        d["altitude"] = tuple(d.get("altitude", (14.0, 26.0)))
        d["frame_offset"] = Pose.from_flat(d.get("frame_offset", np.eye(4).reshape(-1)))
        return AgentSpec(**d)


@dataclass
class SceneSpec:
    """Analytic scene plus per-agent trajectories and the generator seed."""

    blobs: list
    agents: list
    background: tuple = (0.5, 0.5, 0.5)
    near: float = 4.0
    far: float = 90.0
    render_samples: int = 96
    look_at: tuple = (0.0, 0.0, 0.0)
    overlap_fraction: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not self.blobs:
            raise InvalidSpec("scene needs at least one blob")
        if not self.agents:
            raise InvalidSpec("scene needs at least one agent")
        if not 0.0 < self.overlap_fraction <= 1.0:
            raise InvalidSpec("overlap_fraction must lie in (0, 1]")
        if not 0.0 < self.near < self.far:
            raise InvalidSpec("need 0 < near < far")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("agent ids must be unique")
        for agent in self.agents:
            if agent.n_images < 2:
                raise InvalidSpec("each agent needs at least 2 images")

    def analytic_field(self) -> AnalyticField:
        return AnalyticField(blobs=tuple(self.blobs), background=np.asarray(self.background))

    def render_config(self) -> RenderConfig:
        return RenderConfig(
            near=self.near, far=self.far, n_samples=self.render_samples,
            background=tuple(self.background),
        )

    def to_dict(self) -> dict:
        return {
            "blobs": [
                {
                    "center": list(map(float, b.center)),
                    "radius": b.radius,
                    "peak": b.peak,
                    "color": list(map(float, b.color)),
                }
                for b in self.blobs
            ],
            "agents": [a.to_dict() for a in self.agents],
            "background": list(self.background),
            "near": self.near,
            "far": self.far,
            "render_samples": self.render_samples,
            "look_at": list(self.look_at),
            "overlap_fraction": self.overlap_fraction,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            blobs=[Blob(**b) for b in d["blobs"]],
            agents=[AgentSpec.from_dict(a) for a in d["agents"]],
            background=tuple(d.get("background", (0.5, 0.5, 0.5))),
            near=float(d.get("near", 4.0)),
            far=float(d.get("far", 90.0)),
            render_samples=int(d.get("render_samples", 96)),
            look_at=tuple(d.get("look_at", (0.0, 0.0, 0.0))),
            overlap_fraction=float(d.get("overlap_fraction", 1.0)),
            seed=int(d.get("seed", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @staticmethod
    def load(path) -> "SceneSpec":
        with open(path) as fh:
            return SceneSpec.from_dict(json.load(fh))


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from eye toward target (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=float)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def agent_world_poses(spec: SceneSpec, index: int) -> list:
    """Ground-truth world camera poses for one agent's trajectory.

    Orbit trajectories sweep azimuth over a window derived from the overlap
    fraction (adjacent agents share that fraction of their arc) while the
    altitude sweeps linearly across its range, so image scale changes along
    the pass. Grid trajectories serpentine over a square at sweeping
    altitude.
    """
    agent = spec.agents[index]
    n_agents = len(spec.agents)
    target = np.asarray(spec.look_at, dtype=float)
    lo, hi = agent.altitude
    ts = np.linspace(0.0, 1.0, agent.n_images)
    altitudes = lo + (hi - lo) * ts
    poses = []
    if agent.trajectory == "orbit":
        span = 360.0 / (n_agents - spec.overlap_fraction * (n_agents - 1))
        start = index * span * (1.0 - spec.overlap_fraction)
        azimuths = np.radians(start + span * ts)
        for az, alt in zip(azimuths, altitudes):
            eye = target + np.array(
                [agent.orbit_radius * math.cos(az), agent.orbit_radius * math.sin(az), alt]
            )
            poses.append(look_at_pose(eye, target))
    elif agent.trajectory == "grid":
        rows = max(2, int(math.sqrt(agent.n_images)))
        cols = int(math.ceil(agent.n_images / rows))
        xs = np.linspace(-agent.grid_extent, agent.grid_extent, cols)
        ys = np.linspace(-agent.grid_extent, agent.grid_extent, rows)
        k = 0
        for r in range(rows):
            row_xs = xs if r % 2 == 0 else xs[::-1]
            for x in row_xs:
                if k >= agent.n_images:
                    break
                eye = target + np.array([x, ys[r], altitudes[k]])
                poses.append(look_at_pose(eye, target))
                k += 1
    else:
        raise InvalidSpec(f"unknown trajectory {agent.trajectory!r}")
    return poses


def generate_dataset(spec: SceneSpec, out_dir) -> list:
    """Render and write every agent directory; returns their paths.

    Deterministic given the spec (images are clean, unstratified renders of
    the analytic scene). Poses are written in each agent's local frame.
    """
    spec.validate()
    model = AnalyticFieldModel(spec.analytic_field())
    render_cfg = spec.render_config()
    agent_dirs = []
    for index, agent in enumerate(spec.agents):
        agent_dir = os.path.join(out_dir, agent.agent_id)
        os.makedirs(os.path.join(agent_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(agent_dir, "_truth"), exist_ok=True)
        camera = agent.camera()
        world_poses = agent_world_poses(spec, index)
        g_inv = agent.frame_offset.inverse()
        entries = []
        for k, world_pose in enumerate(world_poses):
            image = render_image(model, camera.with_pose(world_pose), render_cfg)
            name = f"{k:04d}.png"
            save_png(os.path.join(agent_dir, "images", name), image)
            local = g_inv.compose(world_pose)
            entries.append({"file": f"images/{name}", "pose": local.to_flat()})
        with open(os.path.join(agent_dir, "poses.json"), "w") as fh:
            json.dump(entries, fh, indent=2)
        with open(os.path.join(agent_dir, "intrinsics.json"), "w") as fh:
            json.dump(
                {
                    "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
                    "width": camera.width, "height": camera.height,
                },
                fh,
                indent=2,
            )
        with open(os.path.join(agent_dir, "_truth", "truth.json"), "w") as fh:
            json.dump(
                {"agent_id": agent.agent_id, "frame_offset": agent.frame_offset.to_flat()},
                fh,
                indent=2,
            )
        agent_dirs.append(agent_dir)
    return agent_dirs


def load_agent(agent_dir) -> AgentDataset:
    """Read one agent directory back into memory (never touches _truth/)."""
    with open(os.path.join(agent_dir, "intrinsics.json")) as fh:
        intr = json.load(fh)
    camera = Camera(
        fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
        width=int(intr["width"]), height=int(intr["height"]),
    )
    with open(os.path.join(agent_dir, "poses.json")) as fh:
        entries = json.load(fh)
    images = [load_png(os.path.join(agent_dir, e["file"])) for e in entries]
    poses = [Pose.from_flat(e["pose"]) for e in entries]
    return AgentDataset(
        agent_id=os.path.basename(os.path.normpath(agent_dir)),
        images=images,
        poses=poses,
        camera=camera,
    )


def load_truth(agent_dir) -> Pose:
    """Sealed frame offset; for evaluation only."""
    with open(os.path.join(agent_dir, "_truth", "truth.json")) as fh:
        return Pose.from_flat(json.load(fh)["frame_offset"])


def true_relative_transform(agent_dir_i, agent_dir_j) -> Pose:
    """Ground-truth transform mapping frame i coordinates into frame j."""
    g_i = load_truth(agent_dir_i)
    g_j = load_truth(agent_dir_j)
    return g_j.inverse().compose(g_i)


def perturb_poses(poses: list, rot_deg: float, translation: float, rng) -> list:
    """Random pose noise of fixed magnitude (experiment helper)."""
    out = []
    for p in poses:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        xi = Twist(axis * math.radians(rot_deg), direction * translation)
        out.append(exp_map(xi).compose(p))
    return out


def default_scene_spec(seed: int = 0, n_agents: int = 2) -> SceneSpec:
    """Desk-scale default: blobs in a 40x40x10 box, orbiting agents with an
    altitude sweep, hidden frame offsets between agents."""
    rng = np.random.default_rng(seed)
    blobs = []
    # a few large anchor lobes plus small high-frequency detail
    for _ in range(4):
        blobs.append(
            Blob(
                center=np.append(rng.uniform(-14, 14, 2), rng.uniform(-3, 3)),
                radius=float(rng.uniform(2.5, 4.0)),
                peak=float(rng.uniform(1.0, 2.0)),
                color=rng.uniform(0.2, 1.0, 3),
            )
        )
    for _ in range(8):
        blobs.append(
            Blob(
                center=np.append(rng.uniform(-16, 16, 2), rng.uniform(-4, 4)),
                radius=float(rng.uniform(0.8, 1.4)),
                peak=float(rng.uniform(2.0, 4.0)),
                color=rng.uniform(0.0, 1.0, 3),
            )
        )
    agents = []
    for a in range(n_agents):
        if a == 0:
            offset = Pose.identity()
        else:
            yaw = math.radians(15.0 * a)
            offset = Pose(
                np.array(
                    [
                        [math.cos(yaw), -math.sin(yaw), 0.0],
                        [math.sin(yaw), math.cos(yaw), 0.0],
                        [0.0, 0.0, 1.0],
                    ]
                ),
                np.array([10.0 * a, -4.0 * a, 2.0 * a]),
            )
        agents.append(
            AgentSpec(
                agent_id=f"agent_{a}",
                n_images=60,
                width=128,
                height=128,
                focal=0.85 * 128,
                orbit_radius=24.0,
                altitude=(14.0, 26.0),
                frame_offset=offset,
            )
        )
    return SceneSpec(blobs=blobs, agents=agents, overlap_fraction=0.75, seed=seed)
