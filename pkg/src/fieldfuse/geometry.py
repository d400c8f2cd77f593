"""Rigid-body math on SE(3)/se(3) and pose-error metrics.

Conventions used throughout the package:

- ``Pose`` is a camera-to-world (or frame-to-frame) rigid transform with a
  3x3 rotation matrix and a 3-vector translation, acting as
  ``x_out = R @ x_in + t``.
- ``Twist`` is a tangent-space element with the rotational part first:
  the 6-vector layout is ``(wx, wy, wz, vx, vy, vz)``.
- Angles inside twists are radians; reported pose errors are degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleAtCutoff

# Below this rotation angle the exp/log maps switch to Taylor expansions.
SMALL_ANGLE = 1e-8
# log_map refuses rotations within this margin of the pi singularity.
PI_CUTOFF = 1e-6


def _skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3); immutable value object.

    The rotation is orthonormal with determinant +1 (within 1e-9 after
    ``renormalized``); the translation is in scene units.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float)
        tra = np.array(self.translation, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self*other)(x) = self(other(x))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors of shape (..., 3), ignoring translation."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 homogeneous matrix, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("last row of homogeneous matrix must be (0,0,0,1)")
        return Pose(m[:3, :3], m[:3, 3])

    def to_flat(self) -> list:
        """Row-major 16-element list for JSON serialization."""
        return [float(x) for x in self.as_matrix().reshape(-1)]

    @staticmethod
    def from_flat(values) -> "Pose":
        arr = np.asarray(values, dtype=float)
        if arr.size != 16:
            raise ValueError(f"expected 16 values, got {arr.size}")
        return Pose.from_matrix(arr.reshape(4, 4))

    def renormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) via Gram-Schmidt.

        Applied after every gradient update that touches a pose so numeric
        drift never accumulates past 1e-9.
        """
        r = self.rotation
        c0 = r[:, 0] / np.linalg.norm(r[:, 0])
        c1 = r[:, 1] - np.dot(c0, r[:, 1]) * c0
        c1 = c1 / np.linalg.norm(c1)
        c2 = np.cross(c0, c1)
        return Pose(np.stack([c0, c1, c2], axis=1), self.translation)


@dataclass(frozen=True)
class Twist:
    """se(3) tangent element: rotational part (radians) and translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3)
        tra = np.array(self.translation, dtype=float).reshape(3)
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    def as_vector(self) -> np.ndarray:
        """6-vector (wx, wy, wz, vx, vy, vz)."""
        return np.concatenate([self.rotation, self.translation])

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass(frozen=True)
class PoseError:
    """Rotation error in degrees and translation error in scene units."""

    rotation_deg: float
    translation: float


def _so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor branch below SMALL_ANGLE."""
    theta = float(np.linalg.norm(w))
    k = _skew(w)
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = _skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = _skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    b = (1.0 - cot) / (theta * theta)
    return np.eye(3) - 0.5 * k + b * (k @ k)


def exp_map(xi: Twist) -> Pose:
    """Exponential map se(3) -> SE(3).

    Rotation via the Rodrigues formula, translation via the SE(3) left
    Jacobian; total function with a Taylor branch near zero angle.
    """
    rot = _so3_exp(xi.rotation)
    tra = _so3_left_jacobian(xi.rotation) @ xi.translation
    return Pose(rot, tra)


def log_map(pose: Pose) -> Twist:
    """Logarithm SE(3) -> se(3); requires rotation angle < pi.

    Raises AngleAtCutoff when the angle is within PI_CUTOFF of pi, where
    the axis extraction loses precision.
    """
    r = pose.rotation
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(r) - 1.0)))
    theta = math.acos(cos_theta)
    if math.pi - theta < PI_CUTOFF:
        raise AngleAtCutoff(f"rotation angle {theta:.9f} within {PI_CUTOFF} of pi")
    if theta < SMALL_ANGLE:
        w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) * 0.5
    else:
        scale = theta / (2.0 * math.sin(theta))
        w = scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    v = _so3_left_jacobian_inv(w) @ pose.translation
    return Twist(w, v)


def pose_error(estimate: Pose, truth: Pose) -> PoseError:
    """Geodesic rotation error (degrees) and Euclidean translation error."""
    r_rel = estimate.rotation @ truth.rotation.T
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(r_rel) - 1.0)))
    rot_deg = math.degrees(math.acos(cos_theta))
    trans = float(np.linalg.norm(estimate.translation - truth.translation))
    return PoseError(rotation_deg=rot_deg, translation=trans)


def consistency_residual(t_ji: Pose, t_ij: Pose) -> float:
    """Frobenius norm of (T_ji @ T_ij - I) over 4x4 homogeneous matrices.

    Zero exactly when the two directed estimates are mutual inverses; used
    to rank candidate relative transforms. Mixes rotation (unitless) and
    translation (scene units) terms, which is acceptable for ranking.
    """
    m = t_ji.as_matrix() @ t_ij.as_matrix() - np.eye(4)
    return float(np.linalg.norm(m))


def left_perturb(xi: Twist, pose: Pose) -> Pose:
    """exp(xi) * pose, renormalized; the single pose-update primitive.

    Pose optimization works in the tangent space at the identity: each step
    solves for a small twist, left-multiplies it onto the current pose and
    re-centers, so gradients are always taken at xi = 0.
    """
    return exp_map(xi).compose(pose).renormalized()


def random_twist(rng: np.random.Generator, max_angle: float, max_translation: float) -> Twist:
    """Uniform random direction twist with angle/translation magnitudes
    drawn uniformly in [0, max]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * rng.uniform(0.0, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    v = direction * rng.uniform(0.0, max_translation)
    return Twist(w, v)
