"""Rigid-body math: so(3) exp/log, object-to-camera transforms, pinhole projection.

Conventions: right-handed frames, the camera looks down +z with +y pointing
down the image, pixel (row i, col j) has its center at (u, v) = (j, i).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.1
_SMALL_ANGLE = 1e-6


class InvalidArgument(ValueError):
    """Raised for inputs outside an operation's domain."""


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula with a series expansion near zero."""
    w = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(w)):
        raise InvalidArgument(f"non-finite rotation vector {w}")
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R, tol: float = 1e-6) -> np.ndarray:
    """Inverse of :func:`so3_exp`; result has norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidArgument("expected a finite 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgument("matrix is not a rotation")
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(vee)
    theta = np.arctan2(sin_t, cos_t)
    if theta < 1e-4:
        # theta/sin(theta) ~ 1 + theta^2/6
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    if np.pi - theta > 1e-4:
        return theta / (2.0 * np.sin(theta)) * vee
    # Near pi: axis from the symmetric part, R + I = 2 a a^T (approximately).
    S = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ vee < 0:
        axis = -axis
    w = theta * axis
    # Exactly at pi both signs are valid; pick the canonical one.
    if np.pi - theta < 1e-12:
        w = canonical_axis_angle(w)
    return w


def canonical_axis_angle(w) -> np.ndarray:
    """Map ||w|| > pi back into the principal ball; break the pi tie by sign."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return w.copy()
    axis = w / theta
    theta = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    if theta < 0:
        axis, theta = -axis, -theta
    if abs(theta - np.pi) < 1e-12:
        nz = axis[np.nonzero(np.abs(axis) > 1e-12)[0][0]]
        if nz < 0:
            axis = -axis
    return axis * theta


def so3_right_jacobian(omega) -> np.ndarray:
    """J_r with exp(w + d) ~= exp(w) exp(J_r(w) d)."""
    w = np.asarray(omega, dtype=float)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = skew(w)
    if theta < 1e-4:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * K + b * (K @ K)


def yaw_of(omega) -> float:
    """Heading as the z-component of the canonicalized rotation vector."""
    return float(canonical_axis_angle(omega)[2])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Pose:
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return so3_exp(self.omega)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self) -> np.ndarray:
        return np.linalg.inv(self.pose.matrix())

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "t": self.pose.t.tolist(), "omega": self.pose.omega.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            pose=Pose(d.get("t", (0, 0, 0)), d.get("omega", (0, 0, 0))),
        )


# Camera axes (right, down, forward) expressed in a z-up world where +x is the
# driving direction away from the camera: R_c columns are the camera axes.
ROAD_CAMERA_R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def road_camera(width=320, height=240, focal=300.0, mount_height=1.5, pitch=0.0) -> Camera:
    """Forward-looking camera at ``mount_height`` above the world origin."""
    R = ROAD_CAMERA_R
    if pitch:
        # positive pitch tilts the optical axis toward the ground
        R = R @ so3_exp([pitch, 0.0, 0.0])
    return Camera(
        fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
        pose=Pose([0.0, 0.0, mount_height], so3_log(R)),
    )


@dataclass(frozen=True)
class ObjectNode:
    pose: Pose
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidArgument(f"scale must be positive, got {self.scale}")


def object_to_camera(obj: ObjectNode, cam: Camera) -> np.ndarray:
    """4x4 map from canonical object coordinates to camera coordinates.

    A canonical vertex v lands at T_c^-1 T_p (s v): the object is scaled to
    metric size, placed in the world, then expressed in the camera frame.
    """
    if not obj.scale > 0:
        raise InvalidArgument("scale must be positive")
    S = np.diag([obj.scale, obj.scale, obj.scale, 1.0])
    return cam.world_to_camera() @ obj.pose.matrix() @ S


def invert_transform(T) -> np.ndarray:
    """Inverse of an affine 4x4 with an invertible 3x3 block."""
    A = T[:3, :3]
    Ainv = np.linalg.inv(A)
    out = np.eye(4)
    out[:3, :3] = Ainv
    out[:3, 3] = -Ainv @ T[:3, 3]
    return out


def project_points(cam: Camera, X):
    """Project camera-frame points.

    Returns ``(uv, depth, valid)`` where ``valid`` is False for points at or
    behind the near plane (their uv are still computed where z != 0).
    """
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    valid = z > NEAR_PLANE
    zs = np.where(np.abs(z) > 1e-300, z, 1e-300)
    u = cam.fx * X[..., 0] / zs + cam.cx
    v = cam.fy * X[..., 1] / zs + cam.cy
    return np.stack([u, v], axis=-1), z, valid


def project_point(cam: Camera, X):
    uv, z, valid = project_points(cam, np.asarray(X, dtype=float).reshape(1, 3))
    return uv[0], float(z[0]), bool(valid[0])


def in_frustum(cam: Camera, center, margin: float = 0.0, min_depth: float = 1.0) -> bool:
    """World point at least ``min_depth`` in front of the camera and projecting inside the image."""
    Xc = cam.pose.R.T @ (np.asarray(center, float) - cam.pose.t)
    if Xc[2] <= min_depth:
        return False
    u = cam.fx * Xc[0] / Xc[2] + cam.cx
    v = cam.fy * Xc[1] / Xc[2] + cam.cy
    return -margin <= u < cam.width + margin and -margin <= v < cam.height + margin
