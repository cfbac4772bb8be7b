"""Pinhole camera model and rigid transforms.

Conventions: right-handed camera frame looking along +z, x to the right,
y down; image origin at the top-left corner. Pixel ``(i, j)`` (column,
row) has its center at ``(i + 0.5, j + 0.5)``. Poses are world-to-camera:
``p_cam = R @ p_world + t``.

The scene generator uses a z-up world (Blender style). ``look_at`` builds
a camera rotation for that world; nothing else in this module depends on
which axis is "up".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, InvalidCamera, InvalidDepth

DEFAULT_Z_NEAR = 0.1
DEFAULT_Z_FAR = 10.0
_ORTHO_TOL = 1e-6


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation acting as ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def check_rotation(rotation: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidCamera("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise InvalidCamera("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidCamera("rotation determinant is not +1")


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)
    z_near: float = DEFAULT_Z_NEAR
    z_far: float = DEFAULT_Z_FAR

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCamera("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidCamera("resolution must be at least 1x1")
        if not (0 < self.z_near < self.z_far):
            raise InvalidCamera("need 0 < z_near < z_far")
        check_rotation(self.pose.rotation)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy", "z_near", "z_far"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.pose.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      pose, self.z_near, self.z_far)

    def scaled(self, factor: float) -> "Camera":
        """Same camera at ``factor`` times the resolution."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      max(1, round(self.width * factor)), max(1, round(self.height * factor)),
                      self.pose, self.z_near, self.z_far)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "z_near": self.z_near, "z_far": self.z_far,
            "rotation": [float(x) for x in self.pose.rotation.ravel()],
            "translation": [float(x) for x in self.pose.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            pose = RigidTransform(np.reshape(d["rotation"], (3, 3)), d["translation"])
            return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], pose,
                       d.get("z_near", DEFAULT_Z_NEAR), d.get("z_far", DEFAULT_Z_FAR))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidCamera(f"malformed camera description: {exc}") from exc


def project(point, cam: Camera):
    """Project camera-space point(s) to ``(u, v, z)``.

    Accepts a single 3-vector or an ``(..., 3)`` array. Raises
    ``BehindCamera`` if any depth is not positive.
    """
    p = np.asarray(point, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point has non-positive depth")
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if p.ndim == 1:
        return float(u), float(v), float(z)
    return u, v, z


def unproject_pixel(u, v, z, cam: Camera) -> np.ndarray:
    """Inverse of :func:`project`; ``u, v`` are continuous pixel coordinates."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidDepth("depth must be positive")
    x = (np.asarray(u, dtype=np.float64) - cam.cx) * z / cam.fx
    y = (np.asarray(v, dtype=np.float64) - cam.cy) * z / cam.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def world_to_camera(points, pose: RigidTransform) -> np.ndarray:
    return pose.apply(points)


def camera_to_world(points, pose: RigidTransform) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation


def pixel_grid(width: int, height: int):
    """Pixel-center coordinates ``(u, v)`` as two ``(H, W)`` arrays."""
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    return np.meshgrid(u, v)


def look_at(eye, target, up=(0.0, 0.0, 1.0), roll: float = 0.0) -> RigidTransform:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    ``roll`` (radians) spins the camera about its viewing axis.
    Raises ``InvalidCamera`` when the viewing direction is parallel to ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm == 0:
        raise InvalidCamera("eye and target coincide")
    fwd = fwd / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise InvalidCamera("viewing direction parallel to up vector")
    right /= rn
    down = np.cross(fwd, right)
    c, s = math.cos(roll), math.sin(roll)
    right, down = c * right + s * down, -s * right + c * down
    rot = np.stack([right, down, fwd])
    return RigidTransform(rot, -rot @ eye)


def pitch_roll(pose: RigidTransform, up=(0.0, 0.0, 1.0)):
    """Pitch and roll (radians) of a camera pose relative to ``up``.

    Pitch is the elevation of the viewing axis (negative looking down); roll
    equals the ``roll`` argument of :func:`look_at`.
    """
    up = np.asarray(up, dtype=np.float64)
    right, down, fwd = pose.rotation
    pitch = math.asin(float(np.clip(fwd @ up, -1.0, 1.0)))
    roll = math.atan2(-float(right @ up), -float(down @ up))
    return pitch, roll


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)
