"""Planar pose algebra and 3D rigid transforms shared by the whole stack.

Angles live in radians. Yaw is always stored wrapped to the half-open
interval (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Orthonormality / unit-determinant tolerance for rotation matrices.
ROTATION_TOL = 1e-9

# |pitch| closer than this to pi/2 counts as gimbal lock for the planar
# projection.
GIMBAL_TOL = 1e-6


class DegenerateOrientationError(ValueError):
    """Raised when a rotation has no usable planar (yaw) component."""


def wrap_angle(psi: float) -> float:
    """Wrap an angle into (-pi, pi].

    The interval is half open at the negative end, so -pi maps to +pi and
    the function is bit-exact idempotent on already wrapped values.
    """
    psi = float(psi)
    if not math.isfinite(psi):
        raise ValueError(f"angle must be finite, got {psi!r}")
    m = math.fmod(math.pi - psi, TWO_PI)
    if m < 0.0:
        m += TWO_PI
    return math.pi - m


def wrap_angle_array(psi: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle` (same floored-mod formulation)."""
    psi = np.asarray(psi, dtype=float)
    if not np.all(np.isfinite(psi)):
        raise ValueError("angles must be finite")
    return np.pi - np.mod(np.pi - psi, TWO_PI)


@dataclass(frozen=True, slots=True)
class Pose2:
    """Planar pose (x, y, yaw) with yaw wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(0.0, 0.0, 0.0)

    def compose(self, other: "Pose2") -> "Pose2":
        """Chain ``other`` onto this pose (this frame applied first)."""
        c, s = math.cos(self.psi), math.sin(self.psi)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            wrap_angle(self.psi + other.psi),
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.psi), math.sin(self.psi)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.psi)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])


def rotation_z(psi: float) -> np.ndarray:
    """3x3 rotation about +z by ``psi``."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def skew(vec: np.ndarray) -> np.ndarray:
    x, y, z = vec
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Transform3:
    """Rigid 3D transform: ``p_out = rotation @ p_in + translation``.

    The rotation must be orthonormal with unit determinant (checked to
    1e-9 on construction). Stored arrays are read-only copies.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=float)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {rot.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform entries must be finite")
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err > ROTATION_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant must be +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Transform3":
        return Transform3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_pose2(pose: Pose2, z: float = 0.0) -> "Transform3":
        """Embed a planar pose as a yaw-only 3D transform."""
        return Transform3(rotation_z(pose.psi), np.array([pose.x, pose.y, z]))

    def compose(self, other: "Transform3") -> "Transform3":
        """``self`` after ``other``: applies ``other`` first."""
        return Transform3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Transform3":
        rt = self.rotation.T
        return Transform3(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Total rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def transform_to_planar(transform: Transform3) -> tuple[Pose2, float]:
    """Project a 3D transform onto the plane.

    Returns the planar pose (x, y, yaw) and a residual magnitude
    |t_z| + |roll| + |pitch| that measures how non-planar the input was.
    Euler angles follow the z-y-x convention, so yaw is read off first.

    Raises
    ------
    DegenerateOrientationError
        If |pitch| is within 1e-6 of pi/2, where yaw is undefined.
    """
    r = transform.rotation
    sy = math.hypot(r[0, 0], r[1, 0])
    pitch = math.atan2(-r[2, 0], sy)
    if abs(abs(pitch) - math.pi / 2.0) < GIMBAL_TOL:
        raise DegenerateOrientationError(
            f"pitch {pitch:.9f} rad is too close to +/-pi/2 for a planar projection"
        )
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    tx, ty, tz = transform.translation
    residual = abs(tz) + abs(roll) + abs(pitch)
    return Pose2(tx, ty, yaw), residual
