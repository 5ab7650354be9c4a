"""Geometric value types and pinhole projection.

Conventions
-----------
World frame: right-handed, Z up, the deck is the plane ``Z = z0``.
Body frame: x forward (nose), y left (port wing), z up.
Camera frame: x right, y down, z forward along the optical axis.
Image frame: origin at the top-left pixel corner, u to the right, v down.

A :class:`CameraModel` stores the world-to-camera transform
``X_cam = R @ X_world + t``. A :class:`Pose` stores the body-to-world
transform ``X_world = R @ X_body + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MIN_DEPTH = 1e-9


def as_vector(value, size: int, name: str = "value") -> np.ndarray:
    """Return a read-only float vector of length ``size``, rejecting NaN/Inf."""
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} components, got shape {np.shape(value)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite components: {arr}")
    arr.flags.writeable = False
    return arr


def as_points(value, name: str = "points") -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def wrap_deg(angle):
    """Reduce degrees to ``[0, 360)``."""
    r = np.mod(angle, 360.0)
    # fmod of a tiny negative number rounds up to exactly 360
    r = np.where(r >= 360.0, 0.0, r)
    return float(r) if np.ndim(r) == 0 else r


def wrap_deg_signed(angle):
    """Reduce degrees to ``(-180, 180]``."""
    r = 180.0 - np.mod(180.0 - np.asarray(angle, dtype=float), 360.0)
    r = np.where(r <= -180.0, r + 360.0, r)
    return float(r) if np.ndim(r) == 0 else r


def angular_difference_deg(a: float, b: float) -> float:
    """Smallest absolute difference between two headings, in ``[0, 180]``."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("angles must be finite")
    d = abs(math.fmod(a - b, 360.0))
    return 360.0 - d if d > 180.0 else d


@dataclass(frozen=True, eq=False)
class Rotation:
    """Proper rotation stored as a 3x3 orthonormal matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("rotation must be a finite 3x3 matrix")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-6) or np.linalg.det(m) < 0:
            raise ValueError("matrix is not a proper rotation")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_ypr(cls, yaw: float, pitch: float = 0.0, roll: float = 0.0) -> "Rotation":
        """Intrinsic Z-Y-X rotation, angles in radians."""
        cy, sy = math.cos(yaw), math.sin(yaw)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cr, sr = math.cos(roll), math.sin(roll)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        return cls(rz @ ry @ rx)

    @classmethod
    def from_rotvec(cls, w) -> "Rotation":
        return cls(exp_so3(w))

    def ypr(self) -> tuple[float, float, float]:
        """Return (yaw, pitch, roll) in radians."""
        m = self.matrix
        pitch = math.asin(max(-1.0, min(1.0, -m[2, 0])))
        yaw = math.atan2(m[1, 0], m[0, 0])
        roll = math.atan2(m[2, 1], m[2, 2])
        return yaw, pitch, roll

    @property
    def yaw_deg(self) -> float:
        m = self.matrix
        return wrap_deg(math.degrees(math.atan2(m[1, 0], m[0, 0])))

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)


def exp_so3(w) -> np.ndarray:
    """Rodrigues' formula for a rotation vector (radians)."""
    wx, wy, wz = (float(v) for v in w)
    theta = math.sqrt(wx * wx + wy * wy + wz * wz)
    k = np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])
    if theta < 1e-8:
        # second-order Taylor keeps the result orthonormal to ~1e-16
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + (math.sin(theta) / theta) * k + ((1.0 - math.cos(theta)) / theta**2) * (k @ k)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid body-to-world transform."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", as_vector(self.translation, 3, "translation"))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def on_deck(cls, x: float, y: float, yaw_deg: float, z: float = 0.0) -> "Pose":
        return cls(Rotation.from_ypr(math.radians(yaw_deg)), np.array([x, y, z]))

    def apply(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.inverse()
        return Pose(rt, -rt.apply(self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.apply(other.translation))

    @property
    def yaw_deg(self) -> float:
        return self.rotation.yaw_deg


class Behind:
    """Sentinel returned by :func:`project` for points at or behind the camera."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BEHIND"

    def __bool__(self):
        return False


BEHIND = Behind()


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Ideal pinhole camera with intrinsics and world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "width", "height"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation(self.rotation))
        object.__setattr__(self, "translation", as_vector(self.translation, 3, "translation"))

    @classmethod
    def looking(cls, center, yaw_deg: float, pitch_down_deg: float, fx, fy, cx, cy, width, height):
        """Camera at ``center`` facing heading ``yaw_deg``, tilted down by ``pitch_down_deg``."""
        psi, phi = math.radians(yaw_deg), math.radians(pitch_down_deg)
        forward = np.array([math.cos(phi) * math.cos(psi), math.cos(phi) * math.sin(psi), -math.sin(phi)])
        right = np.array([math.sin(psi), -math.cos(psi), 0.0])
        down = np.cross(forward, right)
        r = np.vstack([right, down, forward])
        center = as_vector(center, 3, "center")
        return cls(fx, fy, cx, cy, width, height, Rotation(r), -r @ center)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.translation[:, None]])

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def project_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection. Returns pixels (n, 2) and camera depths (n,).

        Pixels for points with depth <= ``MIN_DEPTH`` are NaN.
        """
        pc = self.to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        ok = z > MIN_DEPTH
        safe = np.where(ok, z, 1.0)
        uv = np.column_stack([self.fx * pc[:, 0] / safe + self.cx, self.fy * pc[:, 1] / safe + self.cy])
        uv[~ok] = np.nan
        return uv, z

    def in_image(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        with np.errstate(invalid="ignore"):
            return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)

    def hfov_deg(self) -> float:
        return math.degrees(math.atan(self.cx / self.fx) + math.atan((self.width - self.cx) / self.fx))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        missing = {"fx", "fy", "cx", "cy", "width", "height", "R", "t"} - set(d)
        if missing:
            raise ValueError(f"camera is missing fields: {sorted(missing)}")
        r = np.asarray(d["R"], dtype=float).reshape(3, 3)
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], Rotation(r), d["t"])


def project(camera: CameraModel, point):
    """Project one world point to pixels, or return :data:`BEHIND`."""
    p = as_vector(point, 3, "point")
    uv, z = camera.project_points(p)
    if z[0] <= MIN_DEPTH:
        return BEHIND
    return uv[0]


def backproject(camera: CameraModel, pixel) -> Ray:
    """World-frame ray through ``pixel``, starting at the camera center."""
    u, v = as_vector(pixel, 2, "pixel")
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d = camera.R.T @ d_cam
    return Ray(camera.center, d / np.linalg.norm(d))
