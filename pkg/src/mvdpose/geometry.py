"""Pinhole camera model, rigid transforms, and depth lifting.

Conventions used across the package:

* distances are millimetres;
* pixel ``(u, v)`` is (column, row) and pixel centres sit on integers, so
  the pixel containing ``u`` is ``floor(u + 0.5)``;
* camera frames are x-right, y-down, z-forward;
* ``RigidTransform.apply`` computes ``scale * R @ p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import BehindCameraError, BoundsError, NoMeasurementError, ParameterError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("raster size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Pixels (N, 2) to normalized image coordinates (N, 2)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        return np.stack([(pixels[..., 0] - self.cx) / self.fx, (pixels[..., 1] - self.cy) / self.fy], axis=-1)

    def contains(self, u, v):
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Similarity ``p -> scale * R p + t``; ``scale == 1`` means metric."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ParameterError("transform contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ParameterError("rotation is not a proper orthonormal matrix")
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotation(cls, R, t=(0.0, 0.0, 0.0), scale=1.0, *, project=True) -> "RigidTransform":
        """Build a transform, snapping a nearly-orthonormal ``R`` onto SO(3)."""
        R = np.asarray(R, dtype=np.float64)
        if project:
            U, _, Vt = np.linalg.svd(R)
            D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
            R = U @ D @ Vt
        return cls(R, t, scale)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        t = self.scale * (self.rotation @ other.translation) + self.translation
        return RigidTransform(R, t, self.scale * other.scale)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    @property
    def center(self) -> np.ndarray:
        """Origin of the target frame expressed in the source frame (camera centre for extrinsics)."""
        return -(self.rotation.T @ self.translation) / self.scale

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"], d.get("scale", 1.0))

    def __repr__(self):
        return f"RigidTransform(angle={np.degrees(rotation_angle(self.rotation)):.4f}deg, t={self.translation.round(3)}, scale={self.scale:g})"


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians (argument clamped to [-1, 1])."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera extrinsics for a camera at ``eye`` looking at ``target`` (z-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ eye)


@dataclass(eq=False)
class DepthImage:
    """Depth raster in millimetres, 0 meaning no measurement."""

    raster: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.raster = np.asarray(self.raster, dtype=np.float64)
        expected = (self.intrinsics.height, self.intrinsics.width)
        if self.raster.shape != expected:
            raise ParameterError(f"raster shape {self.raster.shape} does not match intrinsics {expected}")
        if not np.all(np.isfinite(self.raster)) or np.any(self.raster < 0):
            raise ParameterError("depth values must be finite and non-negative")


@dataclass(eq=False)
class Skeleton2D:
    joints: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.valid.shape[0] != self.joints.shape[0]:
            raise ParameterError("joints and valid mask differ in length")

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]


@dataclass(eq=False)
class Skeleton3D:
    joints: np.ndarray
    valid: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.valid.shape[0] != self.joints.shape[0]:
            raise ParameterError("joints and valid mask differ in length")
        if not np.all(np.isfinite(self.joints[self.valid])):
            raise ParameterError("valid joints must be finite")

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]

    def transformed(self, T: RigidTransform, frame: str) -> "Skeleton3D":
        joints = np.where(self.valid[:, None], T.apply(np.nan_to_num(self.joints)), self.joints)
        return Skeleton3D(joints, self.valid.copy(), frame)

    @classmethod
    def empty(cls, num_joints: int, frame: str = "world") -> "Skeleton3D":
        return cls(np.full((num_joints, 3), np.nan), np.zeros(num_joints, bool), frame)


def backproject_pixel(u: float, v: float, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    """``depth * K^-1 [u, v, 1]``."""
    if not depth > 0:
        raise NoMeasurementError(f"no depth measurement at ({u}, {v})")
    if not intr.contains(u, v):
        raise BoundsError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} raster")
    return np.array([depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, float(depth)])


def project_point(p, intr: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise BehindCameraError(f"point {p} is not in front of the camera")
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection; rows with z <= 0 come back as NaN."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p[..., 0] / z + intr.cx
        v = intr.fy * p[..., 1] / z + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[z <= 0] = np.nan
    return uv


def backproject_depth(depth: DepthImage, stride: int = 1) -> np.ndarray:
    """All measured pixels of a depth raster as an (N, 3) camera-frame cloud."""
    intr = depth.intrinsics
    raster = depth.raster[::stride, ::stride]
    vs, us = np.nonzero(raster > 0)
    z = raster[vs, us]
    us = us * stride
    vs = vs * stride
    return np.stack([z * (us - intr.cx) / intr.fx, z * (vs - intr.cy) / intr.fy, z], axis=1)


def register_depth_to_rgb(depth: DepthImage, rgb_intr: CameraIntrinsics, depth_to_rgb: RigidTransform) -> DepthImage:
    """Re-render a depth raster into the RGB camera's pixel grid.

    Each measured depth pixel is lifted, moved into the RGB frame and
    splatted at its nearest RGB pixel; when several land on one pixel the
    nearest surface wins.
    """
    if depth_to_rgb.scale != 1.0:
        raise ParameterError("depth-to-RGB transform must be metric (scale 1)")
    pts = depth_to_rgb.apply(backproject_depth(depth))
    z = pts[:, 2]
    front = z > 0
    pts, z = pts[front], z[front]
    u = np.floor(rgb_intr.fx * pts[:, 0] / z + rgb_intr.cx + 0.5).astype(np.int64)
    v = np.floor(rgb_intr.fy * pts[:, 1] / z + rgb_intr.cy + 0.5).astype(np.int64)
    raster = _kernels.splat_min_depth(u, v, np.ascontiguousarray(z), rgb_intr.height, rgb_intr.width)
    return DepthImage(raster, rgb_intr)


def sample_depth(raster: np.ndarray, u: float, v: float, window: int = 2) -> float:
    """Depth at the pixel containing (u, v); median of nonzero neighbours if that pixel is a hole.

    Returns 0.0 when nothing in the window was measured.
    """
    h, w = raster.shape
    c = int(np.floor(u + 0.5))
    r = int(np.floor(v + 0.5))
    if not (0 <= r < h and 0 <= c < w):
        return 0.0
    z = raster[r, c]
    if z > 0:
        return float(z)
    patch = raster[max(r - window, 0) : r + window + 1, max(c - window, 0) : c + window + 1]
    vals = patch[patch > 0]
    return float(np.median(vals)) if vals.size else 0.0


def lift_skeleton(sk: Skeleton2D, registered_depth: DepthImage, window: int = 2, frame: str = "camera") -> Skeleton3D:
    """Lift 2D keypoints to 3D in the RGB camera frame using a registered depth raster."""
    intr = registered_depth.intrinsics
    joints = np.full((sk.num_joints, 3), np.nan)
    valid = np.zeros(sk.num_joints, dtype=bool)
    for d in np.flatnonzero(sk.valid):
        u, v = sk.joints[d]
        if not intr.contains(u, v):
            continue
        z = sample_depth(registered_depth.raster, u, v, window)
        if z > 0:
            joints[d] = backproject_pixel(u, v, z, intr)
            valid[d] = True
    return Skeleton3D(joints, valid, frame)
