"""Depth-regularized pairwise triangulation, candidate fusion and bone priors.

Every camera pair that sees a joint produces a candidate: the DLT point,
pulled towards the depth-lifted anchor when the anchor lies within a
distance threshold of it. Candidates of one joint are fused by a gated
mean, and joints breaking left/right bone-length symmetry are dropped.

DLT rows are scaled so each is a unit-normal plane through the camera
centre; residuals are then point-to-plane distances in mm and the
regularization weight ``lam`` is unit-free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import CheiralityError, IllConditionedError, NoMeasurementError, ParameterError
from .geometry import CameraIntrinsics, RigidTransform, Skeleton3D

MIN_ANGLE_DEG = 0.5
MODES = ("gated", "naive", "forced")

JOINT_NAMES = (
    "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)  # fmt: skip


@dataclass(frozen=True)
class Camera:
    """Intrinsics plus world-to-camera pose."""

    intrinsics: CameraIntrinsics
    pose: RigidTransform

    @cached_property
    def projection(self) -> np.ndarray:
        """3x4 matrix acting on normalized image coordinates."""
        return np.column_stack([self.pose.scale * self.pose.rotation, self.pose.translation])


@dataclass(frozen=True)
class BonePrior:
    """Skeleton tree with left/right symmetric edge pairs.

    ``edges`` are ``(parent, child)`` pairs; ``symmetric`` holds pairs of
    indices into ``edges``; ``reference`` optionally gives expected lengths
    (mm) for edges without a symmetric counterpart.
    """

    edges: tuple[tuple[int, int], ...]
    symmetric: tuple[tuple[int, int], ...]
    tolerance: float = 0.5
    reference: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        sym = tuple((int(a), int(b)) for a, b in self.symmetric)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "symmetric", sym)
        J = self.num_joints
        children = [b for _, b in edges]
        if sorted(children) != list(range(1, J)):
            raise ParameterError("bone edges must form a tree over the joints")
        seen = {0}
        pending = list(edges)
        while pending:
            nxt = [e for e in pending if e[0] in seen]
            if not nxt:
                raise ParameterError("bone edges must form a tree rooted at joint 0")
            for e in nxt:
                seen.add(e[1])
                pending.remove(e)
        for a, b in sym:
            if not (0 <= a < len(edges) and 0 <= b < len(edges)):
                raise ParameterError(f"symmetric pair ({a}, {b}) references a missing edge")
        if not self.tolerance > 0:
            raise ParameterError("tolerance must be positive")

    @property
    def num_joints(self) -> int:
        return len(self.edges) + 1

    def to_dict(self) -> dict:
        return {"edges": [list(e) for e in self.edges], "symmetric": [list(s) for s in self.symmetric], "tolerance": self.tolerance}

    @classmethod
    def from_dict(cls, d: dict) -> "BonePrior":
        ref = {int(k): float(v) for k, v in d.get("reference", {}).items()}
        return cls(tuple(map(tuple, d["edges"])), tuple(map(tuple, d.get("symmetric", []))), float(d.get("tolerance", 0.5)), ref)

    @classmethod
    def load(cls, path) -> "BonePrior":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_prior(tolerance: float = 0.5) -> BonePrior:
    """The 13-joint body tree (neck root, arms, hips, legs)."""
    edges = (
        (0, 1), (0, 2),    # neck-shoulders
        (1, 3), (2, 4),    # upper arms
        (3, 5), (4, 6),    # forearms
        (0, 7), (0, 8),    # torso sides
        (7, 9), (8, 10),   # thighs
        (9, 11), (10, 12), # shins
    )  # fmt: skip
    symmetric = tuple((2 * i, 2 * i + 1) for i in range(6))
    return BonePrior(edges, symmetric, tolerance)


@dataclass
class JointCandidate:
    identity: int
    joint: int
    pair: tuple[int, int]
    position: np.ndarray
    depth_anchor: np.ndarray | None = None
    selected: bool = False


def _normalized(x, cam: Camera) -> tuple[float, float]:
    # scalar twin of CameraIntrinsics.normalize; this runs once per joint and pair
    k = cam.intrinsics
    return (float(x[0]) - k.cx) / k.fx, (float(x[1]) - k.cy) / k.fy


def _normalized_rows(x, cam: Camera) -> np.ndarray:
    a, b = _normalized(x, cam)
    P = cam.projection
    rows = np.empty((2, 4))
    rows[0] = a * P[2] - P[0]
    rows[1] = b * P[2] - P[1]
    return rows / np.sqrt((rows[:, :3] ** 2).sum(axis=1, keepdims=True))


def _ray(x, cam: Camera) -> np.ndarray:
    a, b = _normalized(x, cam)
    d = cam.pose.rotation.T @ np.array([a, b, 1.0])
    return d / math.sqrt(float(d @ d))


def triangulation_angle(x_i, x_j, cam_i: Camera, cam_j: Camera) -> float:
    """Angle in degrees between the two viewing lines (0 for parallel rays)."""
    c = abs(float(_ray(x_i, cam_i) @ _ray(x_j, cam_j)))
    return math.degrees(math.acos(min(1.0, c)))


def dlt_system(x_i, x_j, cam_i: Camera, cam_j: Camera) -> np.ndarray:
    """The 4x4 row-normalized DLT matrix."""
    return np.vstack([_normalized_rows(x_i, cam_i), _normalized_rows(x_j, cam_j)])


def _check_front(P, cam_i: Camera, cam_j: Camera):
    for cam in (cam_i, cam_j):
        if not cam.pose.apply(P)[2] > 0:
            raise CheiralityError(f"triangulated point {P.round(3)} lies behind a camera")


def dlt_triangulate(x_i, x_j, cam_i: Camera, cam_j: Camera, min_angle: float = MIN_ANGLE_DEG) -> np.ndarray:
    """World point minimizing ``||A P||`` over homogeneous ``P``.

    Raises:
        IllConditionedError: the rays meet at less than ``min_angle`` degrees.
        CheiralityError: the point is behind either camera.
    """
    if triangulation_angle(x_i, x_j, cam_i, cam_j) < min_angle:
        raise IllConditionedError("viewing rays are nearly parallel")
    A = dlt_system(x_i, x_j, cam_i, cam_j)
    # work in metres so the homogeneous coordinate is not tiny
    A = A * np.array([1.0, 1.0, 1.0, 1e-3])
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    P = X[:3] / X[3] * 1e3
    _check_front(P, cam_i, cam_j)
    return P


def regularized_solve(A: np.ndarray, anchor: np.ndarray, lam: float) -> np.ndarray:
    """``argmin ||A [P; 1]||^2 + lam ||P - anchor||^2``."""
    A3 = A[:, :3]
    a4 = A[:, 3]
    M = A3.T @ A3 + lam * np.eye(3)
    return np.linalg.solve(M, -A3.T @ a4 + lam * np.asarray(anchor, dtype=np.float64))


def depth_anchor(P_i: Skeleton3D, P_j: Skeleton3D, pose_ji: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint anchors in camera-i coordinates.

    The mean of ``P_i`` and ``pose_ji(P_j)`` where both are valid, whichever
    one exists otherwise.

    Returns:
        (J, 3) anchors (NaN where absent) and the (J,) presence mask.
    """
    if pose_ji.scale != 1.0:
        raise ParameterError("pose_ji must be metric")
    Pj = P_j.transformed(pose_ji, P_i.frame)
    a, b = P_i.valid, Pj.valid
    out = np.full((P_i.num_joints, 3), np.nan)
    both = a & b
    out[both] = 0.5 * (P_i.joints[both] + Pj.joints[both])
    out[a & ~b] = P_i.joints[a & ~b]
    out[b & ~a] = Pj.joints[b & ~a]
    return out, a | b


def depth_constrained_triangulate(
    x_i,
    x_j,
    anchor,
    cam_i: Camera,
    cam_j: Camera,
    threshold: float = 100.0,
    lam: float = 1.0,
    mode: str = "gated",
    identity: int = -1,
    joint: int = -1,
    pair: tuple[int, int] = (-1, -1),
) -> JointCandidate:
    """DLT point, re-solved towards the depth anchor when the anchor is trusted.

    ``mode="gated"`` uses the anchor iff it lies strictly within
    ``threshold`` mm of the DLT point; ``"forced"`` uses every available
    anchor; ``"naive"`` never does.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    P = dlt_triangulate(x_i, x_j, cam_i, cam_j)
    has = anchor is not None and np.all(np.isfinite(anchor))
    anchor = np.asarray(anchor, dtype=np.float64) if has else None
    if not has or mode == "naive":
        return JointCandidate(identity, joint, pair, P, anchor, False)
    use = mode == "forced" or float(np.linalg.norm(P - anchor)) < threshold
    if not use:
        return JointCandidate(identity, joint, pair, P, anchor, False)
    Q = regularized_solve(dlt_system(x_i, x_j, cam_i, cam_j), anchor, lam)
    return JointCandidate(identity, joint, pair, Q, anchor, True)


def fuse_candidates(positions) -> np.ndarray:
    """Mean of the candidates after a MAD gate (applied with >= 3 candidates).

    Candidates farther than 3 x MAD from the coordinate-wise median are
    dropped, MAD being the median distance to that median. Sums use
    ``math.fsum`` so the result does not depend on input order.

    Raises:
        NoMeasurementError: no candidates.
    """
    pts = np.asarray([getattr(p, "position", p) for p in positions], dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise NoMeasurementError("no candidates for this joint")
    if len(pts) >= 3:
        med = np.median(pts, axis=0)
        dist = np.linalg.norm(pts - med, axis=1)
        mad = float(np.median(dist))
        pts = pts[dist <= 3.0 * mad]
    return np.array([math.fsum(pts[:, c].tolist()) / len(pts) for c in range(3)])


def apply_bone_prior(sk: Skeleton3D, prior: BonePrior) -> Skeleton3D:
    """Invalidate joints whose bone breaks symmetry (or the reference length).

    For a symmetric pair with relative length difference above
    ``tolerance`` the child joint of the longer bone is invalidated. All
    decisions are taken on the input skeleton, so the operation is
    idempotent. Joints are never moved.
    """
    if sk.num_joints != prior.num_joints:
        raise ParameterError(f"skeleton has {sk.num_joints} joints, prior expects {prior.num_joints}")
    lengths = np.full(len(prior.edges), np.nan)
    for e, (a, b) in enumerate(prior.edges):
        if sk.valid[a] and sk.valid[b]:
            lengths[e] = float(np.linalg.norm(sk.joints[a] - sk.joints[b]))
    drop = np.zeros(sk.num_joints, bool)
    paired = set()
    for e1, e2 in prior.symmetric:
        paired.update((e1, e2))
        l1, l2 = lengths[e1], lengths[e2]
        if np.isnan(l1) or np.isnan(l2):
            continue
        if abs(l1 - l2) > prior.tolerance * max(min(l1, l2), 1e-9):
            longer = e1 if l1 > l2 else e2
            drop[prior.edges[longer][1]] = True
    for e, ref in prior.reference.items():
        if e in paired or np.isnan(lengths[e]) or not ref > 0:
            continue
        if abs(lengths[e] - ref) > prior.tolerance * ref:
            drop[prior.edges[e][1]] = True
    valid = sk.valid & ~drop
    return Skeleton3D(sk.joints.copy(), valid, sk.frame)
