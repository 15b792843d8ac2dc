"""Deterministic synthetic multi-camera RGBD scenes with ground truth.

The world is z-up with the floor at ``z = 0`` inside a box room. RGBD
cameras sit on a ring looking at the room centre. People are posed stick
figures; their joints appear in the depth rasters as small discs facing
the RGB camera, drawn over ray-cast floor and walls. Detections carry
noisy 2D keypoints, depth-lifted skeletons (through the same registration
and lifting path used at ingest) and identity features.

Everything is a pure function of the config; the seed alone fixes every
random draw.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _kernels
from .bundle import FrameBundle, ViewData
from .errors import ParameterError
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    RigidTransform,
    Skeleton2D,
    Skeleton3D,
    look_at,
    project_points,
    rotation_about,
)
from .matching import Detection
from .triangulation import default_prior

RGB_INTRINSICS = CameraIntrinsics(320.0, 320.0, 320.0, 180.0, 640, 360)
DEPTH_INTRINSICS = CameraIntrinsics(180.0, 180.0, 160.0, 144.0, 320, 288)

# adult bone lengths (mm), keyed by default-prior edge index pairs
BONE_LENGTHS = (180.0, 300.0, 260.0, 520.0, 440.0, 420.0)
ANKLE_HEIGHT = 80.0
MAX_DEPTH = 65535.0


@dataclass
class SceneConfig:
    num_views: int = 4
    num_people: int = 4
    num_joints: int = 13
    room_extent: float = 4000.0
    wall_height: float = 3000.0
    ring_radius: float = 3000.0
    ring_arc: float = 360.0
    camera_height: float = 1200.0
    target_height: float = 900.0
    person_radius: float = 1100.0
    min_separation: float = 600.0
    marker_radius: float = 60.0
    px_noise: float = 0.0
    depth_noise: float = 0.0
    depth_dropout: float = 0.0
    keypoint_dropout: float = 0.0
    keypoint_outlier_prob: float = 0.0
    keypoint_outlier_px: float = 40.0
    detection_dropout: float = 0.0
    feature_dim: int = 512
    feature_noise: float = 0.01
    feature_separation: float = 1.0
    identity_swaps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_views < 2:
            raise ParameterError("num_views must be >= 2")
        if self.num_people < 1:
            raise ParameterError("num_people must be >= 1")
        if self.num_joints != 13:
            raise ParameterError("the stick-figure generator has 13 joints")
        for name in ("px_noise", "depth_noise", "feature_noise", "keypoint_outlier_px"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        for name in ("depth_dropout", "keypoint_dropout", "keypoint_outlier_prob", "detection_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must be a probability")
        if self.feature_dim < 1 or self.identity_swaps < 0:
            raise ParameterError("feature_dim must be >= 1 and identity_swaps >= 0")
        if not 0 < self.ring_arc <= 360:
            raise ParameterError("ring_arc must be in (0, 360]")
        if self.person_radius + 500 >= self.ring_radius or self.ring_radius >= self.room_extent:
            raise ParameterError("people must stand inside the camera ring, cameras inside the room")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(eq=False)
class GroundTruth:
    """World-frame truth for one frame.

    ``poses`` are world-to-RGB-camera transforms; ``labels`` maps each
    detection ``(view, index)`` to its person; ``swaps`` lists the
    ``(view, index_a, index_b)`` feature swaps applied.
    """

    poses: dict[int, RigidTransform]
    skeletons: list[Skeleton3D]
    labels: dict[tuple[int, int], int]
    swaps: list[tuple[int, int, int]] = field(default_factory=list)
    timestamp: int = 0

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "poses": {str(v): T.to_dict() for v, T in sorted(self.poses.items())},
            "skeletons": [
                {"joints": [[float(c) for c in p] for p in sk.joints], "valid": [bool(b) for b in sk.valid]}
                for sk in self.skeletons
            ],
            "labels": [[v, n, k] for (v, n), k in sorted(self.labels.items())],
            "swaps": [list(s) for s in self.swaps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            {int(v): RigidTransform.from_dict(T) for v, T in d["poses"].items()},
            [Skeleton3D(s["joints"], s["valid"], "world") for s in d["skeletons"]],
            {(int(v), int(n)): int(k) for v, n, k in d["labels"]},
            [tuple(int(x) for x in s) for s in d.get("swaps", [])],
            int(d.get("timestamp", 0)),
        )

    def in_view_frame(self, view: int) -> list[Skeleton3D]:
        return [sk.transformed(self.poses[view], f"camera{view}") for sk in self.skeletons]


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------


def _rng(cfg: SceneConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def camera_rig(cfg: SceneConfig) -> tuple[list[RigidTransform], list[RigidTransform]]:
    """World-to-RGB poses and depth-to-RGB offsets for every view."""
    rng = _rng(cfg, 0)
    poses, offsets = [], []
    target = np.array([0.0, 0.0, cfg.target_height])
    for v in range(cfg.num_views):
        ang = np.radians(cfg.ring_arc) * v / cfg.num_views + rng.uniform(-0.05, 0.05)
        eye = np.array([cfg.ring_radius * np.cos(ang), cfg.ring_radius * np.sin(ang), cfg.camera_height])
        poses.append(look_at(eye, target + rng.uniform(-100, 100, 3)))
        R = rotation_about(rng.normal(size=3), np.radians(rng.uniform(0.5, 2.0)))
        t = np.array([-32.0, -2.0, 4.0]) + rng.uniform(-3, 3, 3)
        offsets.append(RigidTransform.from_rotation(R, t))
    return poses, offsets


def _unit(v):
    return v / np.linalg.norm(v)


def _random_dir(rng, axis, max_angle):
    """Direction within ``max_angle`` radians of ``axis``."""
    axis = _unit(np.asarray(axis, dtype=np.float64))
    perp = _unit(np.cross(axis, rng.normal(size=3)))
    return rotation_about(perp, rng.uniform(0, max_angle)) @ axis


def stick_figure(rng: np.random.Generator, scale: float) -> np.ndarray:
    """13 body-frame joints (x right, y forward, z up) with random limb angles."""
    L = np.asarray(BONE_LENGTHS) * scale
    J = np.zeros((13, 3))
    down = np.array([0.0, 0.0, -1.0])
    for side, sgn in ((0, 1.0), (1, -1.0)):
        sho = J[0] + L[0] * _unit(np.array([sgn, 0.0, -0.15 + rng.uniform(-0.1, 0.1)]))
        elb = sho + L[1] * _random_dir(rng, down + np.array([0.3 * sgn, 0.0, 0.0]), np.radians(70))
        wri = elb + L[2] * _random_dir(rng, elb - sho + np.array([0.0, 0.4, 0.0]) * L[1], np.radians(60))
        hip = J[0] + L[3] * _unit(np.array([0.2 * sgn, 0.0, -1.0]))
        knee = hip + L[4] * _random_dir(rng, down + np.array([0.0, 0.25, 0.0]), np.radians(20))
        ank = knee + L[5] * _random_dir(rng, down + np.array([0.0, -0.2, 0.0]), np.radians(15))
        J[1 + side], J[3 + side], J[5 + side] = sho, elb, wri
        J[7 + side], J[9 + side], J[11 + side] = hip, knee, ank
    J[:, 2] += ANKLE_HEIGHT - J[[11, 12], 2].min()
    return J


def place_people(cfg: SceneConfig, rng: np.random.Generator) -> list[Skeleton3D]:
    centres = []
    while len(centres) < cfg.num_people:
        for _ in range(1000):
            r = cfg.person_radius * np.sqrt(rng.uniform())
            a = rng.uniform(0, 2 * np.pi)
            c = np.array([r * np.cos(a), r * np.sin(a)])
            if all(np.linalg.norm(c - o) >= cfg.min_separation for o in centres):
                break
        else:
            raise ParameterError("could not place people with the requested separation")
        centres.append(c)
    people = []
    for c in centres:
        body = stick_figure(rng, rng.uniform(0.9, 1.1))
        R = rotation_about([0, 0, 1], rng.uniform(0, 2 * np.pi))
        joints = body @ R.T + np.array([c[0], c[1], 0.0])
        people.append(Skeleton3D(joints, np.ones(13, bool), "world"))
    return people


def _raycast_room(cfg: SceneConfig, world_to_depth: RigidTransform, intr: CameraIntrinsics) -> np.ndarray:
    """Depth (camera z, mm) of floor and walls; 0 where the ray leaves the room."""
    R = np.ascontiguousarray(world_to_depth.rotation)
    origin = np.ascontiguousarray(world_to_depth.center)
    return _kernels.raycast_room(
        R, origin, intr.fx, intr.fy, intr.cx, intr.cy, intr.height, intr.width, cfg.room_extent, cfg.wall_height
    )


def render_depth(
    cfg: SceneConfig,
    world_to_rgb: RigidTransform,
    depth_to_rgb: RigidTransform,
    people: list[Skeleton3D],
    rng: np.random.Generator,
) -> DepthImage:
    """Depth raster (depth-camera frame, integer mm) of the room and joint markers."""
    intr = DEPTH_INTRINSICS
    world_to_depth = depth_to_rgb.inverse().compose(world_to_rgb)
    raster = _raycast_room(cfg, world_to_depth, intr)
    centres = np.concatenate([world_to_depth.apply(p.joints) for p in people]) if people else np.zeros((0, 3))
    normal = depth_to_rgb.rotation.T @ np.array([0.0, 0.0, 1.0])
    args = (intr.fx, intr.fy, intr.cx, intr.cy)
    raster = _kernels.render_markers(raster, *args, np.ascontiguousarray(centres), normal, cfg.marker_radius)
    if cfg.depth_dropout > 0 and len(centres):
        holes = centres[rng.uniform(size=len(centres)) < cfg.depth_dropout]
        if len(holes):
            mask = _kernels.render_markers(np.zeros_like(raster), *args, np.ascontiguousarray(holes), normal, cfg.marker_radius)
            raster[mask > 0] = 0.0
    if cfg.depth_noise > 0:
        measured = raster > 0
        raster[measured] += rng.normal(0.0, cfg.depth_noise, int(measured.sum()))
    raster = np.clip(np.round(raster), 0.0, MAX_DEPTH)
    return DepthImage(raster, intr)


def identity_centroids(cfg: SceneConfig) -> np.ndarray:
    """Per-person feature centroids, about ``feature_separation`` apart."""
    rng = _rng(cfg, 1)
    return rng.normal(0.0, cfg.feature_separation / np.sqrt(2 * cfg.feature_dim), (cfg.num_people, cfg.feature_dim))


def _detect(cfg, view, world_to_rgb, people, centroids, rng):
    intr = RGB_INTRINSICS
    dets, labels = [], {}
    for k, person in enumerate(people):
        cam = world_to_rgb.apply(person.joints)
        uv = project_points(cam, intr)
        inside = np.isfinite(uv).all(1) & intr.contains(uv[:, 0], uv[:, 1])
        if not inside.any() or rng.uniform() < cfg.detection_dropout:
            continue
        uv = uv + rng.normal(0.0, cfg.px_noise, uv.shape) if cfg.px_noise > 0 else uv
        if cfg.keypoint_outlier_prob > 0:
            out = rng.uniform(size=len(uv)) < cfg.keypoint_outlier_prob
            ang = rng.uniform(0, 2 * np.pi, len(uv))
            shift = cfg.keypoint_outlier_px * np.stack([np.cos(ang), np.sin(ang)], 1)
            uv = np.where(out[:, None], uv + shift, uv)
        valid = np.isfinite(uv).all(1) & intr.contains(uv[:, 0], uv[:, 1])
        if cfg.keypoint_dropout > 0:
            valid &= rng.uniform(size=len(uv)) >= cfg.keypoint_dropout
        if not valid.any():
            continue
        uv = np.where(valid[:, None], uv, 0.0)
        lo, hi = uv[valid].min(0), uv[valid].max(0)
        noise = rng.normal(0.0, cfg.feature_noise / np.sqrt(cfg.feature_dim), cfg.feature_dim)
        n = len(dets)
        dets.append(Detection(view, n, Skeleton2D(uv, valid), centroids[k] + noise, np.concatenate([lo - 10, hi + 10])))
        labels[(view, n)] = k
    return dets, labels


def _shuffle_order(dets, labels, rng):
    """Randomize detection order so index never leaks identity."""
    perm = rng.permutation(len(dets))
    out, lab = [], {}
    for n, p in enumerate(perm):
        d = dets[p]
        lab[(d.view, n)] = labels[(d.view, d.index)]
        d.index = n
        out.append(d)
    return out, lab


def generate_frame(cfg: SceneConfig, frame: int = 0) -> tuple[FrameBundle, GroundTruth]:
    """One synthetic frame; cameras depend on the seed only, people on (seed, frame)."""
    poses, offsets = camera_rig(cfg)
    centroids = identity_centroids(cfg)
    rng = _rng(cfg, 2, frame)
    people = place_people(cfg, rng)
    views, labels = [], {}
    for v in range(cfg.num_views):
        vrng = _rng(cfg, 3, frame, v)
        depth = render_depth(cfg, poses[v], offsets[v], people, vrng)
        dets, lab = _detect(cfg, v, poses[v], people, centroids, vrng)
        dets, lab = _shuffle_order(dets, lab, vrng)
        labels.update(lab)
        views.append(ViewData(RGB_INTRINSICS, DEPTH_INTRINSICS, offsets[v], depth, dets))
    bundle = FrameBundle(views, frame).lift_all()
    gt = GroundTruth(dict(enumerate(poses)), people, labels, [], frame)
    if cfg.identity_swaps:
        bundle, gt = corrupt_correspondences(bundle, gt, cfg.identity_swaps, seed=cfg.seed * 7919 + frame)
    return bundle, gt


def generate_sequence(cfg: SceneConfig, num_frames: int) -> tuple[list[FrameBundle], list[GroundTruth]]:
    frames = [generate_frame(cfg, t) for t in range(num_frames)]
    return [f[0] for f in frames], [f[1] for f in frames]


def corrupt_correspondences(
    bundle: FrameBundle, gt: GroundTruth, n_swaps: int, seed: int = 0, pairs: list[tuple[int, int, int]] | None = None
) -> tuple[FrameBundle, GroundTruth]:
    """Swap appearance features between detections of the same view.

    Picks ``n_swaps`` disjoint same-view detection pairs (or uses the
    explicit ``pairs`` of ``(view, index_a, index_b)``) and exchanges
    their features. Random swaps visit the views in a shuffled round-robin
    order, so they spread over distinct views before any view is hit
    twice. The input is left untouched.

    Raises:
        ParameterError: fewer disjoint same-view pairs than requested.
    """
    bundle = copy.deepcopy(bundle)
    gt = copy.deepcopy(gt)
    if pairs is None:
        rng = np.random.default_rng(seed)
        pool = [(v, len(view.detections)) for v, view in enumerate(bundle.views)]
        capacity = sum(n // 2 for _, n in pool)
        if n_swaps > capacity:
            raise ParameterError(f"requested {n_swaps} swaps, only {capacity} disjoint same-view pairs exist")
        used: set[tuple[int, int]] = set()
        pairs = []
        order = [int(v) for v in rng.permutation(len(pool))]
        step = 0
        while len(pairs) < n_swaps:
            v = order[step % len(order)]
            step += 1
            free = [n for n in range(pool[v][1]) if (v, n) not in used]
            if len(free) < 2:
                continue
            a, b = (int(x) for x in rng.choice(free, 2, replace=False))
            used.update({(v, a), (v, b)})
            pairs.append((v, min(a, b), max(a, b)))
    for v, a, b in pairs:
        da, db = bundle.views[v].detections[a], bundle.views[v].detections[b]
        da.feature, db.feature = db.feature.copy(), da.feature.copy()
    gt.swaps = gt.swaps + [tuple(p) for p in pairs]
    return bundle, gt


def wrong_pairs(gt: GroundTruth, assignment, view_i: int, view_j: int) -> set[int]:
    """Clusters whose members in views i and j are different people."""
    out = set()
    for k in range(assignment.K):
        mem = {v: n for v, n in assignment.members(k)}
        if view_i in mem and view_j in mem:
            if gt.labels[(view_i, mem[view_i])] != gt.labels[(view_j, mem[view_j])]:
                out.add(k)
    return out


def bone_lengths_ok(sk: Skeleton3D, tol: float = 1e-9) -> bool:
    """True when left/right bones of the default prior match exactly."""
    prior = default_prior()
    L = [np.linalg.norm(sk.joints[a] - sk.joints[b]) for a, b in prior.edges]
    return all(abs(L[a] - L[b]) <= tol * max(L[a], 1.0) for a, b in prior.symmetric)
