"""End-to-end orchestration: match, calibrate, triangulate.

Each stage is a separate function so the CLI can run them one at a time
on files and still reproduce ``run_pipeline`` exactly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import networkx as nx
import numpy as np

from .bundle import FrameBundle
from .errors import MvdError, NoConsensusError, NumericalError, ParameterError
from .geometry import RigidTransform, Skeleton3D, backproject_depth
from .matching import Assignment, Detection, cluster_features, correspondences_from_assignment
from .pose import (
    CorrespondenceSet,
    chain_poses,
    depth_guided_pose,
    eight_point,
    icp_refine,
    resolve_scale,
    triangle_support,
    voxel_downsample,
)
from .triangulation import (
    MODES,
    BonePrior,
    Camera,
    apply_bone_prior,
    default_prior,
    depth_anchor,
    depth_constrained_triangulate,
    fuse_candidates,
)

log = logging.getLogger("mvdpose")


@dataclass
class PipelineConfig:
    num_people: int = 4
    num_joints: int = 13
    pose_threshold: float = 0.01
    depth_guide: bool = True
    depth_threshold: float = 100.0
    regularization: float = 1.0
    triangulation: str = "gated"
    icp: bool = False
    icp_trim: float = 0.2
    icp_max_iter: int = 30
    icp_voxel: float = 50.0
    icp_max_points: int = 2000
    cycle_rotation_tol: float = 3.0
    identity_gate: float | None = 250.0
    cycle_translation_tol: float = 0.1
    anchor: int = 0
    calibration_window: int | None = 50
    lift_window: int = 2
    kmeans_max_iter: int = 100
    seed: int = 0
    bone_prior: bool = True
    bone_tolerance: float = 0.5

    def __post_init__(self):
        if self.num_people < 1:
            raise ParameterError("num_people must be >= 1")
        if self.triangulation not in MODES:
            raise ParameterError(f"triangulation must be one of {MODES}")
        if not 0.0 <= self.icp_trim < 1.0:
            raise ParameterError("icp_trim must be in [0, 1)")
        if self.calibration_window is not None and self.calibration_window < 1:
            raise ParameterError("calibration_window must be >= 1 or null")
        if self.pose_threshold <= 0 or self.depth_threshold <= 0 or self.regularization < 0:
            raise ParameterError("thresholds must be positive and regularization non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class PairResult:
    pose: RigidTransform
    inlier_count: int
    residual: float
    rejected: set = field(default_factory=set)


@dataclass
class Calibration:
    poses: dict[int, RigidTransform]
    inlier_count: dict[int, int]
    residual: dict[int, float]
    pairwise: dict[tuple[int, int], PairResult] = field(default_factory=dict)
    cycle_residuals: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            str(v): {**T.to_dict(), "inlier_count": self.inlier_count[v], "residual": self.residual[v]}
            for v, T in sorted(self.poses.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        poses = {int(v): RigidTransform.from_dict(e) for v, e in d.items()}
        return cls(
            poses,
            {int(v): int(e.get("inlier_count", 0)) for v, e in d.items()},
            {int(v): float(e.get("residual", 0.0)) for v, e in d.items()},
        )


@dataclass
class PipelineResult:
    calibration: Calibration
    assignments: list[Assignment | None]
    skeletons: list[list[Skeleton3D]]
    report: dict


def _ctx(stage: str, frame=None) -> dict:
    return {"stage": stage, "frame": "-" if frame is None else frame}


def _ensure_lifted(bundle: FrameBundle, cfg: PipelineConfig) -> None:
    for view in bundle.views:
        if any(d.skeleton3d_lifted is None for d in view.detections):
            view.lift_detections(cfg.lift_window)


def match_frame(bundle: FrameBundle, cfg: PipelineConfig) -> Assignment:
    """Cluster one frame into at most ``num_people`` identities.

    K is capped by the largest per-view detection count: extra clusters
    could only split one person's detections apart.
    """
    most = max((len(v.detections) for v in bundle.views), default=0)
    K = max(1, min(cfg.num_people, most))
    assignment, _ = cluster_features(bundle.detections, K, cfg.kmeans_max_iter, cfg.seed)
    return assignment


def match_frames(bundles: list[FrameBundle], cfg: PipelineConfig) -> list[Assignment | None]:
    out = []
    for b in bundles:
        try:
            a = match_frame(b, cfg)
            log.info("%d detections in %d clusters", len(a.labels), a.K, extra=_ctx("match", b.timestamp))
            out.append(a)
        except MvdError as exc:
            log.warning("frame skipped: %s", exc, extra=_ctx("match", b.timestamp))
            out.append(None)
    return out


def pair_correspondences(
    bundles: list[FrameBundle], assignments: list[Assignment | None], view_i: int, view_j: int
) -> CorrespondenceSet:
    sets = []
    for b, a in zip(bundles, assignments):
        if a is None:
            continue
        pairs = correspondences_from_assignment(a, b.detections)
        sets.append(CorrespondenceSet.from_person_pairs(pairs, view_i, view_j, frame=b.timestamp))
    return CorrespondenceSet.concatenate(sets)


def estimate_pair(corr: CorrespondenceSet, intr_i, intr_j, cfg: PipelineConfig) -> PairResult:
    """Metric pose of camera i relative to camera j (cam-i -> cam-j)."""
    if cfg.depth_guide:
        est = depth_guided_pose(corr, intr_i, intr_j, cfg.pose_threshold)
    else:
        est = eight_point(corr.x_i, corr.x_j, intr_i, intr_j)
    pose = resolve_scale(est, corr)
    return PairResult(pose, est.inlier_count, est.residual if cfg.depth_guide else est.algebraic,
                      corr.provenance(~est.inliers))


def view_clouds(bundle: FrameBundle, voxel: float, max_points: int | None = None, seed: int = 0) -> dict[int, np.ndarray]:
    """Voxel-subsampled depth clouds in each RGB camera frame, capped at ``max_points``."""
    out = {}
    for v, view in enumerate(bundle.views):
        pts = voxel_downsample(view.depth_to_rgb.apply(backproject_depth(view.depth)), voxel)
        if max_points is not None and len(pts) > max_points:
            rng = np.random.default_rng([seed, v])
            pts = pts[np.sort(rng.choice(len(pts), max_points, replace=False))]
        out[v] = pts
    return out


def edge_weights(pairwise: dict[tuple[int, int], PairResult], cfg: PipelineConfig) -> dict[tuple[int, int], float]:
    """Inlier counts, scaled down 1000x for edges that close no consistent triangle.

    Edges are only penalized when some triangle is consistent at all, so
    a graph without loops (or without any agreement) keeps plain counts.
    """
    support = triangle_support({e: r.pose for e, r in pairwise.items()}, cfg.cycle_rotation_tol, cfg.cycle_translation_tol)
    any_support = any(support.values())
    return {
        e: float(r.inlier_count) * (1e-3 if any_support and support[e] == 0 else 1.0)
        for e, r in pairwise.items()
    }


def calibrate(bundles: list[FrameBundle], assignments: list[Assignment | None], cfg: PipelineConfig) -> Calibration:
    """Pairwise poses over the calibration window, chained to the anchor view."""
    if not bundles:
        raise ParameterError("no frames to calibrate from")
    window = len(bundles) if cfg.calibration_window is None else cfg.calibration_window
    frames = bundles[:window]
    assigns = assignments[:window]
    for b in frames:
        _ensure_lifted(b, cfg)
    V = bundles[0].num_views
    if not 0 <= cfg.anchor < V:
        raise ParameterError(f"anchor view {cfg.anchor} out of range for {V} views")
    pairwise: dict[tuple[int, int], PairResult] = {}
    for i in range(V):
        for j in range(i + 1, V):
            corr = pair_correspondences(frames, assigns, i, j)
            intr_i = bundles[0].views[i].rgb_intrinsics
            intr_j = bundles[0].views[j].rgb_intrinsics
            try:
                pairwise[(i, j)] = r = estimate_pair(corr, intr_i, intr_j, cfg)
                log.info("pair (%d, %d): %d inliers, residual %.4g", i, j, r.inlier_count, r.residual, extra=_ctx("calibrate"))
            except NumericalError as exc:
                log.info("pair (%d, %d) skipped: %s", i, j, exc, extra=_ctx("calibrate"))
    poses_ij = {e: r.pose for e, r in pairwise.items()}
    chain = chain_poses(poses_ij, cfg.anchor, edge_weights(pairwise, cfg), views=list(range(V)))
    poses = chain.poses
    if cfg.icp:
        clouds = view_clouds(frames[0], cfg.icp_voxel, cfg.icp_max_points, cfg.seed)
        icp = icp_refine(clouds, poses, cfg.anchor, cfg.icp_trim, cfg.icp_max_iter)
        log.info("icp residual %.3f -> %.3f mm", icp.initial_residual, icp.residual, extra=_ctx("calibrate"))
        poses = icp.poses
    inl = {cfg.anchor: 0}
    res = {cfg.anchor: 0.0}
    for a, b in chain.tree_edges:
        r = pairwise[(min(a, b), max(a, b))]
        inl[b] = r.inlier_count
        res[b] = r.residual
    return Calibration(poses, inl, res, pairwise, chain.cycle_residuals)


def _lifts_disagree(li: Skeleton3D, lj: Skeleton3D, pose_ji: RigidTransform, threshold: float) -> np.ndarray:
    """Joints lifted in both views whose lifts are farther apart than ``threshold``.

    Averaging such a pair hides an occluded lift inside a plausible-looking
    anchor, so the gated mode treats it as having no anchor.
    """
    lj_i = lj.transformed(pose_ji, li.frame)
    both = li.valid & lj_i.valid
    out = np.zeros(li.num_joints, bool)
    out[both] = np.linalg.norm(li.joints[both] - lj_i.joints[both], axis=1) > threshold
    return out


def _same_person(li: Skeleton3D, lj: Skeleton3D, pose_ji: RigidTransform, gate: float | None) -> bool:
    """False when the two depth-lifted skeletons are more than ``gate`` mm apart (median joint).

    A cluster member from a wrong cross-view match sits at another
    person's position; with fewer than three joints lifted in both views
    the check abstains.
    """
    if gate is None:
        return True
    lj_i = lj.transformed(pose_ji, li.frame)
    both = li.valid & lj_i.valid
    if both.sum() < 3:
        return True
    return float(np.median(np.linalg.norm(li.joints[both] - lj_i.joints[both], axis=1))) <= gate


def _consistent_pairs(members: list[Detection], cams: dict[int, Camera], gate: float | None) -> list[tuple[Detection, Detection]]:
    """Member pairs of one cluster that plausibly show the same person.

    Pairs failing :func:`_same_person` are cut, and only the largest
    connected group of views is kept (most views, then most lifted joints,
    then lowest view index), so a cluster that mixes two people yields one
    of them instead of their average.
    """
    g = nx.Graph()
    g.add_nodes_from(range(len(members)))
    for a, b in itertools.combinations(range(len(members)), 2):
        di, dj = members[a], members[b]
        pose_ji = cams[di.view].pose.compose(cams[dj.view].pose.inverse())
        if _same_person(di.skeleton3d_lifted, dj.skeleton3d_lifted, pose_ji, gate):
            g.add_edge(a, b)

    def rank(comp):
        lifted = sum(int(members[n].skeleton3d_lifted.valid.sum()) for n in comp)
        return (len(comp), lifted, -min(comp))

    keep = max(nx.connected_components(g), key=rank)
    return [(members[a], members[b]) for a, b in sorted(g.subgraph(keep).edges())]


def triangulate_frame(
    bundle: FrameBundle,
    assignment: Assignment,
    calibration: Calibration,
    cfg: PipelineConfig,
    prior: BonePrior | None = None,
) -> list[Skeleton3D]:
    """One skeleton per cluster, in the anchor-camera frame."""
    _ensure_lifted(bundle, cfg)
    J = cfg.num_joints
    prior = prior or (default_prior(cfg.bone_tolerance) if J == 13 else None)
    lookup: dict[tuple[int, int], Detection] = {d.key: d for d in bundle.detections}
    cams = {
        v: Camera(view.rgb_intrinsics, calibration.poses[v])
        for v, view in enumerate(bundle.views)
        if v in calibration.poses
    }
    out = []
    for k in range(assignment.K):
        members = sorted((lookup[m] for m in assignment.members(k) if m in lookup and m[0] in cams), key=lambda d: d.view)
        cands: list[list[np.ndarray]] = [[] for _ in range(J)]
        for di, dj in _consistent_pairs(members, cams, cfg.identity_gate):
            ci, cj = cams[di.view], cams[dj.view]
            pose_ji = ci.pose.compose(cj.pose.inverse())
            li, lj = di.skeleton3d_lifted, dj.skeleton3d_lifted
            anchors, has = depth_anchor(li, lj, pose_ji)
            if cfg.triangulation == "gated":
                has = has & ~_lifts_disagree(li, lj, pose_ji, cfg.depth_threshold)
            to_world = ci.pose.inverse()
            for d in np.flatnonzero(di.skeleton2d.valid & dj.skeleton2d.valid):
                anchor = to_world.apply(anchors[d]) if has[d] else None
                try:
                    c = depth_constrained_triangulate(
                        di.skeleton2d.joints[d], dj.skeleton2d.joints[d], anchor, ci, cj,
                        cfg.depth_threshold, cfg.regularization, cfg.triangulation,
                        identity=k, joint=int(d), pair=(di.view, dj.view),
                    )
                except NumericalError:
                    continue
                cands[d].append(c.position)
        joints = np.full((J, 3), np.nan)
        valid = np.zeros(J, bool)
        for d in range(J):
            if cands[d]:
                joints[d] = fuse_candidates(cands[d])
                valid[d] = True
        sk = Skeleton3D(joints, valid, "world")
        if cfg.bone_prior and prior is not None:
            sk = apply_bone_prior(sk, prior)
        out.append(sk)
    return out


def triangulate_frames(bundles, assignments, calibration, cfg, prior=None) -> list[list[Skeleton3D]]:
    out = []
    for b, a in zip(bundles, assignments):
        if a is None:
            out.append([])
            continue
        try:
            sks = triangulate_frame(b, a, calibration, cfg, prior)
            joints = sum(int(sk.valid.sum()) for sk in sks)
            log.info("%d people, %d joints", len(sks), joints, extra=_ctx("triangulate", b.timestamp))
            out.append(sks)
        except MvdError as exc:
            log.warning("frame skipped: %s", exc, extra=_ctx("triangulate", b.timestamp))
            out.append([])
    return out


def run_pipeline(bundles: list[FrameBundle], cfg: PipelineConfig, prior: BonePrior | None = None) -> PipelineResult:
    """Cluster every frame, calibrate once over the window, then triangulate every frame.

    Raises:
        NoConsensusError: no frame could be clustered.
    """
    assignments = match_frames(bundles, cfg)
    if all(a is None for a in assignments):
        raise NoConsensusError("no frame could be clustered")
    calibration = calibrate(bundles, assignments, cfg)
    skeletons = triangulate_frames(bundles, assignments, calibration, cfg, prior)
    report = {
        "frames": len(bundles),
        "skipped_frames": [b.timestamp for b, a in zip(bundles, assignments) if a is None],
        "pairs": {f"{i}-{j}": {"inliers": r.inlier_count, "residual": r.residual} for (i, j), r in sorted(calibration.pairwise.items())},
        "cycle_residuals": {f"{i}-{j}": list(r) for (i, j), r in sorted(calibration.cycle_residuals.items())},
    }
    return PipelineResult(calibration, assignments, skeletons, report)
