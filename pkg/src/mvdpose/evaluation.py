"""Camera and skeleton metrics, and seeded ablation comparisons."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import binomtest

from .bundle import FrameBundle
from .errors import MvdError, ParameterError
from .geometry import RigidTransform, Skeleton3D, rotation_angle
from .pipeline import PipelineConfig, run_pipeline
from .simulator import GroundTruth, SceneConfig, generate_sequence
from .triangulation import BonePrior, default_prior

log = logging.getLogger(__name__)


@dataclass
class CameraError:
    rotation: dict[int, float]
    translation: dict[int, float]

    @property
    def mean_rotation(self) -> float:
        return float(np.mean(list(self.rotation.values())))

    @property
    def mean_translation(self) -> float:
        return float(np.mean(list(self.translation.values())))

    def to_dict(self) -> dict:
        return {
            "rotation_deg": {str(v): e for v, e in sorted(self.rotation.items())},
            "translation_mm": {str(v): e for v, e in sorted(self.translation.items())},
            "mean_rotation_deg": self.mean_rotation,
            "mean_translation_mm": self.mean_translation,
        }


def similarity_align(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Scale, rotation and offset minimizing ``sum ||s Q src + b - dst||^2``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    X, Y = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(Y.T @ X / len(src))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    Q = U @ D @ Vt
    var = (X * X).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if var > 0 else 1.0
    return s, Q, mu_d - s * Q @ mu_s


def _alignment_points(poses: dict[int, RigidTransform], views: list[int], length: float) -> np.ndarray:
    pts = []
    for v in views:
        c = poses[v].center
        pts.append(c)
        for axis in poses[v].rotation:
            pts.append(c + length * axis)
    return np.array(pts)


def _spread(c: np.ndarray) -> float:
    return float(np.sqrt(((c - c.mean(0)) ** 2).sum(1).mean()))


def camera_error(pred: dict[int, RigidTransform], gt: dict[int, RigidTransform], align: bool = True) -> CameraError:
    """Per-view rotation (degrees) and camera-centre (mm) errors.

    With ``align`` the predicted frame is first mapped onto the ground-truth
    frame by the similarity that best matches camera centres; with fewer
    than three non-collinear centres each camera's axes are added as extra
    points. ``align=False`` compares raw coordinates.
    """
    if set(pred) != set(gt):
        raise ParameterError(f"view sets differ: {sorted(pred)} vs {sorted(gt)}")
    views = sorted(gt)
    s, Q, b = 1.0, np.eye(3), np.zeros(3)
    if align:
        cp = np.array([pred[v].center for v in views])
        cg = np.array([gt[v].center for v in views])
        sv = np.linalg.svd(cg - cg.mean(0), compute_uv=False)
        if len(views) < 3 or sv[1] <= 1e-6 * max(sv[0], 1e-12):
            lp, lg = max(_spread(cp), 1.0), max(_spread(cg), 1.0)
            cp = _alignment_points(pred, views, lp)
            cg = _alignment_points(gt, views, lg)
        s, Q, b = similarity_align(cp, cg)
    rot, trans = {}, {}
    for v in views:
        R = pred[v].rotation @ Q.T
        rot[v] = float(np.degrees(rotation_angle(gt[v].rotation.T @ R)))
        trans[v] = float(np.linalg.norm(gt[v].center - (s * Q @ pred[v].center + b)))
    return CameraError(rot, trans)


@dataclass
class PcpReport:
    per_actor: list[float]
    per_part: list[float]
    matches: list[int]

    @property
    def average(self) -> float:
        return float(np.mean(self.per_actor)) if self.per_actor else 0.0

    def to_dict(self) -> dict:
        return {"average": self.average, "per_actor": self.per_actor, "per_part": self.per_part, "matches": self.matches}


def _mean_joint_distance(p: Skeleton3D, g: Skeleton3D) -> float:
    m = p.valid & g.valid
    if not m.any():
        return 1e12
    return float(np.linalg.norm(p.joints[m] - g.joints[m], axis=1).mean())


def pcp(pred: list[Skeleton3D], gt: list[Skeleton3D], prior: BonePrior | None = None, alpha: float = 0.5) -> PcpReport:
    """Percentage of correct parts per ground-truth actor.

    Predictions are matched to actors by minimal mean joint distance. A
    part is correct when both predicted endpoints are valid and within
    ``alpha`` times the true part length of their true positions;
    unmatched actors score 0.
    """
    prior = prior or default_prior()
    J = prior.num_joints
    for sk in list(pred) + list(gt):
        if sk.num_joints != J:
            raise ParameterError(f"skeleton has {sk.num_joints} joints, expected {J}")
    matches = [-1] * len(gt)
    if pred and gt:
        cost = np.array([[_mean_joint_distance(p, g) for p in pred] for g in gt])
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            matches[r] = int(c)
    edges = prior.edges
    correct = np.zeros((len(gt), len(edges)), bool)
    for a, m in enumerate(matches):
        if m < 0:
            continue
        p, g = pred[m], gt[a]
        for e, (i, j) in enumerate(edges):
            if not (p.valid[i] and p.valid[j] and g.valid[i] and g.valid[j]):
                continue
            bound = alpha * np.linalg.norm(g.joints[i] - g.joints[j])
            correct[a, e] = (np.linalg.norm(p.joints[i] - g.joints[i]) <= bound) and (
                np.linalg.norm(p.joints[j] - g.joints[j]) <= bound
            )
    per_actor = [float(100.0 * correct[a].mean()) for a in range(len(gt))]
    per_part = [float(100.0 * correct[:, e].mean()) if len(gt) else 0.0 for e in range(len(edges))]
    return PcpReport(per_actor, per_part, matches)


def sign_test(a, b, alternative: str = "greater") -> tuple[int, int, float]:
    """Wins of ``a`` over ``b`` (ties dropped), number of non-ties, one-sided p-value."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    wins = int(np.sum(a > b))
    n = int(np.sum(a != b))
    p = float(binomtest(wins, n, 0.5, alternative=alternative).pvalue) if n else 1.0
    return wins, n, p


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

VARIANTS = {
    "full": {"icp": True},
    "no-ICP": {},
    "no-depth-guide": {"depth_guide": False},
    "naive-triangulation": {"triangulation": "naive"},
    "forced-anchors": {"triangulation": "forced"},
}


def select_views(bundle: FrameBundle, gt: GroundTruth, views: list[int]) -> tuple[FrameBundle, GroundTruth]:
    """Keep a subset of views, renumbered 0..len(views)-1."""
    remap = {v: n for n, v in enumerate(views)}
    vd = [copy.copy(bundle.views[v]) for v in views]
    for n, view in enumerate(vd):
        view.detections = [replace(d, view=n) for d in view.detections]
    labels = {(remap[v], i): k for (v, i), k in gt.labels.items() if v in remap}
    poses = {remap[v]: T for v, T in gt.poses.items() if v in remap}
    swaps = [(remap[v], a, b) for v, a, b in gt.swaps if v in remap]
    return FrameBundle(vd, bundle.timestamp), GroundTruth(poses, gt.skeletons, labels, swaps, gt.timestamp)


def variant_config(name: str, base: PipelineConfig) -> tuple[PipelineConfig, int | None]:
    """Pipeline config for a variant name; ``views=N`` keeps the first N views."""
    if name.startswith("views="):
        return base, int(name.split("=", 1)[1])
    if name not in VARIANTS:
        raise ParameterError(f"unknown variant {name!r}; known: {sorted(VARIANTS)} or views=N")
    return replace(base, **VARIANTS[name]), None


@dataclass
class VariantResult:
    rotation: list[float] = field(default_factory=list)
    translation: list[float] = field(default_factory=list)
    pcp: list[float] = field(default_factory=list)
    failures: int = 0


def evaluate_run(result, gts: list[GroundTruth], anchor: int, prior: BonePrior | None = None, alpha: float = 0.5):
    """Camera error and mean PCP of a pipeline result against ground truth."""
    cam = camera_error(result.calibration.poses, gts[0].poses)
    scores = []
    for sks, gt in zip(result.skeletons, gts):
        truth = [s.transformed(gt.poses[anchor], "world") for s in gt.skeletons]
        scores.append(pcp(sks, truth, prior, alpha).average)
    return cam, float(np.mean(scores))


def ablation_run(
    seeds,
    variants: list[str],
    scene: SceneConfig,
    base: PipelineConfig | None = None,
    num_frames: int = 1,
    alpha: float = 0.5,
) -> dict:
    """Run every variant on the same seeded scenes.

    Failed runs (a numerical error anywhere in the pipeline) score 0 PCP
    and 180 deg / 1e6 mm camera error so they count against the variant.

    Returns:
        ``{"variants": {name: VariantResult}, "seeds": [...]}``.
    """
    base = base or PipelineConfig(num_people=scene.num_people)
    results = {v: VariantResult() for v in variants}
    seeds = list(seeds)
    for seed in seeds:
        bundles, gts = generate_sequence(replace(scene, seed=int(seed)), num_frames)
        for name in variants:
            cfg, nviews = variant_config(name, base)
            bs, gs = bundles, gts
            if nviews is not None:
                pairs = [select_views(b, g, list(range(nviews))) for b, g in zip(bundles, gts)]
                bs, gs = [p[0] for p in pairs], [p[1] for p in pairs]
            r = results[name]
            try:
                out = run_pipeline(copy.deepcopy(bs), cfg)
                cam, score = evaluate_run(out, gs, cfg.anchor, alpha=alpha)
                r.rotation.append(cam.mean_rotation)
                r.translation.append(cam.mean_translation)
                r.pcp.append(score)
            except MvdError as exc:
                log.info("seed %s variant %s failed: %s", seed, name, exc)
                r.failures += 1
                r.rotation.append(180.0)
                r.translation.append(1e6)
                r.pcp.append(0.0)
    return {"variants": results, "seeds": seeds}


def ablation_table(run: dict) -> dict:
    """Means per variant plus sign tests between every ordered pair of variants."""
    res = run["variants"]
    table = {
        name: {
            "mean_rotation_deg": float(np.mean(r.rotation)),
            "mean_translation_mm": float(np.mean(r.translation)),
            "mean_pcp": float(np.mean(r.pcp)),
            "failures": r.failures,
        }
        for name, r in res.items()
    }
    orderings = {}
    names = list(res)
    for a in names:
        for b in names:
            if a == b:
                continue
            wins, n, p = sign_test(-np.asarray(res[a].translation), -np.asarray(res[b].translation))
            pw, pn, pp = sign_test(res[a].pcp, res[b].pcp)
            orderings[f"{a}>{b}"] = {
                "translation_wins": wins, "translation_n": n, "translation_p": p,
                "pcp_wins": pw, "pcp_n": pn, "pcp_p": pp,
            }
    return {"variants": table, "orderings": orderings, "seeds": run["seeds"]}
