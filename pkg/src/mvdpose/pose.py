"""Relative and global camera pose estimation.

Pairwise poses come from the normalized eight-point algorithm on
keypoint correspondences, checked against the rigid transform that the
depth-lifted joints imply (Kabsch). The depth transform supplies both an
inlier criterion and the metric scale. Pairwise poses are chained into a
common frame over a maximum-weight spanning tree and can be polished with
trimmed ICP on the depth clouds.

A pairwise pose ``(i, j)`` maps camera-i coordinates to camera-j
coordinates, so ``x_j^T E x_i = 0`` with ``E = [t]_x R``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import (
    AmbiguityError,
    ConnectivityError,
    DegeneracyError,
    InsufficientDataError,
    NoConsensusError,
    NumericalError,
    ParameterError,
    ScaleIndeterminateError,
)
from .geometry import CameraIntrinsics, RigidTransform, rotation_angle
from .matching import PersonPair

log = logging.getLogger(__name__)

DEGENERACY_RATIO = 1e-8
MIN_2D = 8
MIN_3D = 3
EXHAUSTIVE_GROUPS = 6
RIGID_QUANTILE = 0.75


@dataclass(eq=False)
class CorrespondenceSet:
    """Per-joint correspondences between two views.

    Row ``n`` pairs pixel ``x_i[n]`` with ``x_j[n]``; ``P_i``/``P_j`` hold the
    depth-lifted camera-frame points, NaN where either lift is missing.
    ``frame``, ``identity`` and ``joint`` record where each row came from.
    """

    x_i: np.ndarray
    x_j: np.ndarray
    P_i: np.ndarray
    P_j: np.ndarray
    identity: np.ndarray
    joint: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        self.x_i = np.asarray(self.x_i, dtype=np.float64).reshape(-1, 2)
        self.x_j = np.asarray(self.x_j, dtype=np.float64).reshape(-1, 2)
        n = len(self.x_i)
        self.P_i = np.asarray(self.P_i, dtype=np.float64).reshape(n, 3)
        self.P_j = np.asarray(self.P_j, dtype=np.float64).reshape(n, 3)
        self.identity = np.asarray(self.identity, dtype=int).reshape(n)
        self.joint = np.asarray(self.joint, dtype=int).reshape(n)
        self.frame = np.asarray(self.frame, dtype=int).reshape(n)
        if len(self.x_j) != n:
            raise ParameterError("x_i and x_j differ in length")

    def __len__(self):
        return len(self.x_i)

    @property
    def has3d(self) -> np.ndarray:
        return np.isfinite(self.P_i).all(1) & np.isfinite(self.P_j).all(1)

    @property
    def groups(self) -> np.ndarray:
        """Group id per row: one group per (frame, identity)."""
        keys = self.frame.astype(np.int64) * 1_000_003 + self.identity
        _, inv = np.unique(keys, return_inverse=True)
        return inv.reshape(-1)

    def provenance(self, mask=None) -> set[tuple[int, int, int]]:
        idx = np.arange(len(self)) if mask is None else np.flatnonzero(mask)
        return {(int(self.frame[n]), int(self.identity[n]), int(self.joint[n])) for n in idx}

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.x_i[mask], self.x_j[mask], self.P_i[mask], self.P_j[mask],
            self.identity[mask], self.joint[mask], self.frame[mask],
        )

    def swapped(self) -> "CorrespondenceSet":
        """The same set seen from view j to view i."""
        return CorrespondenceSet(self.x_j, self.x_i, self.P_j, self.P_i, self.identity, self.joint, self.frame)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        z = np.zeros((0,))
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)), z, z, z)

    @classmethod
    def concatenate(cls, sets: list["CorrespondenceSet"]) -> "CorrespondenceSet":
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                     ("x_i", "x_j", "P_i", "P_j", "identity", "joint", "frame")))

    @classmethod
    def from_person_pairs(cls, pairs: list[PersonPair], view_i: int, view_j: int, frame: int = 0) -> "CorrespondenceSet":
        """Rows for every joint visible in 2D in both views of the ``(view_i, view_j)`` pairs."""
        rows = []
        for pp in pairs:
            if (pp.view_i, pp.view_j) != (view_i, view_j):
                continue
            s_i, s_j = pp.skeletons2d
            l_i, l_j = pp.skeletons3d
            for d in np.flatnonzero(s_i.valid & s_j.valid):
                P_i = l_i.joints[d] if l_i is not None and l_i.valid[d] else np.full(3, np.nan)
                P_j = l_j.joints[d] if l_j is not None and l_j.valid[d] else np.full(3, np.nan)
                rows.append((s_i.joints[d], s_j.joints[d], P_i, P_j, pp.k, d))
        if not rows:
            return cls.empty()
        x_i, x_j, P_i, P_j, k, d = zip(*rows)
        return cls(np.array(x_i), np.array(x_j), np.array(P_i), np.array(P_j), k, d, np.full(len(rows), frame))


@dataclass(eq=False)
class EssentialEstimate:
    E: np.ndarray
    pose: RigidTransform
    inliers: np.ndarray
    algebraic: float = 0.0
    angle: float = 0.0
    kabsch: RigidTransform | None = None

    @property
    def residual(self) -> float:
        return self.algebraic + self.angle

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def _to_normalized(pts, intr: CameraIntrinsics | None) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts if intr is None else intr.normalize(pts)


def _hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(0)
    d = np.sqrt(((pts - c) ** 2).sum(1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    h = np.column_stack([pts, np.ones(len(pts))]) @ T.T
    return h, T


def _homog(pts: np.ndarray) -> np.ndarray:
    return np.column_stack([pts, np.ones(len(pts))])


def epipolar_residuals(E: np.ndarray, n_i: np.ndarray, n_j: np.ndarray) -> np.ndarray:
    """Signed algebraic residuals ``x_j^T E x_i`` on normalized coordinates."""
    return np.einsum("na,ab,nb->n", _homog(n_j), E, _homog(n_i))


def essential_from_pose(R, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    return tx @ np.asarray(R, dtype=np.float64)


def _solve_essential(n_i: np.ndarray, n_j: np.ndarray) -> np.ndarray:
    if len(n_i) < MIN_2D:
        raise InsufficientDataError(f"eight-point needs >= {MIN_2D} correspondences, got {len(n_i)}")
    h_i, T_i = _hartley(n_i)
    h_j, T_j = _hartley(n_j)
    A = (h_j[:, :, None] * h_i[:, None, :]).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if s[7] <= DEGENERACY_RATIO * s[0]:
        raise DegeneracyError("correspondences do not determine the essential matrix (rank-deficient system)")
    F = Vt[-1].reshape(3, 3)
    E = T_j.T @ F @ T_i
    U, S, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    E /= np.linalg.norm(E)
    # fix the sign so the same data always yield the same matrix
    flat = E.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        E = -E
    return E


def _triangulate_depths(R, t, n_i, n_j):
    """Depths of each correspondence along both rays (midpoint least squares)."""
    d_i = _homog(n_i)
    d_j = _homog(n_j)
    a = d_i @ R.T  # R d_i
    # solve [a, -d_j] [l_i, l_j]^T = -t per row
    aa = (a * a).sum(1)
    bb = (d_j * d_j).sum(1)
    ab = (a * d_j).sum(1)
    at = a @ t
    bt = d_j @ t
    det = aa * bb - ab * ab
    with np.errstate(divide="ignore", invalid="ignore"):
        l_i = (-at * bb + ab * bt) / det
        l_j = (aa * bt - ab * at) / det
    return l_i, l_j


def decompose_essential(E, x_i, x_j, intr_i: CameraIntrinsics | None = None, intr_j: CameraIntrinsics | None = None) -> RigidTransform:
    """Pick the ``(R, t)`` among the four decompositions of ``E`` by cheirality vote.

    Returns a transform with unit translation and ``scale == 1``.

    Raises:
        AmbiguityError: when two candidates tie for the most points in front.
    """
    n_i = _to_normalized(x_i, intr_i)
    n_j = _to_normalized(x_j, intr_j)
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    cands = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for sign in (1.0, -1.0):
            l_i, l_j = _triangulate_depths(R, sign * t, n_i, n_j)
            votes = int(np.sum((l_i > 0) & (l_j > 0)))
            cands.append((votes, R, sign * t))
    votes = [c[0] for c in cands]
    best = max(votes)
    if votes.count(best) > 1:
        raise AmbiguityError(f"cheirality vote tied: {votes}")
    _, R, t = cands[votes.index(best)]
    return RigidTransform.from_rotation(R, t / np.linalg.norm(t))


def eight_point(x_i, x_j, intr_i: CameraIntrinsics | None = None, intr_j: CameraIntrinsics | None = None) -> EssentialEstimate:
    """Essential matrix from pixel correspondences.

    Pixels are mapped to normalized coordinates with the intrinsics (pass
    ``None`` if they already are normalized), Hartley-normalized, solved
    by SVD and projected onto the essential manifold with unit Frobenius
    norm.

    Raises:
        InsufficientDataError: fewer than 8 correspondences.
        DegeneracyError: the linear system has a null space of dimension > 1.
    """
    n_i = _to_normalized(x_i, intr_i)
    n_j = _to_normalized(x_j, intr_j)
    E = _solve_essential(n_i, n_j)
    pose = decompose_essential(E, n_i, n_j)
    r = epipolar_residuals(E, n_i, n_j)
    return EssentialEstimate(E, pose, np.ones(len(n_i), bool), float(np.sqrt(np.mean(r * r))))


def kabsch(P_i, P_j) -> RigidTransform:
    """Least-squares rotation and translation with ``R P_i + t ~ P_j``.

    Raises:
        DegeneracyError: fewer than 3 points, or the points are collinear.
    """
    P_i = np.asarray(P_i, dtype=np.float64).reshape(-1, 3)
    P_j = np.asarray(P_j, dtype=np.float64).reshape(-1, 3)
    if len(P_i) != len(P_j):
        raise ParameterError("point sets differ in length")
    if len(P_i) < MIN_3D:
        raise DegeneracyError(f"kabsch needs >= {MIN_3D} point pairs, got {len(P_i)}")
    c_i = P_i.mean(0)
    c_j = P_j.mean(0)
    X = P_i - c_i
    Y = P_j - c_j
    sx = np.linalg.svd(X, compute_uv=False)
    sy = np.linalg.svd(Y, compute_uv=False)
    if sx[1] <= 1e-9 * max(sx[0], 1e-300) or sy[1] <= 1e-9 * max(sy[0], 1e-300):
        raise DegeneracyError("point set is collinear or coincident")
    H = X.T @ Y
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    R = V @ U.T
    if np.linalg.det(R) < 0:
        V[:, 2] *= -1
        R = V @ U.T
    return RigidTransform.from_rotation(R, c_j - R @ c_i)


def robust_kabsch(P_i, P_j, k: float = 3.0, rounds: int = 3) -> RigidTransform:
    """Kabsch refit without pairs whose residual exceeds ``k`` times the median.

    Depth lifts that miss the body (background or an occluder) are off by
    metres and would otherwise dominate the fit.
    """
    P_i = np.asarray(P_i, dtype=np.float64).reshape(-1, 3)
    P_j = np.asarray(P_j, dtype=np.float64).reshape(-1, 3)
    K = kabsch(P_i, P_j)
    keep = np.ones(len(P_i), bool)
    for _ in range(rounds):
        r = np.linalg.norm(K.apply(P_i) - P_j, axis=1)
        nxt = r <= k * np.median(r) + 1e-9 * max(float(np.abs(P_j).max()), 1.0)
        if nxt.sum() < MIN_3D or np.array_equal(nxt, keep):
            break
        try:
            K = kabsch(P_i[nxt], P_j[nxt])
        except DegeneracyError:
            break
        keep = nxt
    return K


def rotation_discrepancy(R, R_prime) -> float:
    """``arccos(tr(R R'^T)/2 - 0.5)`` with the argument clamped to [-1, 1].

    The trace is summed with ``math.fsum`` so the value does not depend on
    summation order (swapping views and transposing gives the same bits).
    """
    tr = math.fsum((np.asarray(R) * np.asarray(R_prime)).ravel().tolist())
    return math.acos(min(1.0, max(-1.0, tr / 2.0 - 0.5)))


def _translation_given_rotation(R, n_i, n_j) -> tuple[np.ndarray, float]:
    """Unit ``t`` minimizing the epipolar residuals for a fixed rotation, and their RMS."""
    # x_j^T [t]x R x_i = t . (R x_i x x_j)
    rows = np.cross(_homog(n_i) @ R.T, _homog(n_j))
    _, s, Vt = np.linalg.svd(rows, full_matrices=False)
    # E = [t]x R has Frobenius norm sqrt(2) for unit t; report at unit norm
    return Vt[-1], float(s[-1] / math.sqrt(2.0 * len(n_i)))


def guided_essential(n_i, n_j, R_prime, R_init=None) -> tuple[EssentialEstimate, float]:
    """Essential matrix minimizing RMS algebraic error plus the angle to ``R_prime``.

    The rotation is searched as ``exp(w) R_prime``; for each rotation the
    translation direction is solved in closed form, so the search runs
    over three parameters. Starts from ``w = 0`` and from ``R_init``.

    Returns:
        The estimate (unit translation, cheirality-resolved) and its angle term.
    """
    n_i = np.asarray(n_i, dtype=np.float64)
    n_j = np.asarray(n_j, dtype=np.float64)
    if len(n_i) < MIN_2D:
        raise InsufficientDataError(f"need >= {MIN_2D} correspondences, got {len(n_i)}")
    R_prime = np.asarray(R_prime, dtype=np.float64)

    def rot(w):
        return Rotation.from_rotvec(w).as_matrix() @ R_prime

    def objective(w):
        return _translation_given_rotation(rot(w), n_i, n_j)[1] + float(np.linalg.norm(w))

    # f = g(w) + |w| with smooth g: w = 0 is a local minimum when |grad g(0)| <= 1
    h = 1e-6
    g0 = _translation_given_rotation(R_prime, n_i, n_j)[1]
    grad = np.array([(_translation_given_rotation(rot(h * e), n_i, n_j)[1] - g0) / h for e in np.eye(3)])
    if np.linalg.norm(grad) < 1.0 - 1e-3:
        return _finish_guided(R_prime, n_i, n_j), 0.0
    starts = [np.zeros(3)]
    if R_init is not None:
        starts.append(Rotation.from_matrix(np.asarray(R_init) @ R_prime.T).as_rotvec())
    w0 = min(starts, key=objective)
    simplex = np.vstack([w0, w0 + 1e-2 * np.eye(3)])
    res = minimize(objective, w0, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": 1e-9, "fatol": 1e-12, "maxiter": 2000})
    w = res.x if res.fun < objective(w0) else w0
    R = rot(w)
    return _finish_guided(R, n_i, n_j), rotation_discrepancy(R, R_prime)


def _finish_guided(R, n_i, n_j) -> EssentialEstimate:
    t, alg = _translation_given_rotation(R, n_i, n_j)
    votes = []
    for sign in (1.0, -1.0):
        l_i, l_j = _triangulate_depths(R, sign * t, n_i, n_j)
        votes.append(int(np.sum((l_i > 0) & (l_j > 0))))
    if votes[0] == votes[1]:
        raise AmbiguityError(f"cheirality vote tied: {votes}")
    t = t if votes[0] > votes[1] else -t
    E = essential_from_pose(R, t) / math.sqrt(2.0)
    pose = RigidTransform.from_rotation(R, t)
    return EssentialEstimate(E, pose, np.ones(len(n_i), bool), alg)


# ---------------------------------------------------------------------------
# depth-guided selection
# ---------------------------------------------------------------------------


@dataclass
class _Fit:
    est: EssentialEstimate
    scores: np.ndarray  # per row of the full set, NaN outside the selection
    rigid: float = 0.0  # upper-quartile relative Kabsch residual of the selected 3D pairs


def _fit(n_i, n_j, corr: CorrespondenceSet, mask: np.ndarray, refine: bool = True) -> _Fit:
    m3 = mask & corr.has3d
    if mask.sum() < MIN_2D or m3.sum() < MIN_3D:
        raise NoConsensusError(f"selection too small: {int(mask.sum())} 2D / {int(m3.sum())} 3D pairs")
    est = eight_point(n_i[mask], n_j[mask])
    K = robust_kabsch(corr.P_i[m3], corr.P_j[m3])
    angle = rotation_discrepancy(est.pose.rotation, K.rotation)
    if refine:
        est, angle = guided_essential(n_i[mask], n_j[mask], K.rotation, est.pose.rotation)
    full = np.zeros(len(corr), bool)
    full[mask] = True
    est = EssentialEstimate(est.E, est.pose, full, est.algebraic, angle, K)
    alg = np.abs(epipolar_residuals(est.E, n_i, n_j))
    scores = alg.copy()
    h3 = corr.has3d
    pred = K.apply(np.nan_to_num(corr.P_i[h3]))
    rel = np.full(len(corr), np.nan)
    rel[h3] = np.linalg.norm(pred - corr.P_j[h3], axis=1) / np.maximum(np.linalg.norm(corr.P_j[h3], axis=1), 1.0)
    scores[h3] += rel[h3]
    scores[~mask] = np.nan
    return _Fit(est, scores, float(np.quantile(rel[m3], RIGID_QUANTILE)))


def _try_fit(n_i, n_j, corr, mask, refine: bool = True) -> _Fit | None:
    try:
        return _fit(n_i, n_j, corr, mask, refine)
    except NumericalError:
        return None


def _greedy_drop(n_i, n_j, corr, fit: _Fit, threshold: float) -> _Fit:
    """Drop the worst pair while the residual is above threshold and keeps falling."""
    while fit.est.residual >= threshold:
        mask = fit.est.inliers.copy()
        mask[int(np.nanargmax(fit.scores))] = False
        nxt = _try_fit(n_i, n_j, corr, mask)
        if nxt is None or not nxt.est.residual < fit.est.residual:
            break
        fit = nxt
    return fit


def _mad_gate(n_i, n_j, corr, fit: _Fit, threshold: float, k: float = 5.0, refine: bool = True) -> _Fit:
    s = fit.scores[fit.est.inliers]
    med = np.median(s)
    mad = 1.4826 * np.median(np.abs(s - med))
    bound = max(threshold, med + k * mad)
    drop = fit.est.inliers & (fit.scores > bound)
    if not drop.any():
        return fit
    nxt = _try_fit(n_i, n_j, corr, fit.est.inliers & ~drop, refine)
    return fit if nxt is None else nxt


def _purge_groups(n_i, n_j, corr, fit: _Fit) -> _Fit:
    """Reject every pair of a group that lost more than half of its pairs.

    The survivors of a mostly rejected identity are a wrong match that
    happens to fit, not a correct one.
    """
    groups = corr.groups
    drop = np.zeros(len(corr), bool)
    for g in np.unique(groups):
        m = groups == g
        if 2 * int((fit.est.inliers & m).sum()) < int(m.sum()):
            drop |= m
    if not (fit.est.inliers & drop).any():
        return fit
    nxt = _try_fit(n_i, n_j, corr, fit.est.inliers & ~drop)
    return fit if nxt is None else nxt


def _group_candidates(n_i, n_j, corr, base: np.ndarray):
    """Fits over subsets of (frame, identity) groups.

    A wrong cross-view match corrupts every joint of an identity at once,
    and with several swaps most identities of a pair can be wrong, so no
    majority is assumed. Up to ``EXHAUSTIVE_GROUPS`` groups every subset is
    tried; beyond that the group with the worst mean pair score is removed
    one at a time.
    """
    groups = corr.groups
    ids = np.unique(groups[base])
    G = len(ids)
    out = []
    if G <= EXHAUSTIVE_GROUPS:
        for size in range(G - 1, 0, -1):
            for keep in itertools.combinations(ids, size):
                fit = _try_fit(n_i, n_j, corr, base & np.isin(groups, keep))
                if fit is not None:
                    out.append(fit)
        return out
    keep = list(ids)
    fit = _try_fit(n_i, n_j, corr, base)
    while fit is not None and len(keep) > 1:
        worst = max(keep, key=lambda g: float(np.nanmean(fit.scores[groups == g])))
        keep.remove(worst)
        fit = _try_fit(n_i, n_j, corr, base & np.isin(groups, keep))
        if fit is not None:
            out.append(fit)
    return out


def depth_guided_pose(
    corr: CorrespondenceSet,
    intr_i: CameraIntrinsics | None,
    intr_j: CameraIntrinsics | None,
    threshold: float = 0.01,
) -> EssentialEstimate:
    """Relative pose whose eight-point solution agrees with the depth-derived rotation.

    The combined residual is the RMS algebraic epipolar error (normalized
    coordinates) of the selected pairs plus the angle between the
    essential-decomposed rotation and the Kabsch rotation of the selected
    3D pairs. The selection maximizes the number of pairs subject to that
    residual falling below ``threshold``:

    1. if every pair passes, return the plain eight-point fit minus
       isolated outliers (the median/MAD gate of step 4);
    2. otherwise build candidates: the full set after per-pair pruning
       (step 4), and fits on subsets of whole identities, since a wrong
       cross-view match corrupts every joint of an identity at once;
    3. keep the largest candidate whose residual is within
       ``max(threshold, 2 * best)``;
    4. prune it: drop the worst pair while the residual stays above
       threshold and strictly decreases, then remove isolated outliers
       with a median/MAD gate.

    Raises:
        NoConsensusError: no selection keeps 8 pairs with 2D and 3 with 3D.
    """
    n_i = _to_normalized(corr.x_i, intr_i)
    n_j = _to_normalized(corr.x_j, intr_j)
    base = np.ones(len(corr), bool)
    plain = _try_fit(n_i, n_j, corr, base, refine=False)
    if plain is not None and plain.est.residual < threshold:
        return _mad_gate(n_i, n_j, corr, plain, threshold, refine=False).est
    full = _try_fit(n_i, n_j, corr, base)

    cands = []
    if full is not None:
        cands.append(_mad_gate(n_i, n_j, corr, _greedy_drop(n_i, n_j, corr, full, threshold), threshold))
    cands += _group_candidates(n_i, n_j, corr, base)
    if not cands:
        raise NoConsensusError(
            f"no consensus: {len(corr)} pairs ({int(corr.has3d.sum())} with depth) admit no valid fit"
        )
    r_best = min(c.est.residual for c in cands)
    g_best = min(c.rigid for c in cands)
    bound = max(threshold, 2.0 * r_best)
    g_bound = max(threshold, 2.0 * g_best)
    # both bounds together; relaxed jointly when no candidate meets them
    excess = [max(c.est.residual / bound, c.rigid / g_bound) for c in cands]
    relax = max(1.0, min(excess))
    ok = [c for c, x in zip(cands, excess) if x <= relax]
    chosen = max(ok, key=lambda c: (c.est.inlier_count, -c.est.residual))
    if chosen is not cands[0] or full is None:
        chosen = _greedy_drop(n_i, n_j, corr, chosen, threshold)
        chosen = _mad_gate(n_i, n_j, corr, chosen, threshold)
    return _purge_groups(n_i, n_j, corr, chosen).est


def resolve_scale(estimate: EssentialEstimate, corr: CorrespondenceSet, min_baseline: float = 1.0) -> RigidTransform:
    """Metric pose: the unit translation scaled by the Kabsch translation norm.

    Raises:
        ScaleIndeterminateError: the depth-derived baseline is under ``min_baseline`` mm.
    """
    m3 = estimate.inliers & corr.has3d
    if m3.sum() < MIN_3D:
        raise ScaleIndeterminateError(f"only {int(m3.sum())} inlier pairs carry depth")
    K = kabsch(corr.P_i[m3], corr.P_j[m3])
    norm = float(np.linalg.norm(K.translation))
    if norm < min_baseline:
        raise ScaleIndeterminateError(f"depth-derived baseline {norm:.3g} mm is below {min_baseline} mm")
    t = np.asarray(estimate.pose.translation)
    t = t / np.linalg.norm(t)
    if np.dot(t, K.translation) < 0:
        t = -t
    return RigidTransform(estimate.pose.rotation, norm * t, 1.0)


def scale_from_depth(corr: CorrespondenceSet, mask=None) -> RigidTransform:
    """Plain Kabsch pose on all (or masked) 3D pairs."""
    m = corr.has3d if mask is None else (corr.has3d & mask)
    return kabsch(corr.P_i[m], corr.P_j[m])


# ---------------------------------------------------------------------------
# global frame
# ---------------------------------------------------------------------------


@dataclass
class ChainResult:
    poses: dict[int, RigidTransform]
    tree_edges: list[tuple[int, int]]
    cycle_residuals: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)


def _edge(pairwise, a, b) -> RigidTransform:
    """Transform camera a -> camera b from whichever direction is stored."""
    if (a, b) in pairwise:
        return pairwise[(a, b)]
    return pairwise[(b, a)].inverse()


def triangle_support(
    pairwise: dict[tuple[int, int], RigidTransform], rotation_tol: float = 3.0, translation_tol: float = 0.1
) -> dict[tuple[int, int], int]:
    """Number of closed triangles in which each edge is cycle-consistent.

    Triangle ``(a, b, c)`` is consistent when ``T_bc ∘ T_ab`` matches
    ``T_ac`` within ``rotation_tol`` degrees and ``translation_tol`` times
    the mean baseline of the three edges. A pose from mismatched people
    rarely closes a loop with two other pairs.
    """
    views = sorted({v for e in pairwise for v in e})
    support = {e: 0 for e in pairwise}
    have = {frozenset(e) for e in pairwise}
    for a, b, c in itertools.combinations(views, 3):
        if not {frozenset((a, b)), frozenset((b, c)), frozenset((a, c))} <= have:
            continue
        T_ab, T_bc, T_ac = _edge(pairwise, a, b), _edge(pairwise, b, c), _edge(pairwise, a, c)
        D = T_bc.compose(T_ab).compose(T_ac.inverse())
        base = np.mean([np.linalg.norm(T.translation) for T in (T_ab, T_bc, T_ac)])
        if np.degrees(rotation_angle(D.rotation)) <= rotation_tol and np.linalg.norm(D.translation) <= translation_tol * base:
            for e in ((a, b), (b, c), (a, c)):
                support[e if e in support else (e[1], e[0])] += 1
    return support


def chain_poses(
    pairwise: dict[tuple[int, int], RigidTransform],
    anchor: int = 0,
    weights: dict[tuple[int, int], float] | None = None,
    views: list[int] | None = None,
) -> ChainResult:
    """World (= anchor camera) to camera poses along a maximum-weight spanning tree.

    Non-tree edges report their cycle residual ``(angle rad, translation mm)``
    of ``T_ij ∘ W_i ∘ W_j^-1``, which is the identity for a consistent graph.

    Raises:
        ConnectivityError: some view cannot be reached from the anchor.
    """
    g = nx.Graph()
    nodes = sorted(set(views or []) | {anchor} | {v for e in pairwise for v in e})
    g.add_nodes_from(nodes)
    for e in sorted(pairwise):
        a, b = e
        w = 1.0 if weights is None else float(weights.get(e, 1.0))
        g.add_edge(min(a, b), max(a, b), weight=w)
    comps = list(nx.connected_components(g))
    if len(comps) > 1:
        raise ConnectivityError(sorted(comps, key=min))
    tree = nx.maximum_spanning_tree(g, algorithm="kruskal")
    poses = {anchor: RigidTransform.identity()}
    tree_edges = []
    for parent, child in nx.bfs_edges(tree, anchor, sort_neighbors=sorted):
        poses[child] = _edge(pairwise, parent, child).compose(poses[parent])
        tree_edges.append((parent, child))
    residuals = {}
    tset = {frozenset(e) for e in tree_edges}
    for a, b in sorted(pairwise):
        if frozenset((a, b)) in tset:
            continue
        D = pairwise[(a, b)].compose(poses[a]).compose(poses[b].inverse())
        residuals[(a, b)] = (rotation_angle(D.rotation), float(np.linalg.norm(D.translation)))
    return ChainResult(poses, tree_edges, residuals)


# ---------------------------------------------------------------------------
# trimmed ICP
# ---------------------------------------------------------------------------


def voxel_downsample(points: np.ndarray, voxel: float = 50.0) -> np.ndarray:
    """Centroid of the points in each occupied voxel, in voxel-key order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def _trimmed_matches(src_world, tree, target, trim_fraction):
    dist, idx = tree.query(src_world)
    keep = max(MIN_3D, int(math.ceil(len(dist) * (1.0 - trim_fraction))))
    order = np.argsort(dist, kind="stable")[:keep]
    return order, target[idx[order]], float(dist[order].mean())


def _icp_residual(clouds, poses, views, anchor, trim_fraction) -> float:
    world = {v: poses[v].inverse().apply(clouds[v]) for v in views}
    res = []
    for v in views:
        if v == anchor:
            continue
        target = np.concatenate([world[u] for u in views if u != v])
        _, _, r = _trimmed_matches(world[v], cKDTree(target), target, trim_fraction)
        res.append(r)
    return float(np.mean(res)) if res else 0.0


@dataclass
class IcpResult:
    poses: dict[int, RigidTransform]
    residual: float
    initial_residual: float
    iterations: int


def icp_refine(
    clouds: dict[int, np.ndarray],
    initial: dict[int, RigidTransform],
    anchor: int = 0,
    trim_fraction: float = 0.2,
    max_iter: int = 30,
    tol: float = 0.01,
) -> IcpResult:
    """Trimmed point-to-point ICP of every non-anchor view against the others.

    Each iteration snapshots all views' clouds in the world frame, then for
    every non-anchor view matches its points to the union of the other
    views, discards the worst ``trim_fraction`` of matches and re-solves
    its camera-to-world transform with Kabsch. The anchor stays fixed.
    The lowest-residual state seen is returned, so the result is never
    worse than the input.

    Args:
        clouds: camera-frame point samples per view, already subsampled.
        initial: world-to-camera poses per view.
    """
    if not 0.0 <= trim_fraction < 1.0:
        raise ParameterError(f"trim_fraction must be in [0, 1), got {trim_fraction}")
    views = sorted(clouds)
    if set(views) != set(initial) or anchor not in clouds:
        raise ParameterError("clouds and initial poses must cover the same views, including the anchor")
    for v in views:
        if len(clouds[v]) < MIN_3D:
            raise ParameterError(f"view {v} has an empty or near-empty cloud")
    poses = dict(initial)
    best_poses = dict(poses)
    best = first = _icp_residual(clouds, poses, views, anchor, trim_fraction)
    prev = first
    it = 0
    for it in range(1, max_iter + 1):
        world = {v: poses[v].inverse().apply(clouds[v]) for v in views}
        new = dict(poses)
        for v in views:
            if v == anchor:
                continue
            target = np.concatenate([world[u] for u in views if u != v])
            order, matched, _ = _trimmed_matches(world[v], cKDTree(target), target, trim_fraction)
            try:
                cam_to_world = kabsch(clouds[v][order], matched)
            except DegeneracyError:
                continue
            new[v] = cam_to_world.inverse()
        poses = new
        cur = _icp_residual(clouds, poses, views, anchor, trim_fraction)
        if cur < best:
            best, best_poses = cur, dict(poses)
        if abs(prev - cur) < tol:
            break
        prev = cur
    return IcpResult(best_poses, best, first, it)
