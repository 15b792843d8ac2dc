"""Independent reference implementations used as test oracles.

None of these share code with the package; they are deliberately slow
and obvious.
"""

from __future__ import annotations

import itertools

import numpy as np


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost over every valid one-view assignment.

    Each row (detection) takes a distinct column (cluster). With more rows
    than columns exactly ``K`` rows are assigned, the rest stay out.
    """
    n, k = cost.shape
    best = np.inf
    if n <= k:
        for cols in itertools.permutations(range(k), n):
            best = min(best, sum(cost[r, c] for r, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), k):
            best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return float(best)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def angle_between(R_a: np.ndarray, R_b: np.ndarray) -> float:
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def camera_pair_points(rng: np.random.Generator, n: int):
    """Random relative pose and points visible in both cameras.

    Returns ``(R, t, X_i, X_j)`` with ``X_j = R X_i + t`` and every point at
    positive depth in both frames.
    """
    while True:
        R = random_rotation(rng)
        # keep the second camera facing roughly the same way
        if np.degrees(angle_between(R, np.eye(3))) > 60:
            continue
        t = rng.normal(size=3)
        t /= np.linalg.norm(t)
        X_i = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(4, 8, n)])
        X_j = X_i @ R.T + t
        if np.all(X_j[:, 2] > 0.5):
            return R, t, X_i, X_j


def naive_dlt(P1: np.ndarray, P2: np.ndarray, x1, x2) -> np.ndarray:
    """Textbook homogeneous DLT with 3x4 projection matrices on normalized coordinates."""
    A = np.array([
        x1[0] * P1[2] - P1[0],
        x1[1] * P1[2] - P1[1],
        x2[0] * P2[2] - P2[0],
        x2[1] * P2[2] - P2[1],
    ])
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    return X[:3] / X[3]
