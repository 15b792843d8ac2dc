from __future__ import annotations

import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvdpose.errors import ParameterError
from mvdpose.geometry import Skeleton2D
from mvdpose.matching import (
    UNASSIGNED,
    Assignment,
    Detection,
    assignment_step,
    cluster_features,
    clustering_objective,
    correspondences_from_assignment,
)
from mvdpose.pipeline import PipelineConfig, match_frame

from conftest import cached_frame
from oracles import brute_force_assignment_cost


def _det(view, index, feature, joints=13):
    return Detection(view, index, Skeleton2D(np.zeros((joints, 2)), np.ones(joints, bool)), feature)


def _labelled_scene(rng, views=4, people=3, sigma=0.01, dim=16):
    centroids = rng.normal(size=(people, dim))
    centroids /= np.linalg.norm(centroids[0] - centroids[1])
    dets, truth = [], {}
    for v in range(views):
        for n, k in enumerate(rng.permutation(people)):
            dets.append(_det(v, n, centroids[k] + rng.normal(0, sigma, dim)))
            truth[(v, n)] = int(k)
    return dets, truth


def _same_partition(a: dict, b: dict) -> bool:
    keys = sorted(a)
    return all((a[p] == a[q]) == (b[p] == b[q]) for p, q in itertools.combinations(keys, 2))


# -- assignment step -----------------------------------------------------------


def test_assignment_step_diagonal():
    feats = np.array([[0.0], [np.sqrt(5.0)]])
    cents = np.array([[0.0], [np.sqrt(5.0)]])
    labels = assignment_step(feats, np.array([0, 0]), cents)
    assert labels.tolist() == [0, 1]


def test_assignment_step_tie_breaks_to_lowest_cluster():
    feats = np.zeros((2, 3))
    cents = np.zeros((3, 3))
    assert assignment_step(feats, np.array([0, 0]), cents).tolist() == [0, 1]
    assert assignment_step(feats[:1], np.array([0]), cents).tolist() == [0]


def test_assignment_step_surplus_rows_unassigned():
    feats = np.array([[0.0], [10.0], [0.1]])
    cents = np.array([[0.0]])
    labels = assignment_step(feats, np.array([0, 0, 0]), cents)
    assert labels.tolist() == [0, UNASSIGNED, UNASSIGNED]


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_assignment_step_matches_enumeration(n, k, seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, 3))
    cents = rng.normal(size=(k, 3))
    labels = assignment_step(feats, np.zeros(n, int), cents)
    cost = ((feats[:, None] - cents[None]) ** 2).sum(-1)
    got = sum(cost[r, c] for r, c in enumerate(labels) if c >= 0)
    assert got == pytest.approx(brute_force_assignment_cost(cost), abs=1e-12)
    used = labels[labels >= 0]
    assert len(set(used.tolist())) == len(used) == min(n, k)


# -- clustering ----------------------------------------------------------------


def test_cluster_recovers_identities():
    rng = np.random.default_rng(7)
    dets, truth = _labelled_scene(rng)
    assignment, clusters = cluster_features(dets, 3, seed=0)
    assert _same_partition(assignment.labels, truth)
    assert assignment.check(num_views=4)
    assert clusters.objective == pytest.approx(
        clustering_objective(np.stack([d.feature for d in dets]),
                             np.array([assignment.labels[d.key] for d in dets]), clusters.centroids))


def test_cluster_single_cluster():
    dets = [_det(v, 0, np.random.default_rng(v).normal(size=4)) for v in range(3)]
    assignment, _ = cluster_features(dets, 1)
    assert set(assignment.labels.values()) == {0}
    assert len(assignment.labels) == 3


def test_same_view_identical_features_split():
    dets = [_det(0, 0, np.ones(4)), _det(0, 1, np.ones(4))]
    assignment, _ = cluster_features(dets, 2)
    assert assignment.labels[(0, 0)] != assignment.labels[(0, 1)]


def test_cluster_errors_and_empty():
    with pytest.raises(ParameterError):
        cluster_features([_det(0, 0, np.ones(2))], 0)
    assignment, _ = cluster_features([], 3)
    assert assignment.labels == {} and assignment.K == 3


def test_surplus_detection_rejected_with_warning(caplog):
    dets = [_det(0, 0, np.zeros(2)), _det(0, 1, np.ones(2)), _det(1, 0, np.zeros(2))]
    dets[1].score = 0.2
    assignment, _ = cluster_features(dets, 1)
    assert (0, 1) not in assignment.labels
    assert "rejecting" in caplog.text


def test_assignment_dict_round_trip():
    a = Assignment({(0, 1): 0, (1, 0): 0, (1, 1): 1}, 3)
    b = Assignment.from_dict(a.to_dict())
    assert b.labels == a.labels
    assert a.check(2) and not Assignment({(0, 0): 0, (0, 1): 0}, 1).check()


@pytest.mark.invariant
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(2, 4))
def test_em_objective_monotone_and_constraints(seed, K, V):
    rng = np.random.default_rng(seed)
    dets = []
    for v in range(V):
        for n in range(int(rng.integers(0, K + 2))):
            dets.append(_det(v, n, rng.normal(size=5)))
    assignment, clusters = cluster_features(dets, K, seed=seed)
    h = clusters.history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))
    assert assignment.check(num_views=V)


@pytest.mark.invariant
@given(st.integers(0, 10**6))
def test_cluster_deterministic(seed):
    rng = np.random.default_rng(seed)
    dets, _ = _labelled_scene(rng, sigma=0.3)
    a1, c1 = cluster_features(dets, 3, seed=seed)
    a2, c2 = cluster_features(dets, 3, seed=seed)
    assert a1.labels == a2.labels
    np.testing.assert_array_equal(c1.centroids, c2.centroids)


@pytest.mark.invariant
@given(st.integers(0, 10**6))
def test_separable_features_recovered(seed):
    rng = np.random.default_rng(seed)
    # separation 1.0 against per-coordinate noise 0.01 over 16 dims
    dets, truth = _labelled_scene(rng, sigma=0.01)
    assignment, _ = cluster_features(dets, 3, seed=seed)
    assert _same_partition(assignment.labels, truth)


# -- correspondences -----------------------------------------------------------


def test_correspondence_pairs_three_views():
    dets = [_det(v, 0, np.zeros(2)) for v in range(3)]
    a = Assignment({(v, 0): 0 for v in range(3)}, 1)
    pairs = correspondences_from_assignment(a, dets)
    assert [(p.view_i, p.view_j) for p in pairs] == [(0, 1), (0, 2), (1, 2)]


def test_correspondence_single_view_no_pairs():
    a = Assignment({(0, 0): 0}, 1)
    assert correspondences_from_assignment(a, [_det(0, 0, np.zeros(2))]) == []


def test_correspondence_count_on_simulated_scene():
    bundle, _ = cached_frame(seed=2)
    a = match_frame(bundle, PipelineConfig())
    expect = sum(comb(len(a.members(k)), 2) for k in range(a.K))
    assert len(correspondences_from_assignment(a, bundle.detections)) == expect


def test_simulated_clustering_is_exact():
    for seed in range(3):
        bundle, gt = cached_frame(seed=seed)
        a = match_frame(bundle, PipelineConfig())
        assert _same_partition(a.labels, gt.labels)
