from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvdpose.errors import ParameterError
from mvdpose.evaluation import (
    VariantResult,
    ablation_table,
    camera_error,
    pcp,
    select_views,
    sign_test,
    similarity_align,
    variant_config,
)
from mvdpose.geometry import RigidTransform, Skeleton3D, look_at, rotation_about
from mvdpose.pipeline import PipelineConfig
from mvdpose.triangulation import default_prior

from conftest import cached_frame
from oracles import random_rotation

# left/right joint pairs of the 13-joint body
MIRROR = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11]


def _ring(n=4, radius=3000.0):
    return {
        v: look_at([radius * math.cos(2 * math.pi * v / n), radius * math.sin(2 * math.pi * v / n), 1200.0], [0, 0, 900])
        for v in range(n)
    }


def _body(rng, offset=(0.0, 0.0, 0.0)):
    base = np.array([
        [0, 0, 1500], [-200, 0, 1450], [200, 0, 1450], [-220, 0, 1150], [220, 0, 1150],
        [-230, 0, 900], [230, 0, 900], [-120, 0, 950], [120, 0, 950],
        [-120, 0, 520], [120, 0, 520], [-120, 0, 80], [120, 0, 80],
    ], dtype=float)
    return Skeleton3D(base + offset + rng.normal(0, 3, base.shape), np.ones(13, bool))


# -- camera error ----------------------------------------------------------------


def test_camera_error_identity():
    gt = _ring()
    err = camera_error(gt, gt)
    assert err.mean_rotation < 1e-6 and err.mean_translation < 1e-6


def test_camera_error_rotation_about_optical_axis():
    gt = _ring()
    pred = dict(gt)
    pred[2] = RigidTransform(rotation_about([0, 0, 1], math.radians(5.0)) @ gt[2].rotation,
                             rotation_about([0, 0, 1], math.radians(5.0)) @ gt[2].translation)
    err = camera_error(pred, gt, align=False)
    assert err.rotation[2] == pytest.approx(5.0, abs=1e-9)
    assert err.translation[2] == pytest.approx(0.0, abs=1e-9)
    assert err.rotation[0] == pytest.approx(0.0, abs=1e-9)


def test_camera_error_raw_sees_gauge():
    gt = _ring()
    shift = RigidTransform(np.eye(3), [0.0, 0.0, 100.0])
    pred = {v: T.compose(shift) for v, T in gt.items()}
    assert camera_error(pred, gt, align=False).mean_translation == pytest.approx(100.0)
    assert camera_error(pred, gt).mean_translation < 1e-6


def test_camera_error_view_mismatch():
    with pytest.raises(ParameterError):
        camera_error({0: RigidTransform.identity()}, _ring())


@pytest.mark.invariant
@given(st.integers(0, 10**6), st.floats(0.2, 5.0), st.integers(2, 5))
def test_camera_error_gauge_invariant(seed, scale, n):
    rng = np.random.default_rng(seed)
    gt = _ring(n)
    pred = {v: RigidTransform(rotation_about(rng.normal(size=3), 0.02) @ T.rotation, T.translation + rng.normal(0, 20, 3))
            for v, T in gt.items()}
    base = camera_error(pred, gt)
    # world' = S(world); world'->cam = T o S^-1
    S = RigidTransform(random_rotation(rng), rng.normal(0, 1000, 3), scale)
    moved = {v: T.compose(S.inverse()) for v, T in pred.items()}
    again = camera_error(moved, gt)
    for v in gt:
        assert again.rotation[v] == pytest.approx(base.rotation[v], abs=1e-6)
        assert again.translation[v] == pytest.approx(base.translation[v], abs=1e-6)


def test_similarity_align_recovers_transform():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(10, 3))
    Q = random_rotation(rng)
    s, R, b = similarity_align(src, 2.5 * src @ Q.T + [1.0, 2.0, 3.0])
    assert s == pytest.approx(2.5) and np.abs(R - Q).max() < 1e-9
    np.testing.assert_allclose(b, [1.0, 2.0, 3.0], atol=1e-9)


# -- PCP -----------------------------------------------------------------------


def test_pcp_perfect_and_far():
    rng = np.random.default_rng(1)
    gt = [_body(rng), _body(rng, (1500, 0, 0))]
    assert pcp(gt, gt).average == 100.0
    far = [Skeleton3D(s.joints + 5000.0, s.valid) for s in gt]
    assert pcp(far, gt).average == 0.0


def test_pcp_half_the_parts():
    rng = np.random.default_rng(2)
    g = _body(rng)
    p = Skeleton3D(g.joints.copy(), g.valid.copy())
    # elbows break four parts, ankles two more: 6 of 12
    p.joints[[3, 4, 11, 12]] += [0.0, 400.0, 0.0]
    report = pcp([p], [g])
    assert report.average == pytest.approx(50.0)
    assert report.matches == [0]


def test_pcp_invalid_joint_and_missing_actor():
    rng = np.random.default_rng(3)
    g = [_body(rng), _body(rng, (2000, 0, 0))]
    p = Skeleton3D(g[0].joints.copy(), g[0].valid.copy())
    p.valid[5] = False
    report = pcp([p], g)
    assert report.per_actor[0] == pytest.approx(100.0 * 11 / 12)
    assert report.per_actor[1] == 0.0 and report.matches == [0, -1]


def test_pcp_order_of_predictions_irrelevant():
    rng = np.random.default_rng(4)
    g = [_body(rng), _body(rng, (1500, 0, 0)), _body(rng, (0, 1500, 0))]
    p = [Skeleton3D(s.joints + rng.normal(0, 30, s.joints.shape), s.valid) for s in g]
    a, b = pcp(p, g), pcp(p[::-1], g)
    assert a.per_actor == b.per_actor


@pytest.mark.invariant
@given(st.integers(0, 10**6), st.floats(10.0, 300.0))
def test_pcp_left_right_symmetric(seed, noise):
    rng = np.random.default_rng(seed)
    g = [_body(rng)]
    p = [Skeleton3D(g[0].joints + rng.normal(0, noise, (13, 3)), g[0].valid)]
    ref = pcp(p, g).average
    # relabelling left and right in both, or mirroring space, changes nothing
    swap = lambda s: Skeleton3D(s.joints[MIRROR], s.valid[MIRROR])  # noqa: E731
    flip = lambda s: Skeleton3D(s.joints * [-1.0, 1.0, 1.0], s.valid)  # noqa: E731
    assert pcp([swap(p[0])], [swap(g[0])]).average == pytest.approx(ref, abs=1e-9)
    assert pcp([flip(p[0])], [flip(g[0])]).average == pytest.approx(ref, abs=1e-9)


@pytest.mark.invariant
@given(st.integers(0, 10**6))
def test_pcp_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    g = [_body(rng), _body(rng, (1500, 0, 0))]
    p = [Skeleton3D(s.joints + rng.normal(0, 80, s.joints.shape), s.valid) for s in g]
    T = RigidTransform(random_rotation(rng), rng.normal(0, 1000, 3))
    move = lambda s: Skeleton3D(T.apply(s.joints), s.valid)  # noqa: E731
    assert pcp([move(s) for s in p], [move(s) for s in g]).per_actor == pytest.approx(pcp(p, g).per_actor)


def test_pcp_joint_count_mismatch():
    with pytest.raises(ParameterError):
        pcp([Skeleton3D.empty(17)], [Skeleton3D.empty(13)], default_prior())


# -- statistics and helpers ----------------------------------------------------


def test_sign_test_against_binomial_tail():
    a = [3, 4, 5, 6, 7, 8, 9, 1, 2, 2]
    b = [1, 1, 1, 1, 1, 1, 1, 5, 5, 2]
    wins, n, p = sign_test(a, b)
    assert (wins, n) == (7, 9)
    tail = sum(math.comb(9, k) for k in range(7, 10)) / 2**9
    assert p == pytest.approx(tail, rel=1e-12)
    assert sign_test([1, 1], [1, 1]) == (0, 0, 1.0)


def test_select_views_renumbers():
    bundle, gt = cached_frame(seed=0)
    b2, g2 = select_views(bundle, gt, [1, 3])
    assert b2.num_views == 2 and set(g2.poses) == {0, 1}
    assert all(d.view in (0, 1) for d in b2.detections)
    assert set(g2.labels) == {d.key for d in b2.detections}
    np.testing.assert_array_equal(g2.poses[1].rotation, gt.poses[3].rotation)


def test_variant_config():
    base = PipelineConfig(num_people=3)
    assert variant_config("full", base)[0].icp is True
    assert variant_config("no-depth-guide", base)[0].depth_guide is False
    assert variant_config("views=3", base) == (base, 3)
    with pytest.raises(ParameterError):
        variant_config("bogus", base)


def test_ablation_table_means_and_orderings():
    run = {"seeds": [0, 1, 2], "variants": {
        "full": VariantResult([0.1] * 3, [10.0, 12.0, 9.0], [90.0, 95.0, 92.0]),
        "no-ICP": VariantResult([0.2] * 3, [20.0, 11.0, 30.0], [85.0, 96.0, 80.0]),
    }}
    table = ablation_table(run)
    assert table["variants"]["full"]["mean_translation_mm"] == pytest.approx(31.0 / 3)
    # full is more accurate on 2 of 3 seeds and scores higher PCP on 2 of 3
    o = table["orderings"]["full>no-ICP"]
    assert (o["translation_wins"], o["translation_n"]) == (2, 3)
    assert (o["pcp_wins"], o["pcp_n"]) == (2, 3)
    assert table["orderings"]["no-ICP>full"]["translation_wins"] == 1
