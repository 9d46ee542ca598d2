"""Pivot selection, cluster refinement vs set-algebra oracle, decay schedules."""

import math

import numpy as np
import pytest

from calr.core import OUTLIER, ClusterAssignment, RngState, l2_normalize_rows, pairwise_distance
from calr.refine import (
    PivotScore,
    RefinementPlan,
    Schedule,
    decay_probability,
    governing_pivot,
    pivot_scores,
    refine_assignment,
    refine_cluster,
)


def scores_from_points(points):
    pts = np.asarray(points, dtype=np.float64)[:, None]
    return pivot_scores(pairwise_distance(pts))


class TestPivotScores:
    def test_worked_example_values(self):
        got = scores_from_points([0.0, 1.0, 2.0, 4.0])
        expect = [
            6 / 19 + 6 / 25 + 6 / 37,
            2 * (6 / 19) + 6 / 31,
            6 / 19 + 6 / 25 + 6 / 25,
            6 / 37 + 6 / 31 + 6 / 25,
        ]
        for pv, want in zip(got, expect):
            assert pv.score == pytest.approx(want, abs=1e-10)
        assert [pv.is_pivot for pv in got] == [False, True, True, False]

    def test_equal_distances_closed_form(self):
        # m points pairwise at distance d: every score is (m-1)/(2d)
        x = np.eye(5) * 3.0  # pairwise distance 3*sqrt(2)
        d = float(np.linalg.norm(x[0] - x[1]))
        got = pivot_scores(pairwise_distance(x))
        for pv in got:
            assert pv.score == pytest.approx(4 / (2 * d), rel=1e-12)
            assert pv.is_pivot  # all tie at the mean

    def test_singleton_trivial_pivot(self):
        got = pivot_scores(np.zeros((1, 1)), sample_ids=[42])
        assert len(got) == 1 and got[0].is_pivot and got[0].sample_id == 42

    def test_scores_positive_with_neighbors(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pts = rng.normal(size=(rng.integers(2, 30), 4))
            assert all(pv.score > 0 for pv in pivot_scores(pairwise_distance(pts)))

    def test_at_least_one_pivot(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pts = rng.normal(size=(rng.integers(2, 40), 3))
            assert any(pv.is_pivot for pv in pivot_scores(pairwise_distance(pts)))

    def test_top_neighbors_capped_at_15(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(40, 3))
        dist = pairwise_distance(pts)
        got = pivot_scores(dist)
        mean_dist = float(dist[np.triu_indices(40, 1)].mean())
        row = np.sort(np.delete(dist[0], 0))[:15]
        assert got[0].score == pytest.approx(float(np.sum(1.0 / (row + mean_dist))), rel=1e-12)

    def test_nonsquare_rejected(self):
        with pytest.raises(ValueError):
            pivot_scores(np.zeros((2, 3)))


class TestGoverningPivot:
    def test_highest_score_wins(self):
        pivots = [PivotScore(1, 0.5, True), PivotScore(2, 0.9, True)]
        assert governing_pivot(pivots).sample_id == 2

    def test_tie_smallest_id(self):
        pivots = [PivotScore(9, 0.7, True), PivotScore(4, 0.7, True)]
        assert governing_pivot(pivots).sample_id == 4

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            governing_pivot([])


def oracle_refine_p1(member_ids, camera_of, local_of, pivots):
    """Independent set-algebra evaluation of the p=1 refinement."""
    members = set(int(m) for m in member_ids)
    keep = set()
    cams = {int(camera_of[m]) for m in members}
    strong = [pv for pv in pivots if pv.is_pivot]
    for cam in cams:
        group = {m for m in members if camera_of[m] == cam}
        cam_pivots = [pv for pv in strong if camera_of[pv.sample_id] == cam]
        if not cam_pivots:
            keep |= group
            continue
        best = sorted(cam_pivots, key=lambda pv: (-pv.score, pv.sample_id))[0]
        li = {m for m in members if local_of[m] == local_of[best.sample_id] and camera_of[m] == cam}
        keep |= group & li
    return keep


def random_instance(rng):
    n = int(rng.integers(2, 21))
    n_cam = int(rng.integers(1, 5))
    member_ids = np.arange(n)
    camera_of = rng.integers(0, n_cam, size=n)
    local_of = rng.integers(0, 6, size=n)
    scores = rng.random(n)
    thresh = scores.mean()
    pivots = [PivotScore(int(i), float(s), bool(s >= thresh)) for i, s in enumerate(scores)]
    return member_ids, camera_of, local_of, pivots


class TestRefineCluster:
    def test_matches_set_algebra_at_p1(self):
        rng = np.random.default_rng(3)
        for trial in range(200):
            member_ids, camera_of, local_of, pivots = random_instance(rng)
            retained, discarded = refine_cluster(
                member_ids, camera_of, local_of, pivots, 1.0, RngState(trial).generator()
            )
            want = oracle_refine_p1(member_ids, camera_of, local_of, pivots)
            assert set(retained.tolist()) == want
            assert set(discarded.tolist()) == set(member_ids.tolist()) - want

    def test_p0_keeps_everything(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            member_ids, camera_of, local_of, pivots = random_instance(rng)
            retained, discarded = refine_cluster(
                member_ids, camera_of, local_of, pivots, 0.0, RngState(trial).generator()
            )
            assert discarded.size == 0
            assert sorted(retained.tolist()) == member_ids.tolist()

    def test_governing_pivot_never_discarded(self):
        rng = np.random.default_rng(5)
        for trial in range(50):
            member_ids, camera_of, local_of, pivots = random_instance(rng)
            retained, _ = refine_cluster(
                member_ids, camera_of, local_of, pivots, 1.0, RngState(trial).generator()
            )
            kept = set(retained.tolist())
            strong = [pv for pv in pivots if pv.is_pivot]
            for cam in set(camera_of.tolist()):
                cam_pivots = [pv for pv in strong if camera_of[pv.sample_id] == cam]
                if cam_pivots:
                    assert governing_pivot(cam_pivots).sample_id in kept

    def test_retained_discarded_partition_members(self):
        rng = np.random.default_rng(6)
        for trial in range(50):
            member_ids, camera_of, local_of, pivots = random_instance(rng)
            p = float(rng.random())
            retained, discarded = refine_cluster(
                member_ids, camera_of, local_of, pivots, p, RngState(trial).generator()
            )
            both = np.concatenate([retained, discarded])
            assert sorted(both.tolist()) == member_ids.tolist()

    def test_bad_probability_rejected(self):
        member_ids, camera_of, local_of, pivots = random_instance(np.random.default_rng(7))
        with pytest.raises(ValueError):
            refine_cluster(member_ids, camera_of, local_of, pivots, 1.5, RngState(0).generator())

    def test_foreign_pivot_rejected(self):
        with pytest.raises(ValueError, match="not a member"):
            refine_cluster(
                np.array([0, 1]),
                np.array([0, 0, 0]),
                np.array([0, 0, 0]),
                [PivotScore(2, 1.0, True)],
                1.0,
                RngState(0).generator(),
            )


class TestDecay:
    def test_linear_worked_example(self):
        assert decay_probability(Schedule.LINEAR, 10, 50) == pytest.approx(0.8, abs=1e-12)

    def test_exact_formulas(self):
        p0, p1, t, T = 0.9, 0.1, 13, 40
        frac = t / T
        span = p0 - p1
        assert decay_probability(Schedule.NONE, t, T, p0, p1) == p0
        assert decay_probability(Schedule.LINEAR, t, T, p0, p1) == pytest.approx(
            p0 - span * frac, abs=1e-15
        )
        assert decay_probability(Schedule.POLYNOMIAL, t, T, p0, p1) == pytest.approx(
            p1 + span * (1 - frac) ** 2, abs=1e-15
        )
        assert decay_probability(Schedule.EXPONENTIAL, t, T, p0, p1) == pytest.approx(
            p1 + span * math.exp(-5 * frac), abs=1e-15
        )
        assert decay_probability(Schedule.COSINE, t, T, p0, p1) == pytest.approx(
            p1 + 0.5 * span * (1 + math.cos(math.pi * frac)), abs=1e-15
        )

    def test_cosine_endpoints_exact(self):
        assert decay_probability(Schedule.COSINE, 0, 30, 0.7, 0.2) == 0.7
        assert decay_probability(Schedule.COSINE, 30, 30, 0.7, 0.2) == 0.2

    def test_monotone_nonincreasing(self):
        for schedule in Schedule:
            values = [decay_probability(schedule, t, 25) for t in range(26)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_zero_total_returns_start(self):
        for schedule in Schedule:
            assert decay_probability(schedule, 0, 0, 0.6, 0.1) == 0.6

    def test_validation(self):
        with pytest.raises(ValueError):
            decay_probability(Schedule.COSINE, 5, 4)
        with pytest.raises(ValueError):
            decay_probability(Schedule.COSINE, 1, 10, 0.2, 0.5)
        with pytest.raises(ValueError):
            Schedule.from_name("sigmoid")

    def test_parse_names(self):
        assert Schedule.from_name("Cosine") is Schedule.COSINE
        assert decay_probability("linear", 10, 50) == pytest.approx(0.8)


def two_camera_setup(seed=0):
    """Two global clusters over two cameras with disagreeing local labels."""
    rng = np.random.default_rng(seed)
    feats = l2_normalize_rows(rng.normal(size=(12, 6)))
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, OUTLIER])
    camera_of = np.array([0, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 0])
    local_of = np.array([0, 0, 1, 10, 10, 10, 2, 2, 11, 12, 12, 3])
    asg = ClusterAssignment(labels, 2)
    return asg, feats, camera_of, local_of


class TestRefineAssignment:
    def test_discards_become_outliers(self):
        asg, feats, camera_of, local_of = two_camera_setup()
        refined, plan = refine_assignment(
            asg, feats, camera_of, local_of, 1.0, RngState(3).child("refine")
        )
        assert isinstance(plan, RefinementPlan)
        for sid in plan.discarded.tolist():
            assert refined.labels[sid] == OUTLIER
            assert asg.labels[sid] != OUTLIER
        # retained samples keep cluster mates together
        assert refined.non_outlier_mask.sum() + len(plan.discarded) == asg.non_outlier_mask.sum()

    def test_p0_is_identity(self):
        asg, feats, camera_of, local_of = two_camera_setup()
        refined, plan = refine_assignment(
            asg, feats, camera_of, local_of, 0.0, RngState(3).child("refine")
        )
        assert plan.discarded.size == 0
        assert np.array_equal(refined.labels, asg.labels)

    def test_per_cluster_streams_isolated(self):
        # discards inside cluster 0 do not depend on cluster 1's presence
        asg, feats, camera_of, local_of = two_camera_setup()
        solo_labels = asg.labels.copy()
        solo_labels[solo_labels == 1] = OUTLIER
        solo = ClusterAssignment(solo_labels, 1)
        _, plan_full = refine_assignment(
            asg, feats, camera_of, local_of, 0.5, RngState(5).child("refine")
        )
        _, plan_solo = refine_assignment(
            solo, feats, camera_of, local_of, 0.5, RngState(5).child("refine")
        )
        full_c0 = [s for s in plan_full.discarded.tolist() if asg.labels[s] == 0]
        assert full_c0 == plan_solo.discarded.tolist()

    def test_requires_rng_state(self):
        asg, feats, camera_of, local_of = two_camera_setup()
        with pytest.raises(TypeError):
            refine_assignment(asg, feats, camera_of, local_of, 1.0, np.random.default_rng(0))

    def test_discard_ratio_and_counts(self):
        asg, feats, camera_of, local_of = two_camera_setup()
        refined, plan = refine_assignment(
            asg, feats, camera_of, local_of, 1.0, RngState(3).child("refine")
        )
        assert plan.n_considered == 11
        assert plan.discard_ratio == pytest.approx(len(plan.discarded) / 11)
        assert sum(plan.discarded_by_camera.values()) == len(plan.discarded)
        assert plan.n_pivots >= asg.n_clusters  # at least one pivot per cluster
