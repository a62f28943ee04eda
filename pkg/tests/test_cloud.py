import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpseg.cloud import (
    EgoPose,
    InputLayout,
    Label,
    PointCloud,
    accumulate_frames,
    ball_group,
    farthest_point_sampling,
    knn_group,
    localize,
    normalize_size,
)

from oracles import ball_oracle, fps_oracle, knn_oracle, random_point_sets


def simple_cloud(xs, ys, **kwargs):
    n = len(xs)
    return PointCloud(xs, ys, np.zeros(n), np.zeros(n), **kwargs)


class TestPointCloud:
    def test_views_follow_layout(self):
        pc = PointCloud([1.0, 2.0], [3.0, 4.0], [0.5, -0.5], [10.0, -5.0])
        layout = InputLayout(coords=("x", "y", "v_r"), features=("sigma",), doppler_scale=2.0)
        coords = pc.coord_view(layout)
        assert coords.shape == (2, 3)
        np.testing.assert_allclose(coords[:, 2], [1.0, -1.0])
        feats = pc.feature_view(layout)
        np.testing.assert_allclose(feats[:, 0], [10.0, -5.0])

    def test_rejects_bad_frame_age(self):
        with pytest.raises(ValueError):
            PointCloud([0.0], [0.0], [0.0], [0.0], frame_age=[4])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud([0.0], [0.0], [np.nan], [0.0])

    def test_layout_requires_xy(self):
        with pytest.raises(ValueError):
            InputLayout(coords=("x",), features=())

    def test_layout_drop(self):
        layout = InputLayout(coords=("x", "y", "v_r"), features=("sigma",))
        dropped = layout.drop({"v_r", "sigma"})
        assert dropped.coords == ("x", "y")
        assert dropped.features == ()
        assert dropped.preprocess_fields() == ("x", "y")


class TestEgoPose:
    def test_compose_inverse_is_identity(self):
        pose = EgoPose(tx=3.0, ty=-2.0, theta=0.7)
        ident = pose.compose(pose.inverse())
        assert abs(ident.tx) < 1e-9
        assert abs(ident.ty) < 1e-9
        assert abs(ident.theta) < 1e-9

    def test_theta_wrapped(self):
        assert EgoPose(theta=3 * math.pi).theta == pytest.approx(math.pi)


class TestAccumulateFrames:
    def test_single_identity_frame_unchanged(self):
        pc = simple_cloud([1.0, 2.0], [3.0, 4.0])
        out = accumulate_frames([pc], [EgoPose.identity()])
        np.testing.assert_array_equal(out.x, pc.x)
        np.testing.assert_array_equal(out.y, pc.y)
        np.testing.assert_array_equal(out.frame_age, [0, 0])

    def test_pure_translation(self):
        pc = simple_cloud([1.0], [0.0])
        newest = simple_cloud([9.0], [9.0])
        out = accumulate_frames([pc, newest], [EgoPose(tx=2.0), EgoPose.identity()])
        assert out.x[0] == pytest.approx(3.0)
        assert out.y[0] == pytest.approx(0.0)

    def test_quarter_turn_rotation(self):
        # rotation formula by hand: (1, 0) under theta = pi/2 lands on (0, 1)
        pc = simple_cloud([1.0], [0.0])
        newest = simple_cloud([0.0], [0.0])
        out = accumulate_frames([pc, newest], [EgoPose(theta=math.pi / 2), EgoPose.identity()])
        assert abs(out.x[0] - 0.0) < 1e-12
        assert abs(out.y[0] - 1.0) < 1e-12

    def test_ordering_and_frame_age(self):
        oldest = simple_cloud([1.0], [0.0])
        mid = simple_cloud([2.0], [0.0])
        newest = simple_cloud([3.0], [0.0])
        out = accumulate_frames([oldest, mid, newest], [EgoPose.identity()] * 3)
        np.testing.assert_array_equal(out.x, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.frame_age, [2, 1, 0])

    def test_doppler_and_rcs_copied(self):
        pc = PointCloud([1.0], [2.0], [4.5], [-3.0])
        out = accumulate_frames([pc], [EgoPose(tx=5.0, theta=1.0)])
        assert out.v_r[0] == 4.5
        assert out.sigma[0] == -3.0

    def test_errors(self):
        pc = simple_cloud([0.0], [0.0])
        with pytest.raises(ValueError):
            accumulate_frames([pc, pc], [EgoPose.identity()])
        with pytest.raises(ValueError):
            accumulate_frames([pc] * 5, [EgoPose.identity()] * 5)
        with pytest.raises(ValueError):
            accumulate_frames([], [])


class TestNormalizeSize:
    def test_identity_when_size_matches(self):
        pc = simple_cloud(np.arange(5.0), np.zeros(5))
        out = normalize_size(pc, 5)
        assert out is pc

    def test_padding_keeps_all_originals(self):
        pc = simple_cloud([0.0, 1.0, 2.0], [0.0, 0.0, 0.0])
        out = normalize_size(pc, 1200, np.random.default_rng(0))
        assert out.n == 1200
        assert set(out.x.tolist()) == {0.0, 1.0, 2.0}
        # every padded point duplicates an original
        assert np.isin(out.x, pc.x).all()

    def test_subsampling_keeps_distinct_originals(self):
        pc = simple_cloud(np.arange(2000.0), np.zeros(2000))
        out = normalize_size(pc, 1200, np.random.default_rng(0))
        assert out.n == 1200
        assert len(set(out.x.tolist())) == 1200
        assert np.isin(out.x, pc.x).all()

    def test_deterministic_per_seed(self):
        pc = simple_cloud(np.arange(10.0), np.zeros(10))
        a = normalize_size(pc, 30, np.random.default_rng(7))
        b = normalize_size(pc, 30, np.random.default_rng(7))
        np.testing.assert_array_equal(a.x, b.x)

    def test_labels_travel_with_points(self):
        pc = PointCloud([0.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0],
                        labels=[int(Label.VEHICLE), int(Label.STATIC)])
        out = normalize_size(pc, 5, np.random.default_rng(3))
        for x, lab in zip(out.x, out.labels):
            assert lab == (int(Label.VEHICLE) if x == 0.0 else int(Label.STATIC))

    @given(n=st.integers(1, 40), target=st.integers(1, 80), seed=st.integers(0, 2**16))
    @settings(max_examples=60, deadline=None)
    def test_contracts_hold(self, n, target, seed):
        rng = np.random.default_rng(seed)
        pc = simple_cloud(rng.uniform(-5, 5, n), rng.uniform(-5, 5, n))
        out = normalize_size(pc, target, np.random.default_rng(seed))
        assert out.n == target
        assert np.isin(out.x, pc.x).all()
        if target <= n:
            # sub-multiset: no original point used more often than it occurs
            values, counts = np.unique(out.x, return_counts=True)
            orig_values, orig_counts = np.unique(pc.x, return_counts=True)
            lookup = dict(zip(orig_values.tolist(), orig_counts.tolist()))
            assert all(c <= lookup[v] for v, c in zip(values.tolist(), counts.tolist()))


class TestFarthestPointSampling:
    def test_single_selection(self):
        coords = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert farthest_point_sampling(coords, 1, start=1).tolist() == [1]

    def test_line_example(self):
        # brute-force min-distance argmax with lowest-index tie-break:
        # after 0 the farthest is 3; then 1 and 2 tie at distance 1, so 1 wins
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        assert farthest_point_sampling(coords, 3, start=0).tolist() == [0, 3, 1]

    def test_full_sample_is_permutation(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-1, 1, size=(17, 2))
        out = farthest_point_sampling(coords, 17)
        assert sorted(out.tolist()) == list(range(17))

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(42)
        for coords in random_point_sets(120, 24, rng):
            n = coords.shape[0]
            start = int(rng.integers(0, n))
            got = farthest_point_sampling(coords, n, start=start)
            assert got.tolist() == fps_oracle(coords, n, start=start)

    def test_duplicate_points_stay_distinct(self):
        coords = np.zeros((4, 2))
        out = farthest_point_sampling(coords, 4)
        assert sorted(out.tolist()) == [0, 1, 2, 3]

    @given(seed=st.integers(0, 2**16), n=st.integers(2, 24))
    @settings(max_examples=50, deadline=None)
    def test_selection_gaps_non_increasing(self, seed, n):
        rng = np.random.default_rng(seed)
        coords = rng.uniform(-4, 4, size=(n, 2))
        order = farthest_point_sampling(coords, n)
        gaps = []
        for i in range(1, n):
            prev = coords[order[:i]]
            gaps.append(((coords[order[i]] - prev) ** 2).sum(axis=1).min())
        assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))

    def test_errors(self):
        coords = np.zeros((3, 2))
        with pytest.raises(ValueError):
            farthest_point_sampling(coords, 4)
        with pytest.raises(ValueError):
            farthest_point_sampling(coords, 1, start=5)


class TestKnnGroup:
    def test_k1_returns_rp_itself(self):
        coords = np.array([[0.0, 0.0], [5.0, 0.0], [9.0, 0.0]])
        g = knn_group(coords, [0, 2], 1)
        assert g.member_indices.tolist() == [[0], [2]]

    def test_line_example(self):
        # exhaustive distance sort from point 1: self, then the tie between
        # 0 and 2 resolves to index 0, point 3 is farthest
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [5.0, 0.0]])
        g = knn_group(coords, [1], 3)
        assert g.member_indices.tolist() == [[1, 0, 2]]

    def test_duplicate_coordinates_lower_index_wins(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        g = knn_group(coords, [0], 2)
        assert g.member_indices.tolist() == [[0, 1]]

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(7)
        for coords in random_point_sets(150, 32, rng):
            n = coords.shape[0]
            k = int(rng.integers(1, n + 1))
            rps = rng.choice(n, size=min(n, 4), replace=False)
            got = knn_group(coords, rps, k)
            np.testing.assert_array_equal(got.member_indices, knn_oracle(coords, rps, k))

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_group(np.zeros((2, 2)), [0], 3)


class TestBallGroup:
    def test_isolated_rp_forces_duplication(self):
        coords = np.array([[0.0, 0.0], [100.0, 0.0]])
        g = ball_group(coords, [0], 4, radius=1.0, rng=np.random.default_rng(0))
        assert g.member_indices.tolist() == [[0, 0, 0, 0]]

    def test_line_example(self):
        # candidates within radius 1 of point 0 are {0, 0.5}; point 3 is out
        coords = np.array([[0.0, 0.0], [0.5, 0.0], [3.0, 0.0]])
        g = ball_group(coords, [0], 2, radius=1.0, rng=np.random.default_rng(0))
        assert g.member_indices.tolist() == [[0, 1]]

    def test_all_in_radius_each_exactly_once(self):
        rng = np.random.default_rng(1)
        coords = rng.uniform(-0.5, 0.5, size=(8, 2))
        g = ball_group(coords, [3], 8, radius=10.0, rng=rng)
        assert sorted(g.member_indices[0].tolist()) == list(range(8))

    def test_containment_invariant(self):
        rng = np.random.default_rng(5)
        for coords in random_point_sets(100, 32, rng):
            n = coords.shape[0]
            radius = float(rng.uniform(0.5, 8.0))
            k = int(rng.integers(1, 12))
            rps = rng.choice(n, size=min(n, 3), replace=False)
            g = ball_group(coords, rps, k, radius, rng)
            for row, rp in zip(g.member_indices, g.rp_indices):
                dists = np.linalg.norm(coords[row] - coords[rp], axis=1)
                assert (dists <= radius + 1e-9).all()

    def test_matches_oracle_with_shared_rng_protocol(self):
        base = np.random.default_rng(11)
        for coords in random_point_sets(80, 24, base):
            n = coords.shape[0]
            radius = float(base.uniform(0.5, 6.0))
            k = int(base.integers(1, 10))
            rps = base.choice(n, size=min(n, 3), replace=False)
            seed = int(base.integers(0, 2**32))
            got = ball_group(coords, rps, k, radius, np.random.default_rng(seed))
            want = ball_oracle(coords, rps, k, radius, np.random.default_rng(seed))
            np.testing.assert_array_equal(got.member_indices, want)

    def test_deterministic_per_seed(self):
        coords = np.random.default_rng(0).uniform(-2, 2, size=(20, 2))
        a = ball_group(coords, [0, 5], 9, 1.0, np.random.default_rng(3))
        b = ball_group(coords, [0, 5], 9, 1.0, np.random.default_rng(3))
        np.testing.assert_array_equal(a.member_indices, b.member_indices)


class TestLocalize:
    def test_subtraction_example(self):
        coords = np.array([[3.0, 4.0], [5.0, 6.0]])
        g = knn_group(coords, [0], 2)
        local = localize(coords, g)
        np.testing.assert_allclose(local[0], [[0.0, 0.0], [2.0, 2.0]])

    def test_all_members_equal_rp_gives_zero_block(self):
        coords = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
        g = knn_group(coords, [0], 3)
        assert np.all(localize(coords, g) == 0.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        coords = rng.uniform(-5, 5, size=(30, 2))
        g = knn_group(coords, [0, 7, 13], 6)
        base = localize(coords, g)
        shifted = localize(coords + np.array([7.0, -2.0]), g)
        assert np.abs(shifted - base).max() < 1e-9
