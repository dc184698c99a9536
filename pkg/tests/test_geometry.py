import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mma.geometry import (
    NeighborhoodIndex,
    ObjectRecord,
    PointCloud,
    SceneFormatError,
    farthest_point_sample,
    format_scene,
    group_features,
    interpolate_features,
    interpolation_weights,
    knn_query,
    load_scene_file,
    pairwise_sq_dist,
    parse_scene,
    save_scene_file,
)
from mma.scenes import SceneSpec, generate_scene
from mma.tensor import Tensor, backward, grad_check, mul, tsum

from oracles import fps_greedy, interpolate_direct, knn_sorted, sqdist

seeds = st.integers(0, 2**31 - 1)


class TestFarthestPointSample:
    def test_obvious_farthest(self):
        pts = np.array([[0, 0, 0], [10, 0, 0], [1, 0, 0]], dtype=float)
        assert farthest_point_sample(pts, 2).tolist() == [0, 1]

    def test_exhaustion_is_permutation(self):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        assert sorted(farthest_point_sample(pts, 20).tolist()) == list(range(20))

    def test_greedy_oracle(self):
        pts = np.random.default_rng(1).normal(size=(64, 3))
        assert farthest_point_sample(pts, 8).tolist() == fps_greedy(pts.tolist(), 8)

    def test_ties_go_to_smallest_index(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]], dtype=float)
        assert farthest_point_sample(pts, 2).tolist() == [0, 1]

    def test_start_index(self):
        pts = np.random.default_rng(2).normal(size=(10, 3))
        sel = farthest_point_sample(pts, 4, start=7)
        assert sel[0] == 7
        assert sel.tolist() == fps_greedy(pts.tolist(), 4, start=7)

    @pytest.mark.parametrize("m", [0, 4])
    def test_bad_count(self, m):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((3, 3)), m)

    def test_bad_start(self):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((3, 3)), 1, start=3)

    def test_exact_invariance_under_signed_permutations(self):
        rng = np.random.default_rng(3)
        pts = rng.integers(-50, 50, size=(40, 3)) / 8.0
        base = farthest_point_sample(pts, 10)
        rot = np.array([[0, 1, 0], [0, 0, -1], [-1, 0, 0]], dtype=float)
        assert farthest_point_sample(pts @ rot.T + np.array([3.0, -5.0, 7.0]), 10).tolist() == base.tolist()

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_random_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(30, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        moved = pts @ q.T + rng.normal(size=3)
        np.testing.assert_allclose(pairwise_sq_dist(moved, moved), pairwise_sq_dist(pts, pts), atol=1e-9)
        assert farthest_point_sample(moved, 8).tolist() == farthest_point_sample(pts, 8).tolist()


class TestKnn:
    def test_self_is_nearest(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert knn_query(pts, pts[4:5], 1).indices.tolist() == [[4]]

    def test_hand_distances(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
        assert knn_query(src, np.array([[0.9, 0, 0]]), 2).indices.tolist() == [[1, 0]]

    def test_equal_distances_ascending_index(self):
        src = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 5]], dtype=float)
        assert knn_query(src, np.zeros((1, 3)), 3).indices.tolist() == [[0, 1, 2]]

    def test_full_sort_oracle(self):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(128, 3))
        q = src[:20]
        np.testing.assert_array_equal(knn_query(src, q, 16).indices, knn_sorted(src.tolist(), q.tolist(), 16))

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            knn_query(np.zeros((3, 3)), np.zeros((1, 3)), k)

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.integers(1, 12))
    def test_rows_nondecreasing(self, seed, k):
        rng = np.random.default_rng(seed)
        src = rng.integers(-3, 4, size=(12, 3)).astype(float)  # lots of ties
        q = rng.integers(-3, 4, size=(5, 3)).astype(float)
        idx = knn_query(src, q, k).indices
        for qi, row in enumerate(idx):
            d = [sqdist(q[qi], src[j]) for j in row]
            assert all(a < b or (a == b and row[t] < row[t + 1]) for t, (a, b) in enumerate(zip(d, d[1:])))
        np.testing.assert_array_equal(idx, knn_sorted(src.tolist(), q.tolist(), k))


class TestNeighborhoodIndex:
    def test_out_of_range(self):
        with pytest.raises(IndexError):
            NeighborhoodIndex(np.array([[0, 3]]), 3)

    def test_shape(self):
        with pytest.raises(ValueError):
            NeighborhoodIndex(np.array([0, 1]), 3)


class TestGroupFeatures:
    def test_identity(self):
        f = Tensor(np.arange(6.0).reshape(3, 2))
        out = group_features(f, NeighborhoodIndex(np.arange(3)[:, None], 3))
        np.testing.assert_array_equal(out.data, f.data[:, None, :])

    def test_repeated_index_doubles_gradient(self):
        f = Tensor(np.ones((3, 2)), requires_grad=True)
        backward(tsum(group_features(f, NeighborhoodIndex(np.array([[2, 2]]), 3))), [f])
        np.testing.assert_array_equal(f.grad, [[0, 0], [0, 0], [2, 2]])

    def test_loop_oracle(self):
        rng = np.random.default_rng(4)
        feat = rng.normal(size=(9, 4))
        idx = rng.integers(0, 9, size=(5, 3))
        g = rng.normal(size=(5, 3, 4))
        f = Tensor(feat, requires_grad=True)
        out = group_features(f, NeighborhoodIndex(idx, 9))
        backward(tsum(mul(out, Tensor(g))), [f])
        fwd = np.array([[feat[idx[q][j]] for j in range(3)] for q in range(5)])
        scatter = np.zeros_like(feat)
        for q in range(5):
            for j in range(3):
                scatter[idx[q][j]] += g[q][j]
        np.testing.assert_array_equal(out.data, fwd)
        np.testing.assert_allclose(f.grad, scatter, atol=1e-14)

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        index = NeighborhoodIndex(rng.integers(0, 6, size=(4, 3)), 6)
        w = Tensor(rng.normal(size=(4, 3, 2)))
        assert grad_check(lambda t: tsum(mul(group_features(t, index), w)), Tensor(rng.normal(size=(6, 2)))) < 1e-6

    def test_source_mismatch(self):
        with pytest.raises(IndexError):
            group_features(Tensor(np.ones((2, 2))), NeighborhoodIndex(np.array([[0]]), 3))


class TestInterpolation:
    def test_coincident_point(self):
        coarse = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        feat = np.array([[2.0, -1.0], [5.0, 5.0], [7.0, 1.0]])
        _, w = interpolation_weights(coarse, coarse[:1], 3)
        assert w[0, 0] >= 0.9999
        out = interpolate_features(coarse, feat, coarse[:1]).data[0]
        np.testing.assert_allclose(out, feat[0], rtol=1e-3)

    def test_equidistant_pair(self):
        coarse = np.array([[-1, 0, 0], [1, 0, 0]], dtype=float)
        feat = np.array([[1.0, 4.0], [3.0, -2.0]])
        out = interpolate_features(coarse, feat, np.zeros((1, 3)), k=2).data
        np.testing.assert_allclose(out, [[2.0, 1.0]], atol=1e-15)

    def test_direct_oracle(self):
        rng = np.random.default_rng(6)
        cp, cf, fp = rng.normal(size=(16, 3)), rng.normal(size=(16, 5)), rng.normal(size=(40, 3))
        out = interpolate_features(cp, cf, fp).data
        assert np.abs(out - interpolate_direct(cp.tolist(), cf.tolist(), fp.tolist())).max() < 1e-12

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            interpolate_features(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((1, 3)), k=3)

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_weights_are_convex(self, seed):
        rng = np.random.default_rng(seed)
        _, w = interpolation_weights(rng.normal(size=(8, 3)), rng.normal(size=(10, 3)), 3)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-10)


def small_cloud(labels=True):
    return PointCloud(
        positions=np.array([[0.1, 0.2, 0.3], [1.0 / 3, -2.5, 1e-17]]),
        features=np.array([[1.0], [np.pi]]),
        point_labels=np.array([0, 1]) if labels else None,
        objects=[ObjectRecord(1, np.array([0.5, 0.5, 0.25]), np.array([1.0, 1.0, 0.5]), np.array([0.6, 0.4, 0.25]))],
        num_classes=2,
    )


class TestSceneFiles:
    def test_minimal_round_trip_bit_exact(self, tmp_path):
        pc = PointCloud(np.array([[0.1, 1e-300, -7.25]]), np.array([[2.0 / 3]]), np.array([0]), [], 1)
        save_scene_file(pc, tmp_path / "a.scene")
        back = load_scene_file(tmp_path / "a.scene")
        assert back.positions.tobytes() == pc.positions.tobytes()
        assert back.features.tobytes() == pc.features.tobytes()
        assert back.point_labels.tolist() == [0]

    def test_objects_round_trip(self):
        pc = small_cloud()
        back = parse_scene(format_scene(pc))
        o, b = pc.objects[0], back.objects[0]
        assert b.class_id == o.class_id
        np.testing.assert_array_equal(b.center, o.center)
        np.testing.assert_array_equal(b.extent, o.extent)
        np.testing.assert_array_equal(b.weak_label, o.weak_label)

    def test_unlabelled_round_trip(self):
        back = parse_scene(format_scene(small_cloud(labels=False)))
        assert back.point_labels is None

    def test_generated_scene_round_trip_and_stable_digest(self, tmp_path):
        pc = generate_scene(SceneSpec(num_points=512, seed=11, clutter_fraction=0.2))
        text = format_scene(pc)
        save_scene_file(pc, tmp_path / "s.scene")
        back = load_scene_file(tmp_path / "s.scene")
        np.testing.assert_array_equal(back.positions, pc.positions)
        np.testing.assert_array_equal(back.features, pc.features)
        np.testing.assert_array_equal(back.point_labels, pc.point_labels)
        assert format_scene(back) == text
        again = format_scene(generate_scene(SceneSpec(num_points=512, seed=11, clutter_fraction=0.2)))
        assert hashlib.sha256(again.encode()).hexdigest() == hashlib.sha256(text.encode()).hexdigest()

    def test_nan_position_reports_field(self):
        lines = format_scene(small_cloud()).splitlines()
        toks = lines[2].split()
        toks[1] = "nan"
        lines[2] = " ".join(toks)
        with pytest.raises(SceneFormatError, match=r"line 3: field y"):
            parse_scene("\n".join(lines))

    def test_version_mismatch(self):
        text = format_scene(small_cloud()).replace("MMASCENE 1", "MMASCENE 2", 1)
        with pytest.raises(SceneFormatError, match="version"):
            parse_scene(text)

    def test_bad_magic(self):
        with pytest.raises(SceneFormatError, match="line 1"):
            parse_scene("SCENE 1\n")

    def test_truncated(self):
        text = "\n".join(format_scene(small_cloud()).splitlines()[:3])
        with pytest.raises(SceneFormatError, match="end of file"):
            parse_scene(text)

    def test_label_out_of_range(self):
        lines = format_scene(small_cloud()).splitlines()
        toks = lines[2].split()
        toks[-1] = "5"
        lines[2] = " ".join(toks)
        with pytest.raises(SceneFormatError, match="label"):
            parse_scene("\n".join(lines))

    def test_wrong_field_count(self):
        lines = format_scene(small_cloud()).splitlines()
        lines[3] += " 1.0"
        with pytest.raises(SceneFormatError, match="line 4"):
            parse_scene("\n".join(lines))


class TestDomainTypes:
    def test_nonpositive_extent(self):
        with pytest.raises(ValueError):
            ObjectRecord(0, np.zeros(3), np.array([1.0, 0.0, 1.0]))

    def test_weak_label_defaults_to_center(self):
        o = ObjectRecord(0, np.array([1.0, 2.0, 3.0]), np.ones(3))
        np.testing.assert_array_equal(o.weak_label, o.center)

    def test_nonfinite_positions(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[np.inf, 0, 0]]), np.zeros((1, 1)))

    def test_empty_cloud(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)), np.zeros((0, 1)))

    def test_label_range(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((1, 3)), np.zeros((1, 1)), np.array([2]), [], 2)

    def test_translated_moves_labels(self):
        pc = small_cloud().translated([1.0, 0.0, -1.0])
        np.testing.assert_array_equal(pc.objects[0].weak_label, [1.6, 0.4, -0.75])
