import numpy as np
import pytest

from reidpipe.camera import (
    CameraTopology,
    apply_topology,
    build_topology,
    mean_camera_distance,
    neighbor_smooth,
    subtract_camera_distance,
    subtract_camera_mean,
)
from reidpipe.metrics import pairwise_distance
from reidpipe.store import DistanceMatrix

from conftest import build_set


def rect_matrix(values, row_start=0, col_start=100):
    values = np.asarray(values, dtype=np.float32)
    return DistanceMatrix(values,
                          list(range(row_start, row_start + values.shape[0])),
                          list(range(col_start, col_start + values.shape[1])))


class TestSubtractCameraMean:
    def test_single_camera_centers_columns(self, nprng):
        es = build_set(nprng.normal(size=(10, 4)))
        out = subtract_camera_mean(es)
        assert np.allclose(out.features.mean(axis=0), 0.0, atol=1e-5)

    def test_idempotent(self, nprng):
        es = build_set(nprng.normal(size=(12, 5)), camids=nprng.integers(0, 3, 12))
        once = subtract_camera_mean(es)
        twice = subtract_camera_mean(once)
        assert np.allclose(once.features, twice.features, atol=1e-5)

    def test_constant_camera_offset_removed(self, nprng):
        base = nprng.normal(size=(6, 4))
        v = nprng.normal(size=4)
        feats = np.vstack([base, base + v])
        es = build_set(feats, camids=[0] * 6 + [1] * 6)
        out = subtract_camera_mean(es)
        assert np.allclose(out.features[:6], out.features[6:], atol=1e-5)

    def test_within_camera_distances_preserved(self, nprng):
        es = build_set(nprng.normal(size=(8, 4)), camids=[0, 0, 0, 0, 1, 1, 1, 1])
        before = pairwise_distance(es, es).values
        after_set = subtract_camera_mean(es)
        after = pairwise_distance(after_set, after_set).values
        for cam_rows in ([0, 1, 2, 3], [4, 5, 6, 7]):
            for i in cam_rows:
                for j in cam_rows:
                    assert after[i, j] == pytest.approx(before[i, j], abs=1e-5)


class TestNeighborSmooth:
    def test_k_zero_is_bitwise_identity(self, nprng):
        es = build_set(nprng.normal(size=(5, 3)))
        out = neighbor_smooth(es, 0)
        assert out.features.tobytes() == es.features.tobytes()

    def test_identical_rows_unchanged(self):
        es = build_set(np.ones((3, 4)))
        out = neighbor_smooth(es, 2)
        assert np.allclose(out.features, es.features, atol=1e-7)

    def test_hand_placed_pairs(self):
        es = build_set([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [12.0, 0.0]])
        out = neighbor_smooth(es, 1)
        want = [[0.5, 0.0], [0.5, 0.0], [11.0, 0.0], [11.0, 0.0]]
        assert np.allclose(out.features, want, atol=1e-6)

    def test_k_too_large_rejected(self, nprng):
        es = build_set(nprng.normal(size=(4, 2)))
        with pytest.raises(ValueError, match="k=4"):
            neighbor_smooth(es, 4)

    def test_reads_input_features_only(self):
        # A chain A-B-C: B's smoothing must use the original A and C, not
        # any already-smoothed rows.
        es = build_set([[0.0, 0.0], [1.0, 0.0], [1.8, 0.0]])
        out = neighbor_smooth(es, 1)
        assert np.allclose(out.features, [[0.5, 0.0], [1.4, 0.0], [1.4, 0.0]], atol=1e-6)


class TestMeanCameraDistance:
    def test_single_matrix_identity(self, nprng):
        m = rect_matrix(nprng.random((3, 4)))
        out = mean_camera_distance([m])
        assert np.allclose(out.values, m.values, atol=1e-7)

    def test_constant_mean(self):
        a = rect_matrix([[0.0, 2.0], [4.0, 0.0]])
        b = rect_matrix([[4.0, 2.0], [0.0, 4.0]])
        out = mean_camera_distance([a, b])
        assert np.allclose(out.values, [[2.0, 2.0], [2.0, 2.0]])

    def test_matches_scalar_loop(self, nprng):
        mats = [rect_matrix(nprng.random((3, 5))) for _ in range(3)]
        out = mean_camera_distance(mats)
        for i in range(3):
            for j in range(5):
                want = sum(float(m.values[i, j]) for m in mats) / 3.0
                assert out.values[i, j] == pytest.approx(want, abs=1e-6)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            mean_camera_distance([])


class TestSubtractCameraDistance:
    def test_rate_zero_is_bitwise_identity(self, nprng):
        d = rect_matrix(nprng.random((3, 4)))
        c = rect_matrix(nprng.random((3, 4)))
        out = subtract_camera_distance(d, c, 0.0)
        assert out.values.tobytes() == d.values.tobytes()

    def test_full_cancellation(self, nprng):
        d = rect_matrix(nprng.random((3, 4)))
        out = subtract_camera_distance(d, d, 1.0)
        assert np.all(out.values == 0.0)

    def test_clamped_at_zero(self):
        d = rect_matrix([[0.5]])
        c = rect_matrix([[1.0]])
        out = subtract_camera_distance(d, c, 1.0)
        assert out.values[0, 0] == 0.0

    def test_shape_mismatch_rejected(self, nprng):
        d = rect_matrix(nprng.random((2, 3)))
        c = rect_matrix(nprng.random((3, 3)))
        with pytest.raises(ValueError, match="shape mismatch"):
            subtract_camera_distance(d, c, 0.5)


class TestBuildTopology:
    def test_hand_counted_instance(self):
        # identity 0 under cameras {1, 2}, identity 1 under cameras {1, 3}
        pids = [0, 0, 1, 1]
        cams = [1, 2, 1, 3]
        topo = build_topology(pids, cams)
        assert topo.prob[1, 2] == pytest.approx(0.5)
        assert topo.prob[2, 1] == pytest.approx(1.0)
        assert topo.prob[1, 1] == pytest.approx(1.0)
        assert np.all(topo.prob[0] == 0.0)

    def test_single_identity_single_camera(self):
        topo = build_topology([7], [2])
        want = np.zeros((3, 3))
        want[2, 2] = 1.0
        assert np.array_equal(topo.prob, want)

    def test_probabilities_in_unit_interval(self, nprng):
        pids = nprng.integers(0, 6, 40)
        cams = nprng.integers(0, 4, 40)
        topo = build_topology(pids, cams)
        assert topo.prob.min() >= 0.0 and topo.prob.max() <= 1.0
        for c in np.unique(cams):
            assert topo.prob[c, c] == 1.0

    def test_row_order_invariance(self, nprng):
        pids = nprng.integers(0, 5, 30)
        cams = nprng.integers(0, 3, 30)
        perm = nprng.permutation(30)
        a = build_topology(pids, cams)
        b = build_topology(pids[perm], cams[perm])
        assert np.array_equal(a.prob, b.prob)

    def test_empty_metadata_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            build_topology([], [])


class TestApplyTopology:
    def test_alpha_zero_is_bitwise_identity(self, nprng):
        d = rect_matrix(nprng.random((3, 4)))
        topo = CameraTopology(nprng.random((2, 2)))
        out = apply_topology(d, topo, [0, 1, 0], [1, 0, 1, 0], 0.0)
        assert out.values.tobytes() == d.values.tobytes()

    def test_uniform_probability_scales(self, nprng):
        d = rect_matrix(nprng.random((2, 3)))
        topo = CameraTopology(np.ones((2, 2)))
        out = apply_topology(d, topo, [0, 1], [0, 1, 0], 1.0)
        assert np.allclose(out.values, 2.0 * d.values, atol=1e-6)

    def test_hand_computed_two_by_two(self):
        d = rect_matrix([[1.0, 2.0], [3.0, 4.0]])
        topo = CameraTopology([[1.0, 0.5], [0.25, 1.0]])
        out = apply_topology(d, topo, [0, 1], [1, 0], 2.0)
        assert np.allclose(out.values, [[2.0, 6.0], [9.0, 6.0]], atol=1e-6)

    def test_negative_alpha_clamped(self):
        d = rect_matrix([[1.0]])
        topo = CameraTopology([[1.0]])
        out = apply_topology(d, topo, [0], [0], -2.0)
        assert out.values[0, 0] == 0.0

    def test_camera_out_of_range_rejected(self, nprng):
        d = rect_matrix(nprng.random((1, 1)))
        topo = CameraTopology([[1.0]])
        with pytest.raises(ValueError, match="out of range"):
            apply_topology(d, topo, [0], [1], 0.5)
