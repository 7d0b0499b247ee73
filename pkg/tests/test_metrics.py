import logging

import numpy as np
import pytest

from reidpipe.metrics import (
    EvalReport,
    FusionSpec,
    evaluate,
    fuse_distances,
    l2_normalize,
    pairwise_distance,
)
from reidpipe.store import DistanceMatrix

from conftest import build_set
from oracles import oracle_evaluate, oracle_euclidean


def qg_matrix(values, q_pids, q_camids, g_pids, g_camids):
    values = np.asarray(values, dtype=np.float32)
    dm = DistanceMatrix(values, list(range(values.shape[0])), list(range(100, 100 + values.shape[1])))
    return dm, np.asarray(q_pids), np.asarray(q_camids), np.asarray(g_pids), np.asarray(g_camids)


class TestL2Normalize:
    def test_three_four_five(self):
        es = build_set([[3.0, 4.0]])
        out = l2_normalize(es)
        assert np.allclose(out.features, [[0.6, 0.8]], atol=1e-7)

    def test_idempotent_on_unit_rows(self, nprng):
        es = build_set(nprng.normal(size=(5, 4)))
        once = l2_normalize(es)
        twice = l2_normalize(once)
        assert np.allclose(once.features, twice.features, atol=1e-7)

    def test_zero_row_kept_and_warned(self, caplog):
        es = build_set([[0.0, 0.0], [1.0, 0.0]])
        with caplog.at_level(logging.WARNING):
            out = l2_normalize(es)
        assert np.all(out.features[0] == 0.0)
        assert "1 zero row" in caplog.text


class TestPairwiseDistance:
    def test_three_four_five_euclidean(self):
        a = build_set([[0.0, 0.0]])
        b = build_set([[3.0, 4.0]], indices=[1])
        assert pairwise_distance(a, b, "euclidean").values[0, 0] == pytest.approx(5.0, abs=1e-7)

    def test_identical_unit_vectors_cosine_zero(self):
        a = build_set([[1.0, 0.0]])
        assert pairwise_distance(a, a, "cosine").values[0, 0] == 0.0

    def test_euclidean_squared_is_twice_cosine_on_unit_rows(self, nprng):
        a = l2_normalize(build_set(nprng.normal(size=(6, 5))))
        b = l2_normalize(build_set(nprng.normal(size=(7, 5)), indices=range(10, 17)))
        eu = pairwise_distance(a, b, "euclidean").values.astype(np.float64)
        co = pairwise_distance(a, b, "cosine").values.astype(np.float64)
        for i in range(6):
            for j in range(7):
                assert eu[i, j] ** 2 == pytest.approx(2.0 * co[i, j], abs=1e-5)

    def test_matches_scalar_oracle(self, nprng):
        a = build_set(nprng.normal(size=(4, 3)))
        b = build_set(nprng.normal(size=(5, 3)), indices=range(10, 15))
        got = pairwise_distance(a, b).values
        want = oracle_euclidean(a.features.tolist(), b.features.tolist())
        assert np.allclose(got, want, atol=1e-5)

    def test_self_matrix_invariants(self, nprng):
        a = build_set(nprng.normal(size=(8, 6)))
        dm = pairwise_distance(a, a)
        assert dm.is_self
        assert np.all(np.diagonal(dm.values) == 0.0)
        assert np.allclose(dm.values, dm.values.T, atol=1e-5)

    def test_zero_vector_cosine_pair_is_one(self):
        a = build_set([[0.0, 0.0]])
        b = build_set([[1.0, 2.0]], indices=[1])
        assert pairwise_distance(a, b, "cosine").values[0, 0] == 1.0

    def test_dimension_mismatch_rejected(self, nprng):
        a = build_set(nprng.normal(size=(2, 3)))
        b = build_set(nprng.normal(size=(2, 4)), indices=[5, 6])
        with pytest.raises(ValueError, match="dimension mismatch"):
            pairwise_distance(a, b)


class TestEvaluate:
    def test_perfect_single_query(self):
        dm, *meta = qg_matrix([[0.1, 0.9]], [5], [0], [5, 6], [1, 1])
        rep = evaluate(dm, *meta)
        assert rep.map == 1.0
        assert rep.cmc[0] == 1.0
        assert rep.per_query_ap == [(0, 1.0)]

    def test_relevant_at_ranks_one_and_three(self):
        # AP = (1/1 + 2/3) / 2 = 5/6
        dm, *meta = qg_matrix([[0.1, 0.5, 0.9]], [5], [0], [5, 6, 5], [1, 1, 1])
        rep = evaluate(dm, *meta)
        assert rep.map == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_junk_filter_removes_same_pid_same_cam(self):
        # The closest item shares pid and camera with the query: ignored.
        dm, *meta = qg_matrix([[0.05, 0.5, 0.9]], [5], [0], [5, 6, 5], [0, 1, 1])
        rep = evaluate(dm, *meta)
        assert rep.map == pytest.approx(0.5)
        assert rep.cmc[0] == 0.0 and rep.cmc[1] == 1.0

    def test_queries_without_matches_are_excluded(self):
        dm, *meta = qg_matrix([[0.1, 0.2], [0.3, 0.1]], [1, 9], [0, 0], [1, 2], [1, 1])
        rep = evaluate(dm, *meta)
        assert rep.excluded_queries == [1]
        assert rep.map == 1.0

    def test_unlabeled_pid_rejected(self):
        dm, *meta = qg_matrix([[0.1]], [-1], [0], [1], [1])
        with pytest.raises(ValueError, match="pid"):
            evaluate(dm, *meta)

    def test_matches_bruteforce_oracle_on_random_instances(self, nprng):
        for _ in range(10):
            nq, ng = int(nprng.integers(2, 10)), int(nprng.integers(4, 20))
            values = nprng.random((nq, ng)).astype(np.float32)
            q_pids = nprng.integers(0, 5, nq)
            g_pids = nprng.integers(0, 5, ng)
            q_cams = nprng.integers(0, 3, nq)
            g_cams = nprng.integers(0, 3, ng)
            dm = DistanceMatrix(values, list(range(nq)), list(range(100, 100 + ng)))
            rep = evaluate(dm, q_pids, q_cams, g_pids, g_cams)
            o_map, o_cmc, o_aps, o_excluded = oracle_evaluate(
                values.tolist(), q_pids.tolist(), q_cams.tolist(), g_pids.tolist(), g_cams.tolist()
            )
            assert rep.map == pytest.approx(o_map, abs=1e-6)
            assert np.array_equal(rep.cmc, np.asarray(o_cmc))
            assert rep.excluded_queries == o_excluded

    def test_gallery_permutation_invariance_without_ties(self, nprng):
        nq, ng = 4, 12
        values = nprng.permutation(nq * ng).reshape(nq, ng).astype(np.float32)
        q_pids, q_cams = nprng.integers(0, 3, nq), nprng.integers(0, 2, nq)
        g_pids, g_cams = nprng.integers(0, 3, ng), nprng.integers(0, 2, ng)
        dm = DistanceMatrix(values, list(range(nq)), list(range(100, 100 + ng)))
        rep = evaluate(dm, q_pids, q_cams, g_pids, g_cams)
        perm = nprng.permutation(ng)
        dm2 = DistanceMatrix(values[:, perm], list(range(nq)), list(range(100, 100 + ng)))
        rep2 = evaluate(dm2, q_pids, q_cams, g_pids[perm], g_cams[perm])
        assert rep2.map == pytest.approx(rep.map, abs=1e-12)
        assert np.allclose(rep2.cmc, rep.cmc)

    def test_appending_worst_irrelevant_item(self, nprng):
        nq, ng = 3, 8
        values = nprng.random((nq, ng)).astype(np.float32)
        q_pids, q_cams = nprng.integers(0, 2, nq), nprng.integers(0, 2, nq)
        g_pids, g_cams = nprng.integers(0, 2, ng), nprng.integers(0, 2, ng)
        dm = DistanceMatrix(values, list(range(nq)), list(range(100, 100 + ng)))
        rep = evaluate(dm, q_pids, q_cams, g_pids, g_cams)
        worst = np.full((nq, 1), 9.0, dtype=np.float32)
        dm2 = DistanceMatrix(np.hstack([values, worst]), list(range(nq)), list(range(100, 101 + ng)))
        rep2 = evaluate(dm2, q_pids, q_cams, np.append(g_pids, 99), np.append(g_cams, 0))
        old = dict(rep.per_query_ap)
        for q, ap in rep2.per_query_ap:
            assert ap <= old[q] + 1e-12
        assert rep2.cmc[0] == rep.cmc[0]

    def test_cmc_monotone_and_bounded(self, nprng):
        values = nprng.random((5, 9)).astype(np.float32)
        dm = DistanceMatrix(values, list(range(5)), list(range(100, 109)))
        rep = evaluate(dm, nprng.integers(0, 3, 5), nprng.integers(0, 2, 5),
                       nprng.integers(0, 3, 9), nprng.integers(0, 2, 9))
        assert 0.0 <= rep.map <= 1.0
        assert np.all(rep.cmc >= 0.0) and np.all(rep.cmc <= 1.0)
        assert np.all(np.diff(rep.cmc) >= 0.0)

    def test_report_json_round_trip(self):
        dm, *meta = qg_matrix([[0.1, 0.9]], [5], [0], [5, 6], [1, 1])
        rep = evaluate(dm, *meta)
        back = EvalReport.from_json(rep.to_json())
        assert back.map == rep.map
        assert np.array_equal(back.cmc, rep.cmc)
        assert back.per_query_ap == rep.per_query_ap


class TestFuseDistances:
    def _mats(self, nprng, k=2, shape=(3, 4)):
        mats = []
        for _ in range(k):
            mats.append(DistanceMatrix(nprng.random(shape).astype(np.float32),
                                       list(range(shape[0])), list(range(100, 100 + shape[1]))))
        return mats

    def test_weight_one_zero_is_bitwise_identity(self, nprng):
        m1, m2 = self._mats(nprng)
        out = fuse_distances([m1, m2], FusionSpec(weights=(1.0, 0.0)))
        assert out.values.tobytes() == m1.values.tobytes()

    def test_identical_inputs_are_a_fixed_point(self, nprng):
        (m1,) = self._mats(nprng, k=1)
        out = fuse_distances([m1, m1], FusionSpec(weights=(0.7, 2.3)))
        assert np.allclose(out.values, m1.values, atol=1e-6)

    def test_minmax_scale_invariance(self, nprng):
        (m,) = self._mats(nprng, k=1)
        scaled = DistanceMatrix(3.0 * m.values, m.row_ids, m.col_ids)
        out = fuse_distances([m, scaled], FusionSpec(weights=(1.0, 1.0), normalize="minmax"))
        lo, hi = m.values.min(), m.values.max()
        want = (m.values.astype(np.float64) - lo) / (hi - lo)
        assert np.allclose(out.values, want, atol=1e-6)

    def test_positively_homogeneous_in_weights(self, nprng):
        m1, m2 = self._mats(nprng)
        a = fuse_distances([m1, m2], FusionSpec(weights=(1.0, 0.5)))
        b = fuse_distances([m1, m2], FusionSpec(weights=(2.0, 1.0)))
        assert np.array_equal(a.values, b.values)

    def test_constant_matrix_minmax_maps_to_zero(self):
        m = DistanceMatrix(np.full((2, 2), 3.0, dtype=np.float32), [0, 1], [2, 3])
        out = fuse_distances([m], FusionSpec(weights=(1.0,), normalize="minmax"))
        assert np.all(out.values == 0.0)

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            FusionSpec(weights=(0.0, 0.0))

    def test_shape_mismatch_rejected(self, nprng):
        m1 = DistanceMatrix(nprng.random((2, 3)).astype(np.float32), [0, 1], [4, 5, 6])
        m2 = DistanceMatrix(nprng.random((3, 3)).astype(np.float32), [0, 1, 2], [4, 5, 6])
        with pytest.raises(ValueError, match="shape mismatch"):
            fuse_distances([m1, m2], FusionSpec(weights=(1.0, 1.0)))
