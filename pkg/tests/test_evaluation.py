import numpy as np
import pytest
from oracles import brute_ap, brute_rank_k, brute_ranking

from reid_uda.errors import EvaluationError, ShapeError
from reid_uda.evaluation import (
    RankingResult,
    average_precision,
    cmc_curve,
    evaluate,
    mean_ap,
    rank_all,
    rank_gallery,
    rank_k_accuracy,
    report,
)
from reid_uda.featureset import SampleRecord


def _ranking(relevant, qid=0):
    rel = np.asarray(relevant, dtype=bool)
    return RankingResult(qid, np.arange(len(rel)), rel)


def _first_hit_at(rank, length=10):
    rel = np.zeros(length, dtype=bool)
    rel[rank - 1] = True
    return _ranking(rel)


class TestRankGallery:
    def test_exact_copy_first(self):
        q = SampleRecord(0, np.array([1.0, 2.0]), identity=1, camera=0)
        gallery = [SampleRecord(i, np.array(v), identity=i, camera=1) for i, v in
                   enumerate([[5.0, 5.0], [1.0, 2.0], [0.0, 0.0]])]
        assert rank_gallery(q, gallery).order[0] == 1

    def test_tie_lower_index_first(self):
        q = SampleRecord(0, np.array([0.0]), identity=0)
        gallery = [SampleRecord(i, np.array(v), identity=0) for i, v in enumerate([[3.0], [-1.0], [1.0]])]
        np.testing.assert_array_equal(rank_gallery(q, gallery).order, [1, 2, 0])

    def test_hand_2d(self):
        q = SampleRecord(0, np.array([0.0, 0.0]), identity=7)
        pts = [[3.0, 4.0], [1.0, 0.0], [0.0, -2.0], [-1.0, 1.0]]
        gallery = [SampleRecord(i, np.array(v), identity=7 if i % 2 else 8) for i, v in enumerate(pts)]
        r = rank_gallery(q, gallery)
        # distances 5, 1, 2, sqrt(2)
        np.testing.assert_array_equal(r.order, [1, 3, 2, 0])
        np.testing.assert_array_equal(r.relevant, [True, True, False, False])

    def test_camera_filter(self):
        q = SampleRecord(0, np.array([0.0]), identity=1, camera=0)
        gallery = [SampleRecord(1, np.array([0.0]), identity=1, camera=0),
                   SampleRecord(2, np.array([1.0]), identity=1, camera=1),
                   SampleRecord(3, np.array([0.5]), identity=2, camera=0)]
        r = rank_gallery(q, gallery, filter_same_camera=True)
        np.testing.assert_array_equal(r.order, [2, 1])

    def test_empty_after_filter(self):
        q = SampleRecord(0, np.array([0.0]), identity=1, camera=0)
        with pytest.raises(EvaluationError):
            rank_gallery(q, [SampleRecord(1, np.array([0.0]), identity=1, camera=0)], filter_same_camera=True)

    def test_filter_needs_cameras(self):
        q = SampleRecord(0, np.array([0.0]), identity=1)
        with pytest.raises(EvaluationError):
            rank_gallery(q, [SampleRecord(1, np.array([0.0]), identity=1, camera=0)], filter_same_camera=True)

    def test_shape_mismatch(self):
        q = SampleRecord(0, np.array([0.0, 1.0]), identity=1)
        with pytest.raises(ShapeError):
            rank_gallery(q, [SampleRecord(1, np.array([0.0]), identity=1)])

    def test_rank_all_matches_single(self):
        g = np.random.default_rng(0)
        qf, gf = g.normal(size=(70, 3)), g.normal(size=(9, 3))
        qid, gid = g.integers(0, 3, 70), g.integers(0, 3, 9)
        cams = np.zeros(70, dtype=np.int64)
        rs = rank_all(qf, qid, cams, gf, gid, np.ones(9, dtype=np.int64))
        for i in (0, 33, 69):
            assert rs[i].order.tolist() == brute_ranking(qf[i], gf)
            assert rs[i].query_id == i


class TestRankK:
    def test_first_hit_three(self):
        r = [_first_hit_at(3)]
        assert rank_k_accuracy(r, 1) == 0.0
        assert rank_k_accuracy(r, 5) == 1.0

    def test_k_covers_gallery(self):
        rs = [_first_hit_at(k, 6) for k in (1, 4, 6)]
        assert rank_k_accuracy(rs, 6) == 1.0

    def test_three_queries(self):
        rs = [_first_hit_at(k) for k in (1, 2, 6)]
        assert rank_k_accuracy(rs, 1) == pytest.approx(1 / 3)
        assert rank_k_accuracy(rs, 5) == pytest.approx(2 / 3)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            rank_k_accuracy([], 0)

    def test_cmc(self):
        rs = [_first_hit_at(k, 4) for k in (1, 3)]
        np.testing.assert_allclose(cmc_curve(rs), [0.5, 0.5, 1.0, 1.0])
        assert rs[1].first_hit == 3


class TestAveragePrecision:
    def test_worked_fixture(self):
        r = _ranking([True, False, True, False])
        assert average_precision(r, "standard") == 5 / 6
        assert average_precision(r, "paper_literal") == 5 / 12

    def test_single_first(self):
        assert average_precision(_ranking([True, False, False])) == 1.0

    def test_all_relevant(self):
        assert average_precision(_ranking([True] * 5)) == 1.0

    def test_no_relevant(self):
        with pytest.raises(EvaluationError):
            average_precision(_ranking([False, False]))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            average_precision(_ranking([True]), "other")


class TestMeanAp:
    def test_identical(self):
        r = _ranking([False, True, True])
        assert mean_ap([r, r, r]) == pytest.approx(average_precision(r))

    def test_two_queries(self):
        assert mean_ap([_ranking([True]), _ranking([False, True])]) == 0.75

    def test_random_oracle(self):
        g = np.random.default_rng(5)
        rs = []
        for i in range(10):
            rel = g.random(8) < 0.4
            rel[g.integers(8)] = True
            rs.append(_ranking(rel, i))
        for mode in ("standard", "paper_literal"):
            expect = np.mean([brute_ap(r.relevant.tolist(), mode) for r in rs])
            assert mean_ap(rs, mode) == pytest.approx(expect, abs=1e-12)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            mean_ap([])


class TestReport:
    def test_report_fields(self):
        rs = [_ranking([True, False, True, False]), _ranking([False, True])]
        rep = report(rs)
        assert rep.map_standard == pytest.approx((5 / 6 + 0.5) / 2)
        assert rep.map_paper == pytest.approx((5 / 12 + 0.25) / 2)
        assert rep.rank_at[1] == 0.5 and rep.rank_at[5] == 1.0
        d = rep.to_dict()
        assert set(d) == {"map_standard", "map_paper", "rank1", "rank5", "rank10", "cmc"}
        assert len(rep.per_query) == 2

    def test_evaluate_end_to_end(self):
        qf = np.array([[0.0], [10.0]])
        gf = np.array([[0.1], [9.0], [5.0]])
        rep = evaluate(qf, [0, 1], [0, 0], gf, [0, 1, 1], [1, 1, 1])
        assert rep.map_standard == 1.0 and rep.rank_at[1] == 1.0
        assert brute_rank_k([[True, False, False], [True, False, True]], 1) == 1.0
