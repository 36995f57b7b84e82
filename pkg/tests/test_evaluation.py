import csv
import json

import numpy as np
import pytest

from msoreid.data import ImageRecord, Modality, Split
from msoreid.evaluation import (
    EvalError,
    EvalMode,
    EvalProtocol,
    Shot,
    cmc_map_minp,
    cosine_distance,
    embedding_geometry,
    evaluate,
    evaluate_features,
    query_indices,
    rank,
    sample_gallery,
)
from oracles import all_masks, argsort_oracle, metrics_oracle


def _rec(pid, modality, cam, split=None):
    split = split or (Split.QUERY if modality is Modality.IR else Split.GALLERY)
    return ImageRecord(None, pid, modality, cam, split)


def _sysu_like(num_ids=96, per_cell=12, rgb_cams=(1, 2, 4, 5), ir_cams=(3, 6)):
    recs = []
    for pid in range(num_ids):
        for cam in rgb_cams:
            recs += [_rec(pid, Modality.RGB, cam) for _ in range(per_cell)]
        for cam in ir_cams:
            recs += [_rec(pid, Modality.IR, cam) for _ in range(2)]
    return recs


def _onehot(records, n):
    return np.eye(n)[[r.identity for r in records]]


class TestMetricOracle:
    def test_hand_case(self):
        m = cmc_map_minp(np.array([[True, False, True]]))
        # 5/6 is not representable; the two sides differ in the last ulp
        assert abs(m.mAP - 5 / 6) < 1e-15
        assert abs(m.mINP - 2 / 3) < 1e-15
        assert list(m.cmc) == [1.0, 1.0, 1.0]

    def test_all_masks_up_to_six(self):
        for mask in all_masks(6):
            if not any(mask):
                continue
            cmc, ap, inp = metrics_oracle(mask)
            got = cmc_map_minp(np.array([mask]))
            assert list(got.cmc) == cmc
            assert got.mAP == ap
            assert got.mINP == inp

    def test_batch_matches_per_query_mean(self):
        masks = [m for m in all_masks(5) if len(m) == 5 and any(m)]
        got = cmc_map_minp(np.array(masks))
        per = [metrics_oracle(m) for m in masks]
        assert got.mAP == pytest.approx(np.mean([p[1] for p in per]), abs=1e-14)
        assert got.mINP == pytest.approx(np.mean([p[2] for p in per]), abs=1e-14)

    def test_queries_without_positive_excluded(self):
        got = cmc_map_minp(np.array([[False, False], [False, True]]))
        assert got.num_queries == 1 and got.num_excluded == 1
        assert got.mAP == 0.5
        with pytest.raises(EvalError):
            cmc_map_minp(np.array([[False, False]]))


class TestRanking:
    def test_argsort_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = rng.integers(-2, 3, size=(3, 4)).astype(float) + 0.01
            g = rng.integers(-2, 3, size=(7, 4)).astype(float) + 0.01
            r = rank(q, g)
            for row, dist in zip(r.order, r.distances):
                assert list(row) == argsort_oracle(list(dist))

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(1)
        q, g = rng.normal(size=(4, 6)), rng.normal(size=(9, 6))
        a = rank(q, g).order
        b = rank(q * 7.5, g * np.arange(1, 10)[:, None]).order
        assert np.array_equal(a, b)

    def test_zero_vector(self):
        with pytest.raises(EvalError):
            cosine_distance(np.zeros((1, 3)), np.ones((2, 3)))


class TestGallerySampling:
    def test_single_shot_counts(self):
        recs = _sysu_like()
        g = sample_gallery(recs, EvalProtocol(EvalMode.SYSU_ALL, Shot.SINGLE), 0)
        assert len(g) == 384
        cells = {(recs[i].identity, recs[i].camera) for i in g}
        assert len(cells) == 384

    def test_multi_shot_counts(self):
        recs = _sysu_like()
        g = sample_gallery(recs, EvalProtocol(EvalMode.SYSU_ALL, Shot.MULTI), 0)
        assert len(g) == 3840

    def test_indoor_cameras(self):
        recs = _sysu_like()
        g = sample_gallery(recs, EvalProtocol(EvalMode.SYSU_INDOOR), 0)
        assert {recs[i].camera for i in g} == {1, 2}
        assert len(g) == 192

    def test_short_cells_and_missing_cells(self):
        recs = [_rec(0, Modality.RGB, 1), _rec(0, Modality.RGB, 1), _rec(0, Modality.IR, 3)]
        g = sample_gallery(recs, EvalProtocol(EvalMode.SYSU_ALL, Shot.MULTI), 0)
        assert sorted(g) == [0, 1]

    def test_deterministic_per_seed_and_trial(self):
        recs = _sysu_like(num_ids=10)
        p = EvalProtocol(EvalMode.SYSU_ALL, seed=3)
        assert sample_gallery(recs, p, 2) == sample_gallery(recs, p, 2)
        assert sample_gallery(recs, p, 2) != sample_gallery(recs, p, 3)

    def test_regdb_modes_swap_roles(self):
        recs = [_rec(p, m, 1 if m is Modality.RGB else 2, Split.QUERY)
                for p in range(3) for m in (Modality.RGB, Modality.IR) for _ in range(2)]
        v2t = EvalProtocol(EvalMode.REGDB_V2T)
        t2v = EvalProtocol(EvalMode.REGDB_T2V)
        assert query_indices(recs, v2t) == sample_gallery(recs, t2v, 0)
        assert query_indices(recs, t2v) == sample_gallery(recs, v2t, 0)


class TestEvaluate:
    def test_oracle_model_scores_one(self):
        recs = _sysu_like(num_ids=12, per_cell=3)
        rep = evaluate(lambda rs: _onehot(rs, 12), recs, EvalProtocol(EvalMode.SYSU_ALL, num_trials=3))
        assert rep.rank1 == rep.mAP == rep.mINP == 1.0

    def test_v2t_t2v_symmetry(self):
        rng = np.random.default_rng(5)
        recs = [_rec(p, m, 1, Split.QUERY) for p in range(6) for m in (Modality.RGB, Modality.IR)
                for _ in range(3)]
        feats = rng.normal(size=(len(recs), 8))
        v2t = evaluate_features(feats, recs, EvalProtocol(EvalMode.REGDB_V2T, num_trials=1))
        t2v = evaluate_features(feats, recs, EvalProtocol(EvalMode.REGDB_T2V, num_trials=1))
        # swapping roles transposes the distance matrix
        q_v = feats[[i for i, r in enumerate(recs) if r.modality is Modality.RGB]]
        q_t = feats[[i for i, r in enumerate(recs) if r.modality is Modality.IR]]
        assert np.allclose(cosine_distance(q_v, q_t), cosine_distance(q_t, q_v).T, atol=1e-15)
        assert v2t.trials[0].num_queries == t2v.trials[0].num_queries == 18

    def test_bit_identical_repeats(self):
        recs = _sysu_like(num_ids=20, per_cell=4)
        feats = np.random.default_rng(6).normal(size=(len(recs), 16))
        fn = lambda rs: feats[:len(rs)]  # noqa: E731
        a = evaluate(fn, recs, EvalProtocol(EvalMode.SYSU_ALL, seed=4)).to_dict()
        b = evaluate(fn, recs, EvalProtocol(EvalMode.SYSU_ALL, seed=4)).to_dict()
        assert json.dumps(a) == json.dumps(b)

    def test_trial_average_equals_single_trial_mean(self):
        recs = _sysu_like(num_ids=20, per_cell=4)
        feats = np.random.default_rng(7).normal(size=(len(recs), 16))
        ten = evaluate_features(feats, recs, EvalProtocol(EvalMode.SYSU_ALL, num_trials=10, seed=1))
        singles = [evaluate_features(feats, recs, EvalProtocol(EvalMode.SYSU_ALL, num_trials=1, seed=1,
                                                                trial_offset=t)) for t in range(10)]
        assert abs(ten.rank1 - np.mean([s.rank1 for s in singles])) < 1e-12
        assert abs(ten.mAP - np.mean([s.mAP for s in singles])) < 1e-12
        assert abs(ten.mINP - np.mean([s.mINP for s in singles])) < 1e-12

    def test_reports(self, tmp_path):
        recs = _sysu_like(num_ids=8, per_cell=2)
        feats = np.random.default_rng(8).normal(size=(len(recs), 4))
        rep = evaluate_features(feats, recs, EvalProtocol(EvalMode.SYSU_ALL, num_trials=2))
        rows = list(csv.DictReader(rep.write_csv(tmp_path / "m.csv").open()))
        assert [r["trial"] for r in rows] == ["0", "1", "mean"]
        assert list(rows[0]) == ["mode", "shot", "trial", "r1", "r10", "r20", "map", "minp"]
        data = json.loads(rep.write_json(tmp_path / "m.json").read_text())
        assert data["num_trials"] == 2 and len(data["cmc"]) == 32
        assert "R1" in rep.summary()


def test_embedding_geometry():
    recs = [_rec(p, m, 1) for p in range(3) for m in (Modality.RGB, Modality.IR)]
    feats = np.array([[1, 0, 0], [1, 0.1, 0], [0, 1, 0], [0.1, 1, 0], [0, 0, 1], [0, 0.1, 1]], dtype=float)
    geo = embedding_geometry(feats, recs)
    assert geo["num_identities"] == 3
    assert geo["d_intra"] < geo["d_inter"]
