import json
import math

import numpy as np
import pytest

from qin.metrics import (
    CUTOFFS, evaluate, evaluate_scores, hr_at, metrics_from_ranks, mrr_at, ndcg_at, rank_of_positive, ranks,
    results_record, write_results_json,
)


class _Block:
    def __init__(self, candidates):
        self.candidates = np.asarray(candidates)


@pytest.mark.parametrize("n", CUTOFFS)
def test_rank_one_is_perfect(n):
    assert (ndcg_at(1, n), mrr_at(1, n), hr_at(1, n)) == (1.0, 1.0, 1.0)


def test_rank_two_at_four():
    assert ndcg_at(2, 4) == pytest.approx(0.63093, abs=1e-5)
    assert mrr_at(2, 4) == 0.5
    assert hr_at(2, 4) == 1.0


def test_rank_outside_cutoff():
    assert (ndcg_at(5, 4), mrr_at(5, 4), hr_at(5, 4)) == (0.0, 0.0, 0.0)


def test_rank_below_one_rejected():
    for fn in (ndcg_at, mrr_at, hr_at):
        with pytest.raises(ValueError):
            fn(0, 4)
    with pytest.raises(ValueError):
        metrics_from_ranks([1, 0])


def test_exhaustive_invariants():
    for rank in range(1, 102):
        for fn in (ndcg_at, mrr_at, hr_at):
            assert fn(rank, 4) <= fn(rank, 8) <= fn(rank, 20)
        for n in CUTOFFS:
            assert hr_at(rank, n) >= ndcg_at(rank, n) >= mrr_at(rank, n)


def test_ties_go_against_the_positive():
    # positive id 50 ties with ids 10 and 90; only id 10 sorts ahead
    assert rank_of_positive([0.5, 0.5, 0.5, 0.9], [50, 10, 90, 7]) == 3
    assert rank_of_positive([0.5, 0.5], [3, 9]) == 1


def test_constant_score_hand_fixture():
    # every score equal, so the rank is 1 + number of smaller candidate ids
    cands = np.array([[5, 1, 9, 7], [2, 8, 9, 3], [4, 5, 1, 2]])
    scores = np.zeros(cands.shape)
    r = ranks(scores, cands)
    assert r.tolist() == [2, 1, 3]
    m = evaluate_scores(scores, cands)
    assert m["hr"][4] == pytest.approx(1.0)
    assert m["mrr"][4] == pytest.approx((1 / 2 + 1 + 1 / 3) / 3)
    assert m["ndcg"][4] == pytest.approx((1 / math.log2(3) + 1 + 0.5) / 3)
    assert m["hr"][20] == 1.0


def test_vector_path_matches_loop_oracle():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, size=(300, 101)).astype(float)  # many ties
    cands = np.stack([rng.permutation(500)[:101] + 1 for _ in range(300)])
    got = evaluate_scores(scores, cands)
    for n in CUTOFFS:
        loop = {"ndcg": 0.0, "mrr": 0.0, "hr": 0.0}
        for s, c in zip(scores, cands):
            k = rank_of_positive(s, c)
            loop["ndcg"] += ndcg_at(k, n)
            loop["mrr"] += mrr_at(k, n)
            loop["hr"] += hr_at(k, n)
        for name in loop:
            assert got[name][n] == pytest.approx(loop[name] / len(scores), abs=1e-12)


def test_random_scores_hit_rate_matches_binomial():
    rng = np.random.default_rng(1)
    n = 2000
    scores = rng.random((n, 101))
    cands = np.tile(np.arange(1, 102), (n, 1))
    hr20 = evaluate_scores(scores, cands)["hr"][20]
    p = 20 / 101
    assert abs(hr20 - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_evaluate_reports_mean_and_std():
    blocks = {0: _Block([[1, 2, 3]]), 1: _Block([[3, 2, 1]])}
    scorer = lambda b: np.zeros(b.candidates.shape)  # noqa: E731
    rep = evaluate(scorer, blocks)
    assert rep.per_seed[0]["hr"][4] == 1.0
    assert rep.per_seed[0]["mrr"][4] == 1.0
    assert rep.per_seed[1]["mrr"][4] == pytest.approx(1 / 3)
    assert rep.mean["mrr"][4] == pytest.approx((1 + 1 / 3) / 2)
    assert rep.std["mrr"][4] == pytest.approx((1 - 1 / 3) / 2)


def test_results_json_shape(tmp_path):
    m = metrics_from_ranks([1, 3, 30])
    rec = results_record("synthetic", "QIN", 0, m)
    write_results_json(tmp_path / "r.json", rec)
    back = json.loads((tmp_path / "r.json").read_text())
    assert set(back) == {"dataset", "variant", "seed", "metrics"}
    assert set(back["metrics"]) == {"ndcg", "mrr", "hr"}
    assert set(back["metrics"]["hr"]) == {"4", "8", "20"}
    assert back["metrics"]["hr"]["20"] == pytest.approx(2 / 3)
