import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qin import rsu
from qin.rsu import (
    ONE_STAGE_QUERY,
    ONE_STAGE_TARGET,
    TWO_STAGE,
    RsuConfig,
    analytic_ratio,
    run_variant,
    score_vectors,
    select_batch,
    stage_one,
    stage_two,
)


def oracle_topk(scores, k, candidates):
    """Sort every candidate by (score desc, position desc), keep k, re-sort by time."""
    ranked = sorted(candidates, key=lambda p: (-float(scores[p]), -p))
    return sorted(ranked[:k])


def oracle_variant(config, q, t, vecs, mask, attrs=None, tattr=None):
    live = [p for p in range(len(vecs)) if mask[p]]
    if config.variant == ONE_STAGE_QUERY:
        return oracle_topk(score_vectors(vecs, q), config.K2, live)
    if config.variant == ONE_STAGE_TARGET:
        s = (attrs == tattr).astype(np.float32) if config.hard_search else score_vectors(vecs, t)
        return oracle_topk(s, config.K2, live)
    first = oracle_topk(score_vectors(vecs, q), config.K1, live)
    return oracle_topk(score_vectors(vecs, t), config.K2, first)


def random_instance(rng, n=None, d=None, dup_rate=0.3):
    n = n or int(rng.integers(1, 200))
    d = d or int(rng.integers(2, 9))
    base = rng.normal(size=(max(1, n // 3), d))
    vecs = base[rng.integers(len(base), size=n)] if rng.random() < dup_rate else rng.normal(size=(n, d))
    mask = rng.random(n) < 0.8
    return vecs, mask, rng.normal(size=d), rng.normal(size=d)


def test_stage_one_hand_case():
    vecs = np.array([[0.9], [0.1], [0.5]])
    assert stage_one(np.array([1.0]), vecs, 2).positions.tolist() == [0, 2]


def test_stage_one_all_when_k_large():
    vecs = np.random.default_rng(0).normal(size=(5, 3))
    mask = np.array([1, 0, 1, 1, 0], bool)
    assert stage_one(np.ones(3), vecs, 50, mask).positions.tolist() == [0, 2, 3]


def test_recency_wins_ties():
    vecs = np.ones((4, 2))
    assert stage_one(np.ones(2), vecs, 2).positions.tolist() == [2, 3]


def test_empty_sequence_gives_empty_subsequence():
    vecs = np.zeros((3, 2))
    first = stage_one(np.ones(2), vecs, 2, np.zeros(3, bool))
    assert len(first) == 0
    assert len(stage_two(np.ones(2), vecs, first, 1)) == 0


def test_stage_two_unchanged_when_k2_covers():
    rng = np.random.default_rng(1)
    vecs = rng.normal(size=(30, 4))
    first = stage_one(rng.normal(size=4), vecs, 8)
    second = stage_two(rng.normal(size=4), vecs, first, 8)
    assert second.positions.tolist() == first.positions.tolist()


def test_config_validation():
    with pytest.raises(ValueError):
        RsuConfig(K1=10, K2=10).validate()
    with pytest.raises(ValueError):
        RsuConfig(variant="nope").validate()


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_variants_match_oracle(seed):
    rng = np.random.default_rng(seed)
    vecs, mask, q, t = random_instance(rng)
    K2 = int(rng.integers(1, 15))
    K1 = K2 + int(rng.integers(1, 40))
    attrs = rng.integers(0, 4, size=len(vecs))
    for variant in rsu.VARIANTS:
        for hard in (False, True):
            cfg = RsuConfig(K1, K2, variant, hard)
            got = run_variant(cfg, q, t, vecs, mask, attrs, 2).positions.tolist()
            assert got == oracle_variant(cfg, q, t, vecs, mask, attrs, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_in_k_and_containment(seed):
    rng = np.random.default_rng(seed)
    vecs, mask, q, t = random_instance(rng)
    prev = set()
    for k in range(1, 20):
        cur = set(stage_one(q, vecs, k, mask).positions.tolist())
        assert prev <= cur
        prev = cur
    first = stage_one(q, vecs, 12, mask)
    second = stage_two(t, vecs, first, 4)
    assert set(second.positions.tolist()) <= set(first.positions.tolist())
    assert all(mask[p] for p in second.positions)
    assert list(second.positions) == sorted(second.positions)


def test_two_stage_is_composition():
    rng = np.random.default_rng(5)
    vecs, mask, q, t = random_instance(rng, n=80, d=6)
    composed = stage_two(t, vecs, stage_one(q, vecs, 20, mask), 5)
    direct = run_variant(RsuConfig(20, 5, TWO_STAGE), q, t, vecs, mask)
    assert composed.positions.tolist() == direct.positions.tolist()


def test_one_stage_target_full_length_is_identity():
    rng = np.random.default_rng(6)
    vecs = rng.normal(size=(12, 3))
    got = run_variant(RsuConfig(12, 12, ONE_STAGE_TARGET), None, rng.normal(size=3), vecs)
    assert got.positions.tolist() == list(range(12))


def test_sim_and_two_stage_can_differ():
    # items 0-3 match the query, items 4-5 match only the target
    vecs = np.array([[1, 0, 0.1]] * 4 + [[0, 1, 0]] * 2, dtype=float)
    q, t = np.array([1.0, 0, 0]), np.array([0, 1.0, 0.2])
    two = run_variant(RsuConfig(4, 2, TWO_STAGE), q, t, vecs)
    sim = run_variant(RsuConfig(4, 2, ONE_STAGE_TARGET), q, t, vecs)
    one = run_variant(RsuConfig(4, 2, ONE_STAGE_QUERY), q, t, vecs)
    assert set(two.positions) <= set(stage_one(q, vecs, 4).positions)
    assert sim.positions.tolist() == [4, 5]
    assert two.positions.tolist() != sim.positions.tolist()
    assert one.positions.tolist() == [2, 3]


@pytest.mark.parametrize("variant", rsu.VARIANTS)
@pytest.mark.parametrize("hard", [False, True])
def test_batch_path_matches_reference(variant, hard):
    rng = np.random.default_rng(11)
    n_items, D, n, N, C = 40, 6, 30, 25, 7
    base = rng.normal(size=(10, D))
    item_vecs = np.vstack([np.zeros(D), base[rng.integers(10, size=n_items)]]).astype(np.float32)
    q_vecs = np.vstack([np.zeros(D), rng.normal(size=(5, D))]).astype(np.float32)
    item_attr = np.concatenate([[0], rng.integers(1, 4, size=n_items)])
    hist = rng.integers(1, n_items + 1, size=(n, N))
    mask = rng.random((n, N)) < 0.7
    mask[0] = False
    hist[~mask] = 0
    queries = rng.integers(0, 6, size=n)
    cands = rng.integers(1, n_items + 1, size=(n, C))
    cfg = RsuConfig(K1=9, K2=4, variant=variant, hard_search=hard)
    got = select_batch(cfg, item_vecs, q_vecs, hist, mask, queries, cands, item_attr, chunk=8)
    for s in range(n):
        for c in range(C):
            ref = run_variant(cfg, q_vecs[queries[s]], item_vecs[cands[s, c]], item_vecs[hist[s]],
                              mask[s], item_attr[hist[s]], item_attr[cands[s, c]]).positions.tolist()
            row = [p for p in got[s, c] if p >= 0]
            assert row == ref
            assert list(got[s, c][: 4 - len(row)]) == [-1] * (4 - len(row))


def test_analytic_ratio():
    assert analytic_ratio(1000, 1, 50) < 1
    assert analytic_ratio(1000, 1, 50) == pytest.approx(1000 / 1050)
    assert analytic_ratio(10_000, 100, 50) == pytest.approx(1e6 / 1.5e4)


def test_bench_small_runs(tmp_path):
    res = rsu.complexity_bench(N=500, M=5, D=4, K1=20, K2=5, trials=2)
    assert [r.variant for r in res] == ["two_stage", "one_stage_per_target"]
    path = rsu.write_bench_csv(res, tmp_path / "bench.csv")
    header = path.read_text().splitlines()[0]
    assert header == "variant,N,M,D,K1,K2,mean_ns,std_ns,analytic_ratio"
