"""Relevance search over a behavior sequence.

Stage one keeps the K1 behaviors most relevant to the query; stage two keeps
the K2 of those most relevant to the candidate item. Ties go to the more
recent behavior and every result is returned in chronological order.
"""

from __future__ import annotations

import csv
import heapq
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_STAGE = "two_stage"
ONE_STAGE_QUERY = "one_stage_query"
ONE_STAGE_TARGET = "one_stage_target"
VARIANTS = (TWO_STAGE, ONE_STAGE_QUERY, ONE_STAGE_TARGET)

# ablation names used in reports
VARIANT_LABELS = {ONE_STAGE_QUERY: "RSU_one", ONE_STAGE_TARGET: "RSU_SIM", TWO_STAGE: "RSU_two"}


@dataclass(frozen=True)
class RsuConfig:
    K1: int = 50
    K2: int = 10
    variant: str = TWO_STAGE
    hard_search: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown RSU variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K2 < 1:
            raise ValueError("K2 must be at least 1")
        if self.variant == TWO_STAGE and not self.K1 > self.K2:
            raise ValueError(f"two-stage RSU needs K1 > K2, got K1={self.K1}, K2={self.K2}")
        return self


@dataclass
class Subsequence:
    positions: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.positions)


def score_vectors(vectors, probe) -> np.ndarray:
    """Dot products, compared at float32 resolution so that equal products
    reached through different summation orders tie exactly."""
    v = np.asarray(vectors, dtype=np.float64)
    return (v @ np.asarray(probe, dtype=np.float64)).astype(np.float32)


def top_k_positions(scores, k: int, candidates=None) -> Subsequence:
    """Bounded-heap top-k over ``candidates`` (default: all positions).

    Ordering key is (score, position), so later positions win ties.
    """
    scores = np.asarray(scores)
    if candidates is None:
        candidates = range(len(scores))
    s = scores.tolist()
    best = heapq.nlargest(k, ((s[p], p) for p in candidates))
    pos = np.array(sorted(p for _, p in best), dtype=np.int64)
    return Subsequence(pos, scores[pos] if len(pos) else np.zeros(0, dtype=scores.dtype))


def _live(mask, n):
    if mask is None:
        return list(range(n))
    return np.flatnonzero(np.asarray(mask, dtype=bool)).tolist()


def stage_one(query_vec, seq_vectors, K1: int, mask=None) -> Subsequence:
    """Top-K1 live behaviors by relevance to the query."""
    seq_vectors = np.asarray(seq_vectors)
    scores = score_vectors(seq_vectors, query_vec)
    return top_k_positions(scores, K1, _live(mask, len(seq_vectors)))


def stage_two(target_vec, seq_vectors, stage1: Subsequence, K2: int) -> Subsequence:
    """Top-K2 of a stage-one result by relevance to the target item."""
    if len(stage1) == 0:
        return Subsequence(np.zeros(0, np.int64), np.zeros(0, np.float32))
    seq_vectors = np.asarray(seq_vectors)
    scores = np.zeros(len(seq_vectors), dtype=np.float32)
    scores[stage1.positions] = score_vectors(seq_vectors[stage1.positions], target_vec)
    return top_k_positions(scores, K2, stage1.positions.tolist())


def hard_scores(seq_attrs, target_attr) -> np.ndarray:
    return (np.asarray(seq_attrs) == target_attr).astype(np.float32)


def run_variant(config: RsuConfig, query_vec, target_vec, seq_vectors, mask=None,
                seq_attrs=None, target_attr=None) -> Subsequence:
    config.validate()
    seq_vectors = np.asarray(seq_vectors)
    if config.variant == ONE_STAGE_QUERY:
        return stage_one(query_vec, seq_vectors, config.K2, mask)
    if config.variant == ONE_STAGE_TARGET:
        live = _live(mask, len(seq_vectors))
        if config.hard_search:
            if seq_attrs is None or target_attr is None:
                raise ValueError("hard search needs sequence and target attributes")
            scores = hard_scores(seq_attrs, target_attr)
        else:
            scores = score_vectors(seq_vectors, target_vec)
        return top_k_positions(scores, config.K2, live)
    first = stage_one(query_vec, seq_vectors, config.K1, mask)
    return stage_two(target_vec, seq_vectors, first, config.K2)


# ---------------------------------------------------------------------------
# batch path used to precompute training / evaluation inputs
# ---------------------------------------------------------------------------

def _batch_topk(scores, k, positions):
    """Rows of ``scores`` (-inf = excluded); returns chosen positions sorted
    ascending, -1 where fewer than k live entries exist (left-padded)."""
    order = np.lexsort((-positions, -scores.astype(np.float64)), axis=-1)[..., :k]
    chosen = np.take_along_axis(positions, order, axis=-1)
    ok = np.isfinite(np.take_along_axis(scores, order, axis=-1))
    chosen = np.where(ok, chosen, -1)
    chosen.sort(axis=-1)
    if chosen.shape[-1] < k:
        pad = np.full(chosen.shape[:-1] + (k - chosen.shape[-1],), -1, dtype=chosen.dtype)
        chosen = np.concatenate([pad, chosen], axis=-1)
    return chosen


def select_batch(config: RsuConfig, item_vectors, query_vectors, hist_items, hist_mask,
                 queries, candidates, item_attr=None, chunk: int = 256) -> np.ndarray:
    """RSU selections for many (sample, candidate) pairs at once.

    hist_items/hist_mask: (n, N); queries: (n,); candidates: (n, C).
    Returns (n, C, K2) positions into the history, -1 for padding slots.
    Stage one is computed once per sample and shared by its candidates.
    """
    config.validate()
    n, N = hist_items.shape
    C = candidates.shape[1]
    K2 = config.K2
    out = np.full((n, C, K2), -1, dtype=np.int64)
    iv = np.asarray(item_vectors, dtype=np.float64)
    qv = np.asarray(query_vectors, dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        h_items = hist_items[lo:hi]
        live = hist_mask[lo:hi].astype(bool)
        m = hi - lo
        pos = np.broadcast_to(np.arange(N), (m, N))
        hvec = iv[h_items]  # (m, N, D)
        tvec = iv[candidates[lo:hi]]  # (m, C, D)

        if config.variant == ONE_STAGE_TARGET:
            if config.hard_search:
                attrs = item_attr[h_items]
                tattr = item_attr[candidates[lo:hi]]
                s = (attrs[:, None, :] == tattr[:, :, None]).astype(np.float32)
            else:
                s = (tvec @ np.swapaxes(hvec, 1, 2)).astype(np.float32)  # (m, C, N)
            s = np.where(live[:, None, :], s, -np.inf)
            out[lo:hi] = _batch_topk(s, K2, np.broadcast_to(pos[:, None, :], s.shape))
            continue

        qs = np.einsum("mnd,md->mn", hvec, qv[queries[lo:hi]]).astype(np.float32)
        qs = np.where(live, qs, -np.inf)
        if config.variant == ONE_STAGE_QUERY:
            sel = _batch_topk(qs, K2, pos)
            out[lo:hi] = np.broadcast_to(sel[:, None, :], (m, C, K2))
            continue

        k1 = min(config.K1, N)
        first = _batch_topk(qs, k1, pos)  # (m, k1), -1 pads
        valid = first >= 0
        fvec = np.take_along_axis(hvec, np.maximum(first, 0)[..., None], axis=1)  # (m, k1, D)
        s = (tvec @ np.swapaxes(fvec, 1, 2)).astype(np.float32)  # (m, C, k1)
        s = np.where(valid[:, None, :], s, -np.inf)
        chosen = _batch_topk(s, K2, np.broadcast_to(first[:, None, :], s.shape))
        out[lo:hi] = chosen
    return out


# ---------------------------------------------------------------------------
# complexity benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    variant: str
    N: int
    M: int
    D: int
    K1: int
    K2: int
    mean_ns: float
    std_ns: float
    analytic_ratio: float


def analytic_ratio(N: int, M: int, K1: int) -> float:
    """Scoring work of per-target search over two-stage search: NM / (N + M K1)."""
    return (N * M) / (N + M * K1)


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def two_stage_pass(history, query, targets, K1, K2, workers=1):
    first = top_k_positions(score_vectors(history, query), K1)
    sub = history[first.positions]

    def per_target(t):
        return top_k_positions(score_vectors(sub, t), K2)
    return _map(per_target, targets, workers)


def one_stage_pass(history, targets, K2, workers=1):
    def per_target(t):
        return top_k_positions(score_vectors(history, t), K2)
    return _map(per_target, targets, workers)


def complexity_bench(N: int = 10_000, M: int = 100, D: int = 8, K1: int = 50, K2: int = 10,
                     trials: int = 5, seed: int = 0, workers: int = 1) -> list:
    """Time two-stage search against one-stage-per-target search."""
    if not N >= K1 > K2 or M < 1:
        raise ValueError(f"benchmark needs N >= K1 > K2 and M >= 1 (N={N}, K1={K1}, K2={K2}, M={M})")
    rng = np.random.default_rng(seed)
    history = rng.normal(size=(N, D))
    history /= np.linalg.norm(history, axis=1, keepdims=True)
    query = rng.normal(size=D)
    targets = list(rng.normal(size=(M, D)))
    ratio = analytic_ratio(N, M, K1)

    def timed(fn):
        fn()  # warm-up
        samples = []
        for _ in range(trials):
            t0 = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - t0)
        return statistics.fmean(samples), (statistics.stdev(samples) if len(samples) > 1 else 0.0)

    two = timed(lambda: two_stage_pass(history, query, targets, K1, K2, workers))
    one = timed(lambda: one_stage_pass(history, targets, K2, workers))
    return [
        BenchResult(TWO_STAGE, N, M, D, K1, K2, two[0], two[1], ratio),
        BenchResult("one_stage_per_target", N, M, D, K1, K2, one[0], one[1], ratio),
    ]


def measured_speedup(results) -> float:
    by = {r.variant: r for r in results}
    return by["one_stage_per_target"].mean_ns / by[TWO_STAGE].mean_ns


BENCH_FIELDS = ("variant", "N", "M", "D", "K1", "K2", "mean_ns", "std_ns", "analytic_ratio")


def write_bench_csv(results, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_FIELDS)
        for r in results:
            w.writerow([r.variant, r.N, r.M, r.D, r.K1, r.K2, f"{r.mean_ns:.1f}", f"{r.std_ns:.1f}",
                        f"{r.analytic_ratio:.4f}"])
    return path
