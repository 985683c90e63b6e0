"""Single-relevant-item ranking metrics for the one-positive-many-negatives
protocol."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CUTOFFS = (4, 8, 20)
METRICS = ("ndcg", "mrr", "hr")


def _check(rank):
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")


def ndcg_at(rank: int, n: int) -> float:
    _check(rank)
    return 1.0 / math.log2(rank + 1) if rank <= n else 0.0


def mrr_at(rank: int, n: int) -> float:
    _check(rank)
    return 1.0 / rank if rank <= n else 0.0


def hr_at(rank: int, n: int) -> float:
    _check(rank)
    return 1.0 if rank <= n else 0.0


METRIC_FNS = {"ndcg": ndcg_at, "mrr": mrr_at, "hr": hr_at}


@dataclass
class RankResult:
    candidates: np.ndarray
    scores: np.ndarray
    rank_of_positive: int


def rank_of_positive(scores, candidates, positive_col: int = 0) -> int:
    """1-based rank; ties ordered by candidate id ascending."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    s, c = scores[positive_col], candidates[positive_col]
    ahead = (scores > s) | ((scores == s) & (candidates < c))
    return int(ahead.sum()) + 1


def ranks(scores, candidates, positive_col: int = 0) -> np.ndarray:
    """Vectorised :func:`rank_of_positive` over rows."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    s = scores[:, positive_col:positive_col + 1]
    c = candidates[:, positive_col:positive_col + 1]
    ahead = (scores > s) | ((scores == s) & (candidates < c))
    return ahead.sum(axis=1) + 1


def metrics_from_ranks(rank_arr) -> dict:
    r = np.asarray(rank_arr, dtype=np.float64)
    if r.size and r.min() < 1:
        raise ValueError("ranks must be >= 1")
    out = {}
    for n in CUTOFFS:
        hit = r <= n
        out.setdefault("ndcg", {})[n] = float(np.where(hit, 1.0 / np.log2(r + 1), 0.0).mean()) if r.size else 0.0
        out.setdefault("mrr", {})[n] = float(np.where(hit, 1.0 / r, 0.0).mean()) if r.size else 0.0
        out.setdefault("hr", {})[n] = float(hit.mean()) if r.size else 0.0
    return out


def evaluate_scores(scores, candidates) -> dict:
    return metrics_from_ranks(ranks(scores, candidates))


@dataclass
class EvalReport:
    per_seed: dict
    mean: dict
    std: dict

    def ndcg4(self):
        return self.mean["ndcg"][4]


def evaluate(scorer, blocks_by_seed: dict) -> EvalReport:
    """Score each seed's candidate block and aggregate.

    ``scorer(block)`` returns (n, C) scores with column 0 the positive;
    ``block.candidates`` supplies the ids used for tie-breaking.
    """
    per_seed = {seed: evaluate_scores(scorer(block), block.candidates) for seed, block in blocks_by_seed.items()}
    mean, std = {}, {}
    for m in METRICS:
        for n in CUTOFFS:
            vals = [per_seed[s][m][n] for s in per_seed]
            mean.setdefault(m, {})[n] = float(np.mean(vals))
            std.setdefault(m, {})[n] = float(np.std(vals))
    return EvalReport(per_seed, mean, std)


def results_record(dataset: str, variant: str, seed, metrics: dict) -> dict:
    return {
        "dataset": dataset,
        "variant": variant,
        "seed": seed,
        "metrics": {m: {str(n): metrics[m][n] for n in CUTOFFS} for m in METRICS},
    }


def write_results_json(path, record):
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path
