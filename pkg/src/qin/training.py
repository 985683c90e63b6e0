"""Sample assembly, the optimisation loop and best-validation selection."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataset import UNKNOWN_QUERY, Dataset, build_sequences, leave_one_out_split, sample_negatives
from .metrics import EvalReport, evaluate, evaluate_scores
from .model import QIN, Batch, FauConfig, variant_config
from .relevance import RelevanceIndex, build_index
from .rsu import RsuConfig, select_batch

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch: int = 512
    epochs: int = 20
    seed: int = 0
    patience: int = 5
    n_neg: int = 100
    p_mask: float = 0.1
    history_len: int = 100
    relevance_dim: int = 256

    def validate(self):
        if self.lr < 0 or self.batch < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("train config: lr >= 0, batch/epochs/patience >= 1 required")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError("train config: p_mask must lie in [0, 1]")
        if self.n_neg < 1 or self.history_len < 1:
            raise ValueError("train config: n_neg and history_len must be positive")
        return self


@dataclass
class SampleBlock:
    """Samples with their candidates (column 0 = positive) and RSU picks."""

    rows: np.ndarray
    user: np.ndarray
    query: np.ndarray
    candidates: np.ndarray
    hist_items: np.ndarray
    hist_eng: np.ndarray
    hist_mask: np.ndarray
    positions: np.ndarray
    positions_unknown: np.ndarray | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def labels(self):
        lab = np.zeros(self.candidates.shape, np.float32)
        lab[:, 0] = 1.0
        return lab


def build_block(dataset: Dataset, index: RelevanceIndex, rows, rsu: RsuConfig, n_neg: int,
                seed: int, history_len: int, with_unknown: bool = False) -> SampleBlock:
    rows = np.asarray(rows, dtype=np.int64)
    seqs = build_sequences(dataset, history_len, samples=rows)
    pos = dataset.item[rows]
    negs = np.stack([sample_negatives(int(p), dataset.n_items, n_neg, seed, int(r)) for p, r in zip(pos, rows)]) \
        if len(rows) else np.zeros((0, n_neg), np.int64)
    cands = np.concatenate([pos[:, None], negs], axis=1)
    query = dataset.query[rows]
    sel = select_batch(rsu, index.item_vectors, index.query_vectors, seqs.items, seqs.mask, query,
                       cands, dataset.item_attr)
    sel_unk = None
    if with_unknown:
        sel_unk = select_batch(rsu, index.item_vectors, index.query_vectors, seqs.items, seqs.mask,
                               np.full_like(query, UNKNOWN_QUERY), cands, dataset.item_attr)
    return SampleBlock(rows, dataset.user[rows], query, cands, seqs.items, seqs.engagement_ids,
                       seqs.mask, sel, sel_unk)


def make_batch(block: SampleBlock, item_attr, sel, query_mask=None) -> Batch:
    """Flatten block rows ``sel`` x all candidates into model rows."""
    C = block.candidates.shape[1]
    picks = block.positions[sel]
    query = block.query[sel].copy()
    if query_mask is not None and query_mask.any():
        picks = picks.copy()
        picks[query_mask] = block.positions_unknown[sel][query_mask]
        query[query_mask] = UNKNOWN_QUERY
    live = picks >= 0
    safe = np.maximum(picks, 0)
    items = np.take_along_axis(block.hist_items[sel][:, None, :].repeat(C, 1), safe, axis=2)
    eng = np.take_along_axis(block.hist_eng[sel][:, None, :].repeat(C, 1), safe, axis=2)
    items = np.where(live, items, 0)
    eng = np.where(live, eng, 0)
    K2 = picks.shape[-1]
    target = block.candidates[sel].reshape(-1)
    return Batch(
        user=np.repeat(block.user[sel], C),
        query=np.repeat(query, C),
        target=target,
        target_attr=item_attr[target],
        seq_items=items.reshape(-1, K2),
        seq_attrs=item_attr[items].reshape(-1, K2),
        seq_eng=eng.reshape(-1, K2),
        seq_mask=live.reshape(-1, K2),
    )


def block_scorer(model: QIN, item_attr, chunk_rows: int = 256):
    def scorer(block: SampleBlock):
        C = block.candidates.shape[1]
        out = np.zeros(block.candidates.shape, np.float64)
        for lo in range(0, len(block), chunk_rows):
            sel = np.arange(lo, min(len(block), lo + chunk_rows))
            out[sel] = model.score(make_batch(block, item_attr, sel)).reshape(len(sel), C)
        return out
    return scorer


@dataclass
class Prepared:
    dataset: Dataset
    index: RelevanceIndex
    train: SampleBlock
    validation: SampleBlock
    test: SampleBlock


def prepare(dataset: Dataset, config: TrainConfig, rsu: RsuConfig, index: RelevanceIndex | None = None,
            test_seed: int | None = None) -> Prepared:
    index = index or build_index(dataset, dim=config.relevance_dim, seed=0)
    split = leave_one_out_split(dataset, positions=dataset.search_indices())
    args = dict(rsu=rsu, n_neg=config.n_neg, history_len=config.history_len)
    return Prepared(
        dataset, index,
        build_block(dataset, index, split.train, seed=config.seed, with_unknown=config.p_mask > 0, **args),
        build_block(dataset, index, split.validation, seed=config.seed, **args),
        build_block(dataset, index, split.test, seed=config.seed if test_seed is None else test_seed, **args),
    )


@dataclass
class TrainResult:
    model: QIN
    best_state: dict
    best_epoch: int
    history: list = field(default_factory=list)


def _copy_state(model):
    return {k: v.copy() for k, v in model.state().items()}


def train(prepared: Prepared, fau: FauConfig, config: TrainConfig, progress=None) -> TrainResult:
    """Adam on summed BCE over each positive and its negatives.

    After every epoch the validation NDCG@4 decides whether the parameters
    become the new best; training stops after ``patience`` epochs without
    improvement. The returned model holds the best parameters.
    """
    config.validate()
    ds = prepared.dataset
    block = prepared.train
    model = QIN(fau, ds.n_users, ds.n_items, ds.n_attrs, ds.n_queries,
                seq_len=block.positions.shape[-1], seed=config.seed)
    values = {k: p.value for k, p in model.params.items()}
    state = nx.AdamState()
    scorer = block_scorer(model, ds.item_attr)
    history = []
    best_score, best_epoch, best_state, stale = -np.inf, 0, _copy_state(model), 0
    C = block.candidates.shape[1]
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(block))
        total, terms = 0.0, 0
        for lo in range(0, len(order), config.batch):
            sel = order[lo:lo + config.batch]
            qmask = rng.random(len(sel)) < config.p_mask if config.p_mask > 0 else None
            batch = make_batch(block, ds.item_attr, sel, qmask)
            labels = block.labels[sel].reshape(-1)
            model.zero_grad()
            loss = model.loss(batch, labels)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise DivergenceError(f"loss is {lv} at epoch {epoch}, batch starting {lo}")
            nx.backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            nx.adam_step(values, grads, state, lr=config.lr)
            total += lv
            terms += len(sel) * C
        ev = evaluate_scores(scorer(prepared.validation), prepared.validation.candidates)
        row = {
            "epoch": epoch,
            "train_loss": total / max(terms, 1),
            "val_ndcg4": ev["ndcg"][4],
            "val_mrr4": ev["mrr"][4],
            "val_hr4": ev["hr"][4],
            "wall_seconds": time.perf_counter() - t0,
        }
        history.append(row)
        if progress:
            progress(row)
        log.info("epoch %d loss %.5f val ndcg@4 %.4f", epoch, row["train_loss"], row["val_ndcg4"])
        if row["val_ndcg4"] > best_score:
            best_score, best_epoch, best_state, stale = row["val_ndcg4"], epoch, _copy_state(model), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best_state)
    return TrainResult(model, best_state, best_epoch, history)


def evaluate_test(result: TrainResult, prepared: Prepared, seeds=None, config: TrainConfig | None = None,
                rsu: RsuConfig | None = None) -> EvalReport:
    """Test metrics; extra seeds redraw the test negatives."""
    blocks = {"default": prepared.test}
    if seeds:
        blocks = {}
        split_rows = prepared.test.rows
        for s in seeds:
            blocks[s] = build_block(prepared.dataset, prepared.index, split_rows, rsu, config.n_neg, s,
                                    config.history_len)
    return evaluate(block_scorer(result.model, prepared.dataset.item_attr), blocks)


HISTORY_FIELDS = ("epoch", "train_loss", "val_ndcg4", "val_mrr4", "val_hr4", "wall_seconds")


def write_history_csv(history, path, include_wall=True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        fields = HISTORY_FIELDS if include_wall else HISTORY_FIELDS[:-1]
        w.writerow(fields)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[k]:.8f}" for k in fields[1:]])
    return Path(path)


RSU_ABLATIONS = {"RSU_one": "one_stage_query", "RSU_SIM": "one_stage_target", "RSU_two": "two_stage"}


def resolve_variant(name: str, fau: FauConfig, rsu: RsuConfig):
    """Map an ablation label to (model config, RSU config).

    RSU labels keep the configured model; model labels keep the configured
    RSU.
    """
    if name in RSU_ABLATIONS:
        return fau, replace(rsu, variant=RSU_ABLATIONS[name]).validate()
    return variant_config(name, fau), rsu


def fit_and_evaluate(dataset: Dataset, fau: FauConfig, rsu: RsuConfig, config: TrainConfig,
                     index: RelevanceIndex | None = None, progress=None):
    """Prepare samples for ``config.seed``, train, and score the test split."""
    prepared = prepare(dataset, config, rsu, index=index)
    result = train(prepared, fau, config, progress=progress)
    return result, evaluate_test(result, prepared)
