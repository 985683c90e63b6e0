"""Command-line entry point: ``qin prepare | train | eval | ablate | bench | sweep-alpha``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error (including missing inputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import ALL_VARIANTS, UsageError, RunConfig, parse_text
from .dataset import (
    Dataset, dataset_from_reviews, five_core_filter, generate_synthetic, leave_one_out_split, load_reviews,
    sequence_offsets, write_stats,
)
from .metrics import CUTOFFS, METRICS, results_record, write_results_json
from .model import QIN, config_to_text, load_checkpoint, save_checkpoint
from .relevance import RelevanceIndex, build_index
from .rsu import complexity_bench, measured_speedup, write_bench_csv
from .training import (
    TrainResult, evaluate_test, fit_and_evaluate, prepare, resolve_variant, write_history_csv,
)

log = logging.getLogger("qin")

# flag -> config key, shared by every command
FLAG_KEYS = {
    "seed": "train.seed",
    "seeds": "run.seeds",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch": "train.batch",
    "alpha": "model.alpha",
    "variant": "model.variant",
    "variants": "run.variants",
    "workers": "run.workers",
    "out": "run.out",
    "cache_root": "run.cache_root",
    "checkpoint": "run.checkpoint",
    "source": "data.source",
    "raw": "data.raw",
    "meta": "data.meta",
    "name": "data.name",
    "data_seed": "data.seed",
}


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--cache-root", dest="cache_root", help="dataset cache root (default: $QIN_CACHE_ROOT)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", help="worker threads (default 1)")
    common.add_argument("--name", help="dataset name inside the cache")
    common.add_argument("-v", "--verbose", action="store_true")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--seed")
    train_opts.add_argument("--epochs")
    train_opts.add_argument("--lr")
    train_opts.add_argument("--batch")
    train_opts.add_argument("--alpha")

    p = argparse.ArgumentParser(prog="qin", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prepare", parents=[common], help="build the dataset cache")
    pr.add_argument("--source", choices=("synthetic", "amazon"))
    pr.add_argument("--raw", help="review file (.json or .json.gz)")
    pr.add_argument("--meta", help="item metadata file with categories")
    pr.add_argument("--data-seed", dest="data_seed", help="synthetic generator seed")

    tr = sub.add_parser("train", parents=[common, train_opts], help="train one model")
    tr.add_argument("--variant", help="model or RSU ablation label")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint")
    ev.add_argument("--seeds", help="comma-separated negative-sampling seeds")

    ab = sub.add_parser("ablate", parents=[common, train_opts], help="variants x seeds table")
    ab.add_argument("--variants", help=f"comma-separated, default {','.join(ALL_VARIANTS)}")
    ab.add_argument("--seeds")

    sub.add_parser("bench", parents=[common], help="two-stage vs one-stage search timing")

    sw = sub.add_parser("sweep-alpha", parents=[common, train_opts], help="metrics across alpha")
    sw.add_argument("--seeds")
    sw.add_argument("--variant")
    return p


def resolve(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.load_file(args.config)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, str(value))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("run.out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, directory: Path):
    (directory / "config.txt").write_text(cfg.to_text())


# ---------------------------------------------------------------------------
# dataset cache
# ---------------------------------------------------------------------------

def _cache_dir(cfg: RunConfig) -> Path:
    return cfg.cache_root() / cfg.dataset_name()


def _load_cached(cfg: RunConfig):
    d = _cache_dir(cfg)
    if not (d / "vocab.json").is_file():
        raise UsageError(f"no prepared dataset at {d}; run 'qin prepare' first")
    index_path = d / "relevance.idx"
    return Dataset.load(d), (RelevanceIndex.load(index_path) if index_path.is_file() else None)


def cmd_prepare(cfg: RunConfig) -> int:
    source = cfg.get("data.source")
    if source == "synthetic":
        ds = generate_synthetic(cfg.synthetic(), seed=cfg.get("data.seed"))
    else:
        raw = cfg.get("data.raw")
        if not raw or not Path(raw).is_file():
            raise UsageError(f"review file not found: {raw!r} (set --raw)")
        meta = cfg.get("data.meta") or None
        if meta and not Path(meta).is_file():
            raise UsageError(f"metadata file not found: {meta}")
        reviews = five_core_filter(load_reviews(raw, meta_path=meta))
        ds = dataset_from_reviews(reviews, name=cfg.dataset_name())
    d = _cache_dir(cfg)
    ds.save(d)
    tc = cfg.train()
    start, stop = sequence_offsets(ds, tc.history_len)
    np.save(d / "seq_start.npy", start)
    np.save(d / "seq_stop.npy", stop)
    split = leave_one_out_split(ds, positions=ds.search_indices())
    manifest = {"history_len": tc.history_len, "train": split.train, "validation": split.validation,
                "test": split.test}
    (d / "split.json").write_text(json.dumps(manifest, separators=(",", ":")) + "\n")
    build_index(ds, dim=tc.relevance_dim, seed=0).save(d / "relevance.idx")
    write_stats(ds, d / "stats.tsv")
    _write_config(cfg, d)
    stats = ds.stats()
    print("\t".join(stats))
    print("\t".join(str(v) for v in stats.values()))
    return 0


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _metric_row(metrics: dict) -> dict:
    return {f"{m}@{n}": f"{metrics[m][n]:.6f}" for m in METRICS for n in CUTOFFS}


def _run(cfg, ds, index, label, seed, progress=None):
    fau, rsu = resolve_variant(label, cfg.fau(), cfg.rsu())
    tc = cfg.train(seed)
    result, report = fit_and_evaluate(ds, fau, rsu, tc, index=index, progress=progress)
    return fau, rsu, tc, result, report


def cmd_train(cfg: RunConfig) -> int:
    ds, index = _load_cached(cfg)
    out = _out_dir(cfg)
    label = cfg.get("model.variant")
    seed = cfg.get("train.seed")
    fau, rsu, tc, result, report = _run(cfg, ds, index, label, seed,
                                        progress=lambda r: log.info("epoch %(epoch)d val ndcg@4 %(val_ndcg4).4f", r))
    ckpt = save_checkpoint(out / "model.ckpt", result.best_state)
    (out / "model.config.txt").write_text(config_to_text(
        {"model": fau, "rsu": rsu, "train": tc, "sizes": result.model.sizes, "meta": {"variant": label, "dataset": ds.name}}))
    write_history_csv(result.history, out / "history.csv")
    plotting.plot_history(result.history, out / "history.png")
    rec = results_record(cfg.dataset_name(), label, seed, report.mean)
    write_results_json(out / "results.json", rec)
    _write_config(cfg, out)
    print(f"checkpoint\t{ckpt}")
    print("\t".join(_metric_row(report.mean)))
    print("\t".join(_metric_row(report.mean).values()))
    return 0


def _config_from_text(text: str):
    flat = parse_text(text)
    tmp = RunConfig()
    for k, v in flat.items():
        section = k.split(".", 1)[0]
        if section in ("model", "rsu", "train"):
            tmp.set(k, v)
    sizes = {k.split(".", 1)[1]: int(v) for k, v in flat.items() if k.startswith("sizes.")}
    return tmp, sizes, flat.get("meta.variant", "QIN")


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = Path(cfg.get("run.checkpoint") or out / "model.ckpt")
    side = ckpt.with_name("model.config.txt")
    if not ckpt.is_file() or not side.is_file():
        raise UsageError(f"checkpoint or its model.config.txt missing: {ckpt}")
    ds, index = _load_cached(cfg)
    saved, sizes, label = _config_from_text(side.read_text())
    fau, rsu, tc = saved.fau(), saved.rsu(), saved.train()
    model = QIN(fau, seed=0, **sizes)
    model.load_state(load_checkpoint(ckpt))
    prepared = prepare(ds, tc, rsu, index=index)
    report = evaluate_test(TrainResult(model, model.state(), 0), prepared, seeds=list(cfg.get("run.seeds")), config=tc, rsu=rsu)
    for s, m in report.per_seed.items():
        write_results_json(out / f"eval_seed{s}.json", results_record(cfg.dataset_name(), label, s, m))
    write_results_json(out / "eval.json", results_record(cfg.dataset_name(), label, "mean", report.mean))
    _write_config(cfg, out)
    print("\t".join(["seed", *_metric_row(report.mean)]))
    for s, m in report.per_seed.items():
        print("\t".join([str(s), *_metric_row(m).values()]))
    return 0


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_ablate(cfg: RunConfig) -> int:
    ds, index = _load_cached(cfg)
    out = _out_dir(cfg)
    rows = []
    for label in cfg.get("run.variants"):
        for seed in cfg.get("run.seeds"):
            _, _, _, _, report = _run(cfg, ds, index, label, seed)
            write_results_json(out / f"results_{label}_seed{seed}.json",
                               results_record(cfg.dataset_name(), label, seed, report.mean))
            rows.append({"variant": label, "seed": seed, **_metric_row(report.mean)})
            log.info("%s seed %s ndcg@4 %s", label, seed, rows[-1]["ndcg@4"])
    _write_rows(out / "ablation.csv", rows)
    plotting.plot_ablation(rows, out / "ablation.png")
    _write_config(cfg, out)
    _print_rows(rows)
    return 0


def cmd_sweep_alpha(cfg: RunConfig) -> int:
    ds, index = _load_cached(cfg)
    out = _out_dir(cfg)
    label = cfg.get("model.variant")
    rows = []
    for alpha in cfg.get("run.alphas"):
        cfg.set("model.alpha", float(alpha))
        per_seed = []
        for seed in cfg.get("run.seeds"):
            _, _, _, _, report = _run(cfg, ds, index, label, seed)
            per_seed.append(report.mean)
        row = {"alpha": f"{alpha:g}"}
        for m in METRICS:
            for n in CUTOFFS:
                vals = [r[m][n] for r in per_seed]
                row[f"{m}@{n}"] = f"{np.mean(vals):.6f}"
                row[f"{m}@{n}_std"] = f"{np.std(vals):.6f}"
        rows.append(row)
    _write_rows(out / "alpha_sweep.csv", rows)
    plotting.plot_alpha_sweep(rows, out / "alpha_sweep.png")
    _write_config(cfg, out)
    _print_rows(rows)
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    b = {k: cfg.get(f"bench.{k}") for k in ("N", "M", "D", "K1", "K2", "trials")}
    results = complexity_bench(workers=cfg.get("run.workers"), **b)
    write_bench_csv(results, out / "bench.csv")
    plotting.plot_bench(results, out / "bench.png")
    _write_config(cfg, out)
    print((out / "bench.csv").read_text(), end="")
    print(f"measured_speedup\t{measured_speedup(results):.2f}")
    return 0


def _print_rows(rows):
    print("\t".join(rows[0]))
    for r in rows:
        print("\t".join(str(v) for v in r.values()))


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "sweep-alpha": cmd_sweep_alpha,
}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if cfg.get("run.workers") < 1:
            raise UsageError("--workers must be at least 1")
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"qin {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"qin {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
