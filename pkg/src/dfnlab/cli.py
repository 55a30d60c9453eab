"""Command-line front end.

    dfn gen          generate a synthetic pool (writes shards + manifest)
    dfn train-dfn    train a filtering network on a pool
    dfn calibrate    compute a keep-fraction threshold for a checkpoint
    dfn filter       apply a filtering network to a pool
    dfn induce       train the induced model on a (filtered) pool
    dfn eval         evaluate a checkpoint on the synthetic suite
    dfn exp ...      canned experiments (poison-sweep, filter-vs-downstream,
                     interventions, robustness)
    dfn bench scaling   throughput benchmark
    dfn run-all      full lifecycle in one command

Every command takes `--config PATH` (flat key = value file; missing keys fall
back to desk-scale defaults) plus overrides: `--seed`, `--workers`, `--out`,
and for filtering `--keep-fraction` or `--threshold` (mutually exclusive).
`DFN_WORKERS` sets the default worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .evaluation import evaluate
from .experiments import (
    ExperimentConfig,
    run_bench,
    run_end_to_end,
    run_filter_vs_downstream,
    run_interventions,
    run_poison_sweep,
    run_robustness,
)
from .filtering import ClipScorer, apply_dfn, calibrate_threshold
from .model import load_model, save_model
from .shards import read_manifest
from .synth import generate_pool
from .train import train_clip, write_history_csv


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seeds"] = (args.seed,)
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = str(args.out)
    if getattr(args, "keep_fraction", None) is not None:
        updates["keep_fraction"] = args.keep_fraction
        updates["threshold"] = None
    if getattr(args, "threshold", None) is not None:
        updates["threshold"] = args.threshold
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_common(parser: argparse.ArgumentParser, filtering: bool = False) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config's seed list")
    parser.add_argument("--workers", type=int,
                        default=_env_workers(), help="shard worker count")
    parser.add_argument("--out", type=Path, help="output directory")
    if filtering:
        group = parser.add_mutually_exclusive_group()
        group.add_argument("--keep-fraction", type=float, dest="keep_fraction",
                           help="calibrate the threshold to keep this fraction")
        group.add_argument("--threshold", type=float,
                           help="fixed similarity threshold (skips calibration)")


def _env_workers() -> int | None:
    raw = os.environ.get("DFN_WORKERS")
    return int(raw) if raw else None


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    specs = cfg.pool_specs()
    if args.role not in specs:
        raise SystemExit(f"unknown pool role {args.role!r}; choose from {sorted(specs)}")
    n = args.n or {"hq": cfg.dfn_pool_size, "noisy": cfg.dfn_pool_size,
                   "raw": cfg.raw_pool_size}.get(args.role, cfg.dfn_pool_size)
    pool = generate_pool(specs[args.role], n, out, cfg.records_per_shard)
    print(f"wrote {pool.total_records} records in {len(pool.shards)} shard(s) to {out}")
    return 0


def cmd_train_dfn(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    pool = read_manifest(args.pool)
    result = train_clip(pool, cfg.dfn_train_config(cfg.seeds[0]))
    save_model(result.model, out / "dfn.ckpt")
    write_history_csv(result.history, out / "dfn-train-log.csv")
    print(f"trained filtering network on {pool.total_records} records "
          f"-> {out / 'dfn.ckpt'} (final loss {result.history[-1][1]:.4f})")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    pool = read_manifest(args.pool)
    scorer = ClipScorer(load_model(args.checkpoint))
    scores = []
    for batch in pool.iter_batches():
        scores.append(scorer.score_batch(batch))
    import numpy as np

    fc = cfg.filter_config()
    if fc.threshold is not None:
        raise SystemExit("calibrate needs a keep-fraction config, not a fixed threshold")
    threshold = calibrate_threshold(
        np.concatenate(scores), fc.effective_keep_fraction,
        mode=fc.mode, capacity=fc.reservoir_capacity, seed=fc.seed,
    )
    payload = (f'{{"keep_fraction": {fc.effective_keep_fraction}, '
               f'"mode": "{fc.mode}", "threshold": {threshold}}}')
    (out / "threshold.json").write_text(payload + "\n")
    print(payload)
    return 0


def cmd_filter(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    pool = read_manifest(args.pool)
    scorer = ClipScorer(load_model(args.checkpoint))
    filtered, report = apply_dfn(scorer, cfg.filter_config(), pool, out,
                                 workers=cfg.workers)
    (out / "filter-report.json").write_text(report.to_json() + "\n")
    print(f"kept {report.kept_count}/{report.input_count} records "
          f"(threshold {report.threshold:.6f}) -> {out}")
    return 0


def cmd_induce(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    pool = read_manifest(args.pool)
    result = train_clip(pool, cfg.induced_train_config(cfg.seeds[0]))
    save_model(result.model, out / "induced.ckpt")
    write_history_csv(result.history, out / "induced-train-log.csv")
    print(f"trained induced model on {pool.total_records} records -> {out / 'induced.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    model = load_model(args.checkpoint)
    report = evaluate(model, cfg.eval_suite(), gallery_size=cfg.retrieval_gallery)
    (out / "eval-report.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_exp(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    runner = {
        "poison-sweep": run_poison_sweep,
        "filter-vs-downstream": run_filter_vs_downstream,
        "interventions": run_interventions,
        "robustness": run_robustness,
    }[args.experiment]
    runner(cfg, out)
    print(f"experiment {args.experiment} complete -> {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    rows = run_bench(cfg, out)
    for row in rows:
        print(f"pool={row['pool_size']:>9} workers={row['workers']} "
              f"repeat={row['repeat']} {row['records_per_sec']:,.0f} records/sec")
    return 0


def cmd_run_all(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    final = run_end_to_end(cfg, out)
    print(f"lifecycle complete -> {out / 'report.json'} "
          f"(induced id accuracy {final['induced_eval']['id_accuracy']:.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfn", description="data filtering network lifecycle at desk scale"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic pool")
    _add_common(p)
    p.add_argument("--role", default="raw",
                   help="pool recipe: hq | noisy | raw | eval | target")
    p.add_argument("--n", type=int, help="record count (defaults per role)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-dfn", help="train a filtering network")
    _add_common(p)
    p.add_argument("--pool", type=Path, required=True, help="pool manifest or directory")
    p.set_defaults(func=cmd_train_dfn)

    p = sub.add_parser("calibrate", help="calibrate a keep-fraction threshold")
    _add_common(p, filtering=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pool", type=Path, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("filter", help="apply a filtering network to a pool")
    _add_common(p, filtering=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pool", type=Path, required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("induce", help="train the induced model on a filtered pool")
    _add_common(p)
    p.add_argument("--pool", type=Path, required=True)
    p.set_defaults(func=cmd_induce)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the synthetic suite")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exp", help="run a canned experiment")
    p.add_argument("experiment", choices=[
        "poison-sweep", "filter-vs-downstream", "interventions", "robustness",
    ])
    _add_common(p, filtering=True)
    p.set_defaults(func=cmd_exp)

    p = sub.add_parser("bench", help="benchmarks")
    p.add_argument("benchmark", choices=["scaling"])
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("run-all", help="full lifecycle: gen, train, filter, induce, eval")
    _add_common(p, filtering=True)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
