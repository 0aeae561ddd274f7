#!/usr/bin/env python3
"""Train the desk-scale model on the synthetic benchmark and write a report.

Trains, evaluates the zero-init baseline and the trained model on held-out
videos, and runs the 5..10-way sweep.

Usage:
  python3 scripts/run_benchmark.py --out results/benchmark
  python3 scripts/run_benchmark.py --episodes 500 --eval-episodes 200 --seed 1
"""

import argparse
import json
import logging
import time
from pathlib import Path

from taskadapter.episodic_data import bundled_corpus
from taskadapter.trainer import (
    TrainConfig,
    build_model,
    emit_report,
    evaluate,
    make_datasets,
    reversal_pool,
    save_checkpoint,
    sweep_nway,
    train,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--episodes", type=int, default=2000, help="training episodes")
    parser.add_argument("--eval-episodes", type=int, default=500)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="results/benchmark")
    parser.add_argument("--no-sweep", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig(lr=args.lr, train_episodes=args.episodes, eval_episodes=args.eval_episodes, seed=args.seed)
    out = Path(args.out)
    corpus = bundled_corpus()
    train_ds, eval_ds = make_datasets(cfg)
    pool = reversal_pool(eval_ds)
    rev_ways = min(cfg.episode.ways, len(pool))

    t0 = time.perf_counter()
    baseline_model = build_model(cfg, corpus)
    baseline = evaluate(cfg, baseline_model, corpus, eval_ds)
    logging.info("zero-init baseline: %.3f ± %.3f", baseline.mean_accuracy, baseline.ci95)

    result = train(cfg, corpus, train_ds, progress=lambda s, l: s % 200 == 0 and logging.info("episode %d loss %.4f", s, l))
    save_checkpoint(result.checkpoint, out / "model.pt")
    report = evaluate(cfg, result.model, corpus, eval_ds)
    emit_report(report, result.loss_curve, out / "report.json")
    logging.info("trained: %.3f ± %.3f", report.mean_accuracy, report.ci95)

    summary = {
        "config_digest": cfg.digest(),
        "baseline_accuracy": baseline.mean_accuracy,
        "trained_accuracy": report.mean_accuracy,
        "trained_ci95": report.ci95,
        "baseline_reversal_accuracy": evaluate(cfg, baseline_model, corpus, eval_ds, class_pool=pool, ways=rev_ways).mean_accuracy,
        "trained_reversal_accuracy": evaluate(cfg, result.model, corpus, eval_ds, class_pool=pool, ways=rev_ways).mean_accuracy,
    }
    if not args.no_sweep:
        summary["sweep_nway"] = sweep_nway(cfg, result.model, range(5, 11), corpus, eval_ds)
    summary["wall_time_s"] = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
