"""Command-line entry point: train, eval, count-params, sweep-nway, ablate.

Configuration is layered: dataclass defaults, then a ``--config`` file of
``dotted.key = value`` lines, then explicit flags. Exit codes: 0 success,
2 configuration error, 3 data/corpus/checkpoint error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .episodic_data import bundled_corpus, load_corpus
from .errors import ConfigError, TaskAdapterError
from .model import ModelConfig
from .semantic import TextConfig, Vocabulary
from .trainer import (
    TrainConfig,
    ablate_task_msa,
    build_model,
    count_parameters,
    emit_report,
    evaluate,
    load_checkpoint,
    make_datasets,
    model_from_checkpoint,
    save_checkpoint,
    sweep_nway,
    train,
)
from .visual import VisualConfig

log = logging.getLogger("taskadapter")

# flag dest -> dotted config keys it sets
FLAG_KEYS = {
    "ways": ("episode.ways",),
    "shots": ("episode.shots",),
    "queries": ("episode.queries_per_class",),
    "frames": ("episode.frames", "model.visual.frames"),
    "visual_adapter_layers": ("model.visual.adapted_layers",),
    "text_adapter_layers": ("model.text.adapted_layers",),
    "metric": ("model.metric",),
    "fusion": ("model.fusion",),
}


def parse_config_file(path: str | Path) -> dict[str, object]:
    """``key = value`` per line; ``#`` starts a comment; values are Python literals or bare strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    changes: dict[str, object] = {}
    if args.config:
        changes.update(parse_config_file(args.config))
    for dest, keys in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            for key in keys:
                changes[key] = value
    if args.seed is not None:
        changes["eval_seed" if args.command in ("eval", "sweep-nway") else "seed"] = args.seed
    if args.episodes is not None:
        changes["train_episodes" if args.command in ("train", "ablate") else "eval_episodes"] = args.episodes
    try:
        return (base or TrainConfig()).replace(**changes)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _corpus(args):
    return load_corpus(args.corpus) if args.corpus else bundled_corpus()


def _model_for_eval(args, corpus):
    """Checkpointed model if given, otherwise the zero-initialised (untrained) model."""
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        config = resolve_config(args, TrainConfig.from_dict(ckpt["config"]))
        return config, model_from_checkpoint(ckpt, config)
    config = resolve_config(args)
    return config, build_model(config, corpus)


def cmd_train(args) -> int:
    config = resolve_config(args)
    corpus = _corpus(args)
    train_ds, eval_ds = make_datasets(config)
    every = max(1, config.train_episodes // 20)

    def progress(step, loss):
        if step % every == 0 or step == config.train_episodes - 1:
            log.info("episode %d/%d  loss %.4f", step + 1, config.train_episodes, loss)

    result = train(config, corpus, train_ds, progress=progress)
    ckpt_path = Path(args.checkpoint or "checkpoints/model.pt")
    save_checkpoint(result.checkpoint, ckpt_path)
    report = evaluate(config, result.model, corpus, eval_ds, workers=args.workers)
    path = emit_report(report, result.loss_curve, args.report or "reports/train.json", plot=not args.no_plot)
    print(json.dumps({"checkpoint": str(ckpt_path), "report": str(path),
                      "mean_accuracy": report.mean_accuracy, "ci95": report.ci95}))
    return 0


def cmd_eval(args) -> int:
    corpus = _corpus(args)
    config, model = _model_for_eval(args, corpus)
    report = evaluate(config, model, corpus, make_datasets(config)[1], workers=args.workers)
    path = emit_report(report, [], args.report or "reports/eval.json", plot=not args.no_plot)
    print(json.dumps({"report": str(path), "mean_accuracy": report.mean_accuracy, "ci95": report.ci95}))
    return 0


def cmd_count_params(args) -> int:
    if args.paper_scale:
        visual = VisualConfig.paper_scale(args.visual_adapter_layers if args.visual_adapter_layers is not None else 6)
        text = TextConfig.paper_scale(args.text_adapter_layers if args.text_adapter_layers is not None else 2)
        model_cfg = ModelConfig(visual=visual, text=text, pretrain_steps=0)
    else:
        model_cfg = resolve_config(args).model
        if not model_cfg.text.vocab_size:
            vocab = Vocabulary.from_corpus(_corpus(args))
            model_cfg = dataclasses.replace(model_cfg, text=dataclasses.replace(model_cfg.text, vocab_size=len(vocab)))
    print(json.dumps(count_parameters(model_cfg), indent=2))
    return 0


def cmd_sweep(args) -> int:
    corpus = _corpus(args)
    config, model = _model_for_eval(args, corpus)
    rows = sweep_nway(config, model, range(5, 11), corpus, make_datasets(config)[1])
    out = Path(args.report or "reports/sweep_nway.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config_digest": config.digest(), "rows": rows}, indent=2) + "\n", encoding="utf-8")
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    results = ablate_task_msa(config, _corpus(args))
    out = Path(args.report or "reports/ablate.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config_digest": config.digest(), "results": results}, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(results))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "count-params": cmd_count_params,
            "sweep-nway": cmd_sweep, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text 'dotted.key = value' config file")
    common.add_argument("--ways", type=int)
    common.add_argument("--shots", type=int)
    common.add_argument("--queries", type=int, help="queries per class")
    common.add_argument("--frames", type=int)
    common.add_argument("--visual-adapter-layers", type=int)
    common.add_argument("--text-adapter-layers", type=int)
    common.add_argument("--metric", choices=("proto", "bimhm"))
    common.add_argument("--fusion", choices=("prob", "raw"))
    common.add_argument("--corpus", help="sub-action corpus JSON (default: bundled)")
    common.add_argument("--checkpoint", help="checkpoint to write (train) or read (eval, sweep-nway)")
    common.add_argument("--episodes", type=int, help="training episodes (train, ablate) or evaluation episodes")
    common.add_argument("--seed", type=int, help="training seed (train, ablate) or evaluation seed")
    common.add_argument("--report", help="output report path")
    common.add_argument("--workers", type=int, default=1, help="evaluation worker threads")
    common.add_argument("--no-plot", action="store_true", help="skip the PNG next to the report")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="taskadapter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train adapters, save a checkpoint, evaluate")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint (or the untrained model)")
    p = sub.add_parser("count-params", parents=[common], help="analytic parameter counts")
    p.add_argument("--paper-scale", action="store_true", help="count the ViT-B/16 + 12-layer text geometry")
    sub.add_parser("sweep-nway", parents=[common], help="accuracy for N = 5..10 ways")
    sub.add_parser("ablate", parents=[common], help="task adapters on vs off, reversal-pair episodes")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TaskAdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
