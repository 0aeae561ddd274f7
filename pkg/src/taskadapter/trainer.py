"""Parameter partitioning, episodic training, evaluation, checkpoints and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import pickle
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import adapter_param_count, block_param_count
from .episodic_data import (
    EpisodeConfig,
    SyntheticDataset,
    bundled_corpus,
    default_class_specs,
    generate_synthetic_dataset,
    sample_episode,
)
from .errors import CheckpointError, ConfigError, NumericError
from .matching import accuracy, episode_loss
from .model import DTYPE, ModelConfig, TaskAdapterModel, is_trainable_name
from .semantic import TextConfig, Vocabulary, tokenize_corpus
from .visual import VisualConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REPORT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.001
    momentum: float = 0.9
    train_episodes: int = 2000
    eval_episodes: int = 500
    seed: int = 0
    eval_seed: int = 12345
    data_seed: int = 0
    videos_per_class: int = 24

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.train_episodes < 0 or self.eval_episodes < 1:
            raise ConfigError("episode counts must be non-negative (eval >= 1)")
        if self.videos_per_class < self.episode.shots + self.episode.queries_per_class:
            raise ConfigError("videos_per_class must cover shots + queries_per_class")
        if self.episode.frames != self.model.visual.frames:
            raise ConfigError(f"episode frames {self.episode.frames} != visual frames {self.model.visual.frames}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        d = dict(d)
        model = dict(d.pop("model", {}))
        model_cfg = ModelConfig(
            visual=VisualConfig(**model.pop("visual", {})),
            text=TextConfig(**model.pop("text", {})),
            **model,
        )
        return cls(episode=EpisodeConfig(**d.pop("episode", {})), model=model_cfg, **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> TrainConfig:
        """Dotted-path replace, e.g. ``replace(**{"model.visual.adapted_layers": 0})``."""
        d = self.to_dict()
        for path, value in changes.items():
            *parents, leaf = path.split(".")
            node = d
            for key in parents:
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[leaf] = value
        return TrainConfig.from_dict(d)


# ---------------------------------------------------------------- partition


@dataclass
class ParameterPartition:
    trainable: dict[str, torch.nn.Parameter]
    frozen: dict[str, torch.nn.Parameter]

    @property
    def names(self) -> dict[str, torch.nn.Parameter]:
        return {**self.frozen, **self.trainable}

    def groups(self) -> dict[str, list[str]]:
        """Trainable names grouped by the module they belong to (one adapter, one stage embedding, ...)."""
        out: dict[str, list[str]] = {}
        for name in self.trainable:
            parts = name.split(".")
            if name.startswith("vision.adapters."):
                key = ".".join(parts[:4])
            elif name.startswith("text.order_adapters.") and parts[3] == "adapter":
                key = ".".join(parts[:4])
            elif name.startswith("text.order_adapters."):
                key = name
            else:
                key = "aligner"
            out.setdefault(key, []).append(name)
        return out


def partition_parameters(model: TaskAdapterModel) -> ParameterPartition:
    trainable, frozen = {}, {}
    for name, p in model.named_parameters():
        (trainable if is_trainable_name(name) else frozen)[name] = p
    return ParameterPartition(trainable, frozen)


def count_parameters(model_config: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts per component; nothing is materialized."""
    v, t = model_config.visual, model_config.text
    D, Dt, Dj = v.width, t.width, v.joint_dim
    vocab = t.vocab_size
    if not vocab:
        raise ConfigError("analytic counting needs an explicit text vocab_size")
    visual_backbone = (
        3 * v.patch_size**2 * D
        + D
        + (v.num_patches + 1) * D
        + 2 * D
        + v.depth * block_param_count(D, v.mlp_ratio)
        + 2 * D
        + D * Dj
    )
    text_backbone = vocab * Dt + t.context_length * Dt + t.depth * block_param_count(Dt, t.mlp_ratio) + 2 * Dt + Dt * Dj
    visual_adapters = v.adapted_layers * 4 * adapter_param_count(D, v.adapter_ratio)
    text_adapters = t.adapted_layers * adapter_param_count(Dt, t.adapter_ratio)
    stage_positional = t.adapted_layers * 3 * Dt
    alignment = model_config.align_layers * 4 * (Dj * Dj + Dj)
    counts = {
        "visual_backbone": visual_backbone,
        "text_backbone": text_backbone,
        "visual_adapters": visual_adapters,
        "text_adapters": text_adapters,
        "stage_positional": stage_positional,
        "alignment": alignment,
    }
    counts["full_model"] = visual_backbone + text_backbone
    counts["adapter_total"] = visual_adapters + text_adapters + stage_positional
    counts["trainable_total"] = counts["adapter_total"] + alignment
    counts["frozen_total"] = counts["full_model"]
    return counts


# ---------------------------------------------------------------- data/model setup


def make_datasets(config: TrainConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Training videos and held-out videos of the same classes, rendered at the model's frame size."""
    specs = default_class_specs()
    size = config.model.visual.image_size
    train = generate_synthetic_dataset(specs, config.videos_per_class, config.data_seed, size=size)
    held_out = generate_synthetic_dataset(specs, config.videos_per_class, config.data_seed + 1, size=size)
    return train, held_out


def build_model(config: TrainConfig, corpus: Mapping) -> TaskAdapterModel:
    return TaskAdapterModel(config.model, Vocabulary.from_corpus(corpus), adapter_seed=config.seed)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: TaskAdapterModel
    checkpoint: dict
    loss_curve: list[float]


def _param_norms(model) -> dict[str, float]:
    return {n: p.detach().norm().item() for n, p in model.named_parameters() if p.requires_grad}


def train(
    config: TrainConfig,
    corpus: Mapping | None = None,
    dataset: SyntheticDataset | None = None,
    model: TaskAdapterModel | None = None,
    episode_fn: Callable[[int], int] | None = None,
    progress: Callable[[int, float], None] | None = None,
    class_pool: Sequence[int] | None = None,
) -> TrainResult:
    """SGD over ``config.train_episodes`` sampled episodes, trainable tensors only.

    ``episode_fn`` maps the step to the episode index to sample (identity by
    default); a constant function overfits a single episode.
    """
    corpus = corpus if corpus is not None else bundled_corpus()
    dataset = dataset if dataset is not None else make_datasets(config)[0]
    model = model if model is not None else build_model(config, corpus)
    model.train()
    part = partition_parameters(model)
    optimizer = torch.optim.SGD(list(part.trainable.values()), lr=config.lr, momentum=config.momentum)
    ep_cfg = dataclasses.replace(config.episode, seed=config.seed)
    losses = []
    for step in range(config.train_episodes):
        index = episode_fn(step) if episode_fn else step
        episode = sample_episode(dataset, corpus, ep_cfg, index, class_pool=class_pool)
        inputs = model.inputs(episode, corpus)
        out = model(inputs)
        loss = episode_loss(out.fused, inputs.query_labels)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss at step {step} (episode seed {ep_cfg.seed}, index {index}); "
                f"parameter norms: {_param_norms(model)}"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
        if progress:
            progress(step, losses[-1])
    model.eval()
    return TrainResult(model, make_checkpoint(model, config, config.train_episodes), losses)


def make_checkpoint(model: TaskAdapterModel, config: TrainConfig, episodes_done: int) -> dict:
    part = partition_parameters(model)
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "trainable": {n: p.detach().clone() for n, p in part.trainable.items()},
        "rng_state": {"episode_seed": config.seed, "next_episode_index": episodes_done},
        "episode_counter": episodes_done,
        "vocabulary": list(model.vocab.itos),
    }


def save_checkpoint(checkpoint: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)
    Vocabulary(checkpoint["vocabulary"]).save(vocab_path(path))


def vocab_path(checkpoint_path: str | Path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".vocab.txt")


def load_checkpoint(path: str | Path) -> dict:
    try:
        ckpt = torch.load(path, weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    return ckpt


def model_from_checkpoint(checkpoint: dict, config: TrainConfig | None = None) -> TaskAdapterModel:
    """Regenerate the frozen backbone from its seed and load the trainable tensors."""
    config = config or TrainConfig.from_dict(checkpoint["config"])
    vocab = Vocabulary(checkpoint["vocabulary"])
    model = TaskAdapterModel(config.model, vocab, adapter_seed=config.seed)
    load_trainable(model, checkpoint["trainable"])
    model.eval()
    return model


def load_trainable(model: TaskAdapterModel, tensors: Mapping[str, torch.Tensor]) -> None:
    part = partition_parameters(model)
    for name in tensors:
        if name not in part.trainable:
            what = "frozen" if name in part.frozen else "unknown"
            raise CheckpointError(f"checkpoint tensor {name!r} is {what} in this model")
    with torch.no_grad():
        for name, p in part.trainable.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(f"tensor {name!r} has shape {tuple(t.shape)}, model expects {tuple(p.shape)}")
            p.copy_(t.to(DTYPE))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_episode_accuracy: list[float]
    mean_accuracy: float
    ci95: float
    config_digest: str
    wall_time: float = 0.0

    @property
    def episodes(self) -> int:
        return len(self.per_episode_accuracy)

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], digest: str, wall_time: float = 0.0) -> EvalReport:
        a = np.asarray(accs, dtype=float)
        ci = 1.96 * a.std(ddof=1) / math.sqrt(len(a)) if len(a) > 1 else 0.0
        return cls([float(x) for x in a], float(a.mean()), float(ci), digest, wall_time)

    def numbers(self) -> tuple:
        return (tuple(self.per_episode_accuracy), self.mean_accuracy, self.ci95, self.config_digest)


@torch.no_grad()
def evaluate(
    config: TrainConfig,
    model: TaskAdapterModel,
    corpus: Mapping | None = None,
    dataset: SyntheticDataset | None = None,
    episodes: int | None = None,
    class_pool: Sequence[int] | None = None,
    ways: int | None = None,
    workers: int = 1,
) -> EvalReport:
    """Mean fused-argmax accuracy over held-out episodes keyed by (eval_seed, index)."""
    start = time.perf_counter()
    corpus = corpus if corpus is not None else bundled_corpus()
    dataset = dataset if dataset is not None else make_datasets(config)[1]
    episodes = episodes or config.eval_episodes
    ep_cfg = dataclasses.replace(config.episode, seed=config.eval_seed, ways=ways or config.episode.ways)
    model.eval()
    cache: dict[str, torch.Tensor] = {}

    def run(index: int) -> float:
        episode = sample_episode(dataset, corpus, ep_cfg, index, class_pool=class_pool)
        inputs = model.inputs(episode, corpus)
        missing = [i for i, n in enumerate(inputs.class_names) if n not in cache]
        if missing:
            sem = model.class_semantics(inputs.prompt_ids[missing])
            for i, row in zip(missing, sem):
                cache[inputs.class_names[i]] = row
        semantics = torch.stack([cache[n] for n in inputs.class_names])
        out = model(inputs, semantics=semantics)
        return accuracy(out.fused, inputs.query_labels)

    if workers > 1:
        # warm the semantic cache serially so threads only read it
        names = sorted({dataset.name(c) for c in (class_pool or dataset)})
        sem = model.class_semantics(tokenize_corpus(names, corpus, model.vocab, model.config.text.context_length))
        cache.update(zip(names, sem))
        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(run, range(episodes)))
    else:
        accs = [run(i) for i in range(episodes)]
    return EvalReport.from_accuracies(accs, config.digest(), time.perf_counter() - start)


# ---------------------------------------------------------------- reports


def report_dict(report: EvalReport, loss_curve: Sequence[float] = ()) -> dict:
    return {
        "version": REPORT_VERSION,
        "config_digest": report.config_digest,
        "mean_accuracy": report.mean_accuracy,
        "ci95": report.ci95,
        "episodes": report.episodes,
        "per_episode_accuracy": list(report.per_episode_accuracy),
        "loss_curve": [float(x) for x in loss_curve],
        "wall_time": report.wall_time,
    }


def emit_report(report: EvalReport, loss_curve: Sequence[float], path: str | Path, plot: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_dict(report, loss_curve), indent=2) + "\n", encoding="utf-8")
    if plot:
        plot_curves(report, loss_curve, path.with_suffix(".png"))
    return path


def load_report(path: str | Path) -> tuple[EvalReport, list[float]]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("version") != REPORT_VERSION:
        raise CheckpointError(f"unsupported report version {d.get('version')}")
    report = EvalReport(d["per_episode_accuracy"], d["mean_accuracy"], d["ci95"], d["config_digest"], d.get("wall_time", 0.0))
    return report, d["loss_curve"]


def plot_curves(report: EvalReport, loss_curve: Sequence[float], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    if len(loss_curve):
        losses = np.asarray(loss_curve)
        k = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        axes[0].plot(losses, alpha=0.3)
        axes[0].plot(np.arange(k - 1, len(losses)), smooth)
    axes[0].set(title="training loss", xlabel="episode")
    accs = np.asarray(report.per_episode_accuracy)
    axes[1].plot(np.cumsum(accs) / np.arange(1, len(accs) + 1))
    axes[1].axhline(report.mean_accuracy, ls="--", c="k", lw=0.8)
    axes[1].set(title=f"running accuracy ({report.mean_accuracy:.3f} ± {report.ci95:.3f})", xlabel="episode")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------- harnesses


def sweep_nway(
    config: TrainConfig,
    model: TaskAdapterModel,
    ways: Sequence[int] = range(5, 11),
    corpus: Mapping | None = None,
    dataset: SyntheticDataset | None = None,
    episodes: int | None = None,
) -> list[dict]:
    rows = []
    for n in ways:
        r = evaluate(config, model, corpus, dataset, episodes=episodes, ways=n)
        rows.append({"ways": n, "mean_accuracy": r.mean_accuracy, "ci95": r.ci95, "episodes": r.episodes})
    return rows


def reversal_pool(dataset: SyntheticDataset) -> list[int]:
    return sorted({c for pair in dataset.reversal_pairs() for c in pair})


def ablate_task_msa(
    config: TrainConfig,
    corpus: Mapping | None = None,
    episodes: int | None = None,
    progress: Callable[[str, int, float], None] | None = None,
) -> dict:
    """Train with and without task adapters on the same budget; score on reversal-pair episodes."""
    corpus = corpus if corpus is not None else bundled_corpus()
    train_ds, eval_ds = make_datasets(config)
    pool = reversal_pool(eval_ds)
    ways = min(config.episode.ways, len(pool))
    results = {}
    for label, layers in (("adapted", config.model.visual.adapted_layers), ("no_task_adapters", 0)):
        cfg = config.replace(**{"model.visual.adapted_layers": layers})
        cb = (lambda s, l, label=label: progress(label, s, l)) if progress else None
        res = train(cfg, corpus, train_ds, progress=cb)
        rep = evaluate(cfg, res.model, corpus, eval_ds, episodes=episodes, class_pool=pool, ways=ways)
        results[label] = {"visual_adapted_layers": layers, "mean_accuracy": rep.mean_accuracy, "ci95": rep.ci95}
    return results

