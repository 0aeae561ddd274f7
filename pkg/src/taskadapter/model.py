"""Full dual-branch model and the frozen per-frame baseline used as its reference."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .alignment import ALIGN_MODES, AdjacentFrameAligner, segment_stages
from .episodic_data import Episode
from .errors import ConfigError
from .matching import FUSIONS, METRICS, FusedScores, compute_prototypes, crossmodal_scores, fuse_scores, visual_scores
from .pretrain import pretrain_text, pretrain_vision, seeded_init
from .semantic import SOT, SPECIALS, TextConfig, TextEncoder, Vocabulary, tokenize_corpus
from .visual import FrameFeatureSet, VisionEncoder, VisualConfig

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    visual: VisualConfig = field(default_factory=VisualConfig)
    text: TextConfig = field(default_factory=TextConfig)
    align_layers: int = 1
    align_heads: int = 1
    align_mode: str = "per_video"
    metric: str = "proto"
    fusion: str = "prob"
    tau_v: float = 0.07
    tau_t: float = 0.07
    backbone_seed: int = 0
    pretrain_steps: int = 400

    def __post_init__(self):
        if self.visual.joint_dim != self.text.joint_dim:
            raise ConfigError(f"joint dims differ: visual {self.visual.joint_dim}, text {self.text.joint_dim}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}")
        if self.tau_v <= 0 or self.tau_t <= 0:
            raise ConfigError("fusion temperatures must be positive")
        if self.align_layers < 1:
            raise ConfigError("align_layers must be >= 1")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if self.visual.joint_dim % self.align_heads:
            raise ConfigError("joint_dim must be divisible by align_heads")


@dataclass
class EpisodeInputs:
    support: torch.Tensor  # [C*K, T, H, W, 3]
    support_labels: torch.Tensor
    query: torch.Tensor  # [Q, T, H, W, 3]
    query_labels: torch.Tensor
    prompt_ids: torch.Tensor  # [C, 3, l]
    class_names: list[str]

    @property
    def ways(self) -> int:
        return len(self.class_names)


@dataclass
class EpisodeOutput:
    support: FrameFeatureSet
    query: FrameFeatureSet
    prototypes: torch.Tensor
    semantics: torch.Tensor
    aligned: torch.Tensor
    segments: torch.Tensor
    visual: torch.Tensor
    crossmodal: torch.Tensor
    fused: FusedScores


# warm-started backbone weights, keyed by everything that determines them
_BACKBONE_CACHE: dict[tuple, dict[str, torch.Tensor]] = {}


def _seeded(seed: int, build):
    with seeded_init(seed):
        return build()


class TaskAdapterModel(nn.Module):
    """Frozen dual encoders with task adapters, order adapters and the alignment layer.

    Backbone weights depend only on ``backbone_seed`` so that configurations with
    different adapter layouts share the same frozen network; trainable modules
    are initialised from ``adapter_seed``.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, adapter_seed: int = 0):
        super().__init__()
        self.config = config
        self.vocab = vocab
        vocab_size = config.text.vocab_size or len(vocab)
        if vocab_size < len(vocab):
            raise ConfigError(f"text vocab_size {vocab_size} smaller than vocabulary ({len(vocab)})")
        s = config.backbone_seed
        self.vision = _seeded(s, lambda: VisionEncoder(config.visual)).to(DTYPE)
        self.text = _seeded(s + 1, lambda: TextEncoder(config.text, vocab_size)).to(DTYPE)
        self._warm_start(vocab_size)
        _seeded(adapter_seed + 10_000, self.vision.add_adapters)
        _seeded(adapter_seed + 20_000, self.text.add_adapters)
        self.aligner = _seeded(
            adapter_seed + 30_000,
            lambda: AdjacentFrameAligner(config.visual.joint_dim, config.align_heads, config.align_layers, config.align_mode),
        )
        self.to(DTYPE)
        for name, p in self.named_parameters():
            p.requires_grad_(is_trainable_name(name))

    def _warm_start(self, vocab_size: int) -> None:
        cfg = self.config
        steps, seed = cfg.pretrain_steps, cfg.backbone_seed
        if steps == 0:
            return
        key = ("vision", cfg.visual, seed, steps)
        if key not in _BACKBONE_CACHE:
            pretrain_vision(self.vision, steps, seed)
            _BACKBONE_CACHE[key] = {k: v.detach().clone() for k, v in self.vision.state_dict().items()}
        self.vision.load_state_dict(_BACKBONE_CACHE[key])
        key = ("text", cfg.text, tuple(self.vocab.itos), vocab_size, seed, steps)
        if key not in _BACKBONE_CACHE:
            v = self.vocab
            pretrain_text(self.text, len(v), len(SPECIALS), v.eot_id, v.stoi[SOT], steps, seed + 1)
            _BACKBONE_CACHE[key] = {k: v.detach().clone() for k, v in self.text.state_dict().items()}
        self.text.load_state_dict(_BACKBONE_CACHE[key])

    def inputs(self, episode: Episode, corpus: Mapping[str, Sequence[str]]) -> EpisodeInputs:
        return EpisodeInputs(
            support=torch.as_tensor(episode.support_pixels(), dtype=DTYPE),
            support_labels=torch.as_tensor(episode.support_labels),
            query=torch.as_tensor(episode.query_pixels(), dtype=DTYPE),
            query_labels=torch.as_tensor(episode.query_labels),
            prompt_ids=tokenize_corpus(episode.class_names, corpus, self.vocab, self.config.text.context_length),
            class_names=list(episode.class_names),
        )

    def class_semantics(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        return self.text.encode_class_semantics(prompt_ids, self.vocab.eot_id)

    def forward(self, inputs: EpisodeInputs, semantics: torch.Tensor | None = None) -> EpisodeOutput:
        cfg = self.config
        feats_s, feats_q = self.vision.encode_episode_videos(inputs.support, inputs.query)
        prototypes = compute_prototypes(feats_s.joint, inputs.support_labels, inputs.ways)
        if semantics is None:
            semantics = self.class_semantics(inputs.prompt_ids)
        aligned = self.aligner(feats_q.joint)
        segments = segment_stages(aligned)
        visual = visual_scores(feats_q.joint, prototypes, cfg.metric)
        crossmodal = crossmodal_scores(segments, semantics)
        fused = fuse_scores(visual, crossmodal, cfg.tau_v, cfg.tau_t, cfg.fusion)
        return EpisodeOutput(feats_s, feats_q, prototypes, semantics, aligned, segments, visual, crossmodal, fused)


def is_trainable_name(name: str) -> bool:
    return name.startswith(("vision.adapters.", "text.order_adapters.", "aligner."))


@torch.no_grad()
def frozen_baseline_forward(model: TaskAdapterModel, inputs: EpisodeInputs) -> EpisodeOutput:
    """The same scoring pipeline on the frozen backbone alone.

    Videos are encoded one at a time with plain per-frame blocks, prompts one at
    a time with the plain text transformer, and query frames skip the
    cross-attention layer.
    """
    cfg = model.config

    def encode(videos):
        parts = [model.vision.frozen_features(v) for v in videos]
        return FrameFeatureSet(torch.stack([p.features for p in parts]), torch.stack([p.joint for p in parts]))

    feats_s, feats_q = encode(inputs.support), encode(inputs.query)
    prototypes = compute_prototypes(feats_s.joint, inputs.support_labels, inputs.ways)
    eot = model.vocab.eot_id
    semantics = torch.stack(
        [torch.stack([model.text.frozen_prompt_features(row, eot) for row in cls]) for cls in inputs.prompt_ids]
    )
    aligned = feats_q.joint[:, :-1]
    segments = segment_stages(aligned)
    visual = visual_scores(feats_q.joint, prototypes, cfg.metric)
    crossmodal = crossmodal_scores(segments, semantics)
    fused = fuse_scores(visual, crossmodal, cfg.tau_v, cfg.tau_t, cfg.fusion)
    return EpisodeOutput(feats_s, feats_q, prototypes, semantics, aligned, segments, visual, crossmodal, fused)


def stack_pixels(videos: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.stack(videos), dtype=DTYPE)
