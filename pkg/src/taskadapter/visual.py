"""Visual branch: patch embedding, frozen ViT blocks and task-specific adapter blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import Adapter, LayerNorm, TransformerBlock, attend_along
from .errors import ConfigError, ContractError

TASK_MSA_POSITIONS = ("before", "between", "after")
QUERY_MODES = ("joint", "independent")


@dataclass(frozen=True)
class VisualConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 32
    depth: int = 4
    heads: int = 4
    frames: int = 8
    adapted_layers: int = 2
    joint_dim: int = 16
    adapter_ratio: int = 4
    mlp_ratio: int = 4
    task_msa_position: str = "after"
    query_mode: str = "joint"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if not 0 <= self.adapted_layers <= self.depth:
            raise ConfigError(f"adapted_layers={self.adapted_layers} outside [0, {self.depth}]")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.task_msa_position not in TASK_MSA_POSITIONS:
            raise ConfigError(f"task_msa_position must be one of {TASK_MSA_POSITIONS}")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def paper_scale(cls, adapted_layers: int = 6) -> VisualConfig:
        return cls(image_size=224, patch_size=16, width=768, depth=12, heads=12,
                   adapted_layers=adapted_layers, joint_dim=512)


@dataclass(frozen=True)
class TaskTokenBatch:
    tokens: torch.Tensor  # [count, T, N+1, D]
    roles: tuple[str, ...]

    def __post_init__(self):
        if len(self.roles) != self.tokens.shape[0]:
            raise ContractError("one role per video is required")
        if len(set(self.roles)) > 1:
            raise ContractError("support and query videos cannot share a task-attention call")

    @property
    def role(self) -> str:
        return self.roles[0]


@dataclass
class FrameFeatureSet:
    features: torch.Tensor  # [count, T, D], post-LN [class] tokens
    joint: torch.Tensor  # [count, T, D_joint]


class TaskAdapters(nn.Module):
    """The four adapters of one adapted block."""

    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.temporal = Adapter(dim, ratio, internal_residual=False)
        self.spatial = Adapter(dim, ratio, internal_residual=True)
        self.task = Adapter(dim, ratio, internal_residual=False)
        self.mlp = Adapter(dim, ratio, internal_residual=False)


def standard_block(block: TransformerBlock, z: torch.Tensor) -> torch.Tensor:
    """Plain ViT block on [..., T, N+1, D]: attention over tokens, frames act as batch."""
    return block(z)


def task_adapter_block(
    block: TransformerBlock,
    adapters: TaskAdapters,
    batch: TaskTokenBatch,
    position: str = "after",
) -> TaskTokenBatch:
    x = batch.tokens
    if x.ndim != 4 or x.shape[0] < 1:
        raise ContractError(f"task batch must be [count, T, N+1, D], got {tuple(x.shape)}")

    def temporal(x):
        return x + adapters.temporal(attend_along(block.attn, block.ln_1(x), axis=1))

    def spatial(x):
        return x + adapters.spatial(block.attn(block.ln_1(x)))

    def task(x):
        return x + adapters.task(attend_along(block.attn, block.ln_1(x), axis=0))

    order = {
        "after": (temporal, spatial, task),
        "between": (temporal, task, spatial),
        "before": (task, temporal, spatial),
    }[position]
    for step in order:
        x = step(x)
    h = block.ln_2(x)
    x = x + block.mlp(h) + adapters.mlp(h)
    return TaskTokenBatch(x, batch.roles)


class VisionEncoder(nn.Module):
    def __init__(self, config: VisualConfig):
        super().__init__()
        self.config = config
        D, P = config.width, config.patch_size
        scale = D**-0.5
        self.patch_proj = nn.Linear(3 * P * P, D, bias=False)
        self.class_embedding = nn.Parameter(scale * torch.randn(D))
        self.positional_embedding = nn.Parameter(scale * torch.randn(config.num_patches + 1, D))
        self.ln_pre = LayerNorm(D)
        self.blocks = nn.ModuleList(TransformerBlock(D, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.ln_post = LayerNorm(D)
        self.proj = nn.Parameter(scale * torch.randn(D, config.joint_dim))
        self.adapters = nn.ModuleDict()

    def add_adapters(self) -> None:
        """Insert adapters in the last ``adapted_layers`` blocks."""
        cfg = self.config
        for i in range(cfg.depth - cfg.adapted_layers, cfg.depth):
            self.adapters[str(i)] = TaskAdapters(cfg.width, cfg.adapter_ratio)

    @property
    def first_adapted(self) -> int:
        return self.config.depth - self.config.adapted_layers

    def patch_embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """[..., T, H, W, 3] -> [..., T, N+1, D]."""
        P = self.config.patch_size
        *lead, H, W, C = pixels.shape
        if H % P or W % P:
            raise ConfigError(f"frame {H}x{W} not divisible by patch size {P}")
        if H * W // P**2 != self.config.num_patches:
            raise ConfigError(f"frame {H}x{W} does not match configured image size {self.config.image_size}")
        patches = pixels.reshape(*lead, H // P, P, W // P, P, C)
        patches = patches.movedim(-4, -3).reshape(*lead, (H // P) * (W // P), P * P * C)
        tokens = self.patch_proj(patches)
        cls = self.class_embedding.expand(*lead, 1, -1)
        z = torch.cat([cls, tokens], dim=-2) + self.positional_embedding
        return self.ln_pre(z)

    def _head(self, z: torch.Tensor) -> FrameFeatureSet:
        features = self.ln_post(z[..., 0, :])
        return FrameFeatureSet(features, features @ self.proj)

    def frozen_features(self, pixels: torch.Tensor) -> FrameFeatureSet:
        """Per-frame backbone with no adapters, for [..., T, H, W, 3] input."""
        z = self.patch_embed(pixels)
        for block in self.blocks:
            z = standard_block(block, z)
        return self._head(z)

    def encode_batch(self, pixels: torch.Tensor, role: str) -> FrameFeatureSet:
        """Encode one role's videos [count, T, H, W, 3]; task attention stays inside the batch."""
        z = self.patch_embed(pixels)
        for i in range(self.first_adapted):
            z = standard_block(self.blocks[i], z)
        batch = TaskTokenBatch(z, (role,) * z.shape[0])
        for i in range(self.first_adapted, self.config.depth):
            batch = task_adapter_block(self.blocks[i], self.adapters[str(i)], batch, self.config.task_msa_position)
        return self._head(batch.tokens)

    def encode_episode_videos(self, support: torch.Tensor, query: torch.Tensor) -> tuple[FrameFeatureSet, FrameFeatureSet]:
        for name, pixels in (("support", support), ("query", query)):
            if pixels.shape[1] != self.config.frames:
                raise ContractError(f"{name} videos have {pixels.shape[1]} frames, expected {self.config.frames}")
        feats_s = self.encode_batch(support, "support")
        if self.config.query_mode == "joint":
            feats_q = self.encode_batch(query, "query")
        else:
            parts = [self.encode_batch(query[i : i + 1], "query") for i in range(query.shape[0])]
            feats_q = FrameFeatureSet(torch.cat([p.features for p in parts]), torch.cat([p.joint for p in parts]))
        return feats_s, feats_q


def to_tensor(pixels: np.ndarray | torch.Tensor, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.asarray(pixels), dtype=dtype)
