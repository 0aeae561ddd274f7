"""Adjacent-frame cross-attention, three-stage segmentation and stage-wise matching."""

from __future__ import annotations

import logging

import torch
from torch import nn

from .attention import MultiHeadAttention
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

ALIGN_MODES = ("per_video", "across_queries")


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity over the last axis; 0 where either vector has zero norm."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    denom = na * nb
    zero = denom == 0
    if zero.any():
        log.warning("cosine of a zero-norm vector; scoring the term as 0")
    safe = torch.where(zero, torch.ones_like(denom), denom)
    return torch.where(zero, torch.zeros_like(denom), (a * b).sum(-1) / safe)


class AdjacentFrameAligner(nn.Module):
    """Cross-attention where frame i-1 queries frame i, plus a residual to frame i-1.

    ``per_video`` keeps each query video separate, so each step attends to the
    single next-frame vector of the same video. ``across_queries`` lets frame
    i-1 of every query video attend over frame i of all query videos.
    """

    def __init__(self, dim: int, heads: int = 1, layers: int = 1, mode: str = "per_video"):
        super().__init__()
        if layers < 1:
            raise ConfigError("alignment needs at least one cross-attention layer")
        if mode not in ALIGN_MODES:
            raise ConfigError(f"alignment mode must be one of {ALIGN_MODES}")
        self.mode = mode
        self.layers = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(layers))
        for layer in self.layers:
            nn.init.zeros_(layer.out_proj.weight)
            nn.init.zeros_(layer.out_proj.bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return adjacent_frame_align(frames, self)


def adjacent_frame_align(frames: torch.Tensor, aligner: AdjacentFrameAligner) -> torch.Tensor:
    """[Q, T, D] query frame features -> [Q, T-1, D] aligned features."""
    if frames.ndim != 3 or frames.shape[1] < 2:
        raise ContractError(f"alignment needs [Q, T>=2, D] input, got {tuple(frames.shape)}")
    prev, nxt = frames[:, :-1], frames[:, 1:]
    if aligner.mode == "per_video":
        h, ctx = prev[..., None, :], nxt[..., None, :]  # [Q, T-1, 1, D]
    else:
        h, ctx = prev.transpose(0, 1), nxt.transpose(0, 1)  # [T-1, Q, D]
    for layer in aligner.layers:
        h = layer(h, context=ctx) + h
    return h[..., 0, :] if aligner.mode == "per_video" else h.transpose(0, 1)


def stage_bounds(aligned_len: int) -> list[tuple[int, int]]:
    """0-based inclusive frame ranges of the three overlapping stages."""
    if aligned_len < 3:
        raise ContractError(f"need at least 3 aligned frames for three stages, got {aligned_len}")
    w = (aligned_len - 1) // 3
    return [(s * w, (s + 1) * w) for s in range(3)]


def segment_stages(aligned: torch.Tensor) -> torch.Tensor:
    """[..., A, D] -> [..., 3, D] stage means; for A=7 the stages are frames 1-3, 3-5, 5-7."""
    segs = [aligned[..., lo : hi + 1, :].mean(dim=-2) for lo, hi in stage_bounds(aligned.shape[-2])]
    return torch.stack(segs, dim=-2)


def stage_match(segments: torch.Tensor, semantics: torch.Tensor) -> torch.Tensor:
    """Mean over the three stages of cosine(segment_s, semantic_s)."""
    if segments.shape[-2] != 3 or semantics.shape[-2] != 3:
        raise ContractError("stage_match expects three stages on both sides")
    return cosine(segments, semantics).mean(dim=-1)
