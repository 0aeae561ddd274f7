"""Shared transformer primitives: multi-head attention, layer norm, MLP, bottleneck adapter."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError

LN_EPS = 1e-5


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, LN_EPS)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


class LayerNorm(nn.LayerNorm):
    def __init__(self, dim: int):
        super().__init__(dim, eps=LN_EPS)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads over the second-to-last axis.

    All leading axes are batch axes, so the same weights can attend over frames,
    tokens, videos or prompt stages depending on how the caller lays out the input.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None, causal: bool = False) -> torch.Tensor:
        if not torch.isfinite(x).all() or (context is not None and not torch.isfinite(context).all()):
            raise NumericError("non-finite attention input")
        context = x if context is None else context
        *batch, S, D = x.shape
        Sk = context.shape[-2]
        hd = D // self.heads

        def split(t, n):
            return t.reshape(*batch, n, self.heads, hd).transpose(-3, -2)

        q = split(self.q_proj(x), S)
        k = split(self.k_proj(context), Sk)
        v = split(self.v_proj(context), Sk)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if causal:
            mask = torch.ones(S, Sk, dtype=torch.bool, device=x.device).triu(1)
            logits = logits.masked_fill(mask, float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        out = out.transpose(-3, -2).reshape(*batch, S, D)
        return self.out_proj(out)


def attend_along(attn: MultiHeadAttention, x: torch.Tensor, axis: int, causal: bool = False) -> torch.Tensor:
    """Self-attention of ``x`` over ``axis``; every other axis is treated as batch."""
    moved = x.movedim(axis, -2)
    return attn(moved, causal=causal).movedim(-2, axis)


def multi_head_self_attention(x: torch.Tensor, attn: MultiHeadAttention, axis: int = -2) -> torch.Tensor:
    return attend_along(attn, x, axis)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Adapter(nn.Module):
    """Bottleneck adapter: ``scale * up(gelu(down(x)))``, optionally plus ``x``.

    The up projection starts at zero, so at construction the adapter is either
    the identity (``internal_residual``) or the zero map.
    """

    def __init__(self, dim: int, ratio: int = 4, internal_residual: bool = False, scale: float = 1.0):
        super().__init__()
        hidden = dim // ratio
        if hidden < 1:
            raise ConfigError(f"adapter bottleneck D/r = {dim}/{ratio} is empty")
        self.internal_residual = internal_residual
        self.scale = scale
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        core = self.scale * self.up(gelu(self.down(x)))
        return x + core if self.internal_residual else core


def bottleneck_adapter(x: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    if x.shape[-1] != adapter.down.in_features:
        raise ConfigError(f"adapter expects width {adapter.down.in_features}, got {x.shape[-1]}")
    return adapter(x)


def mlp_block(x: torch.Tensor, mlp: Mlp) -> torch.Tensor:
    return mlp(x)


class TransformerBlock(nn.Module):
    """Pre-norm block holding the frozen weights; ``forward`` is the plain block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln_2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), causal=causal)
        return x + self.mlp(self.ln_2(x))


def adapter_param_count(dim: int, ratio: int = 4) -> int:
    hidden = dim // ratio
    return dim * hidden + hidden + hidden * dim + dim


def block_param_count(dim: int, mlp_ratio: int = 4) -> int:
    attn = 4 * (dim * dim + dim)
    mlp = dim * dim * mlp_ratio + dim * mlp_ratio + dim * mlp_ratio * dim + dim
    return attn + mlp + 4 * dim
