"""Semantic branch: stage prompts, tokenizer, frozen text transformer and order adapters."""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .attention import Adapter, LayerNorm, TransformerBlock, attend_along
from .errors import ConfigError, ContractError, DataError

PROMPT_TEMPLATE = "A video of action about {label}: {stage}"
O_MSA_POSITIONS = ("before", "after")

PAD, UNK, SOT, EOT = "<pad>", "<unk>", "<sot>", "<eot>"
SPECIALS = (PAD, UNK, SOT, EOT)
_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 0  # 0: take the size of the vocabulary the model is built with
    context_length: int = 32
    width: int = 32
    depth: int = 4
    heads: int = 4
    adapted_layers: int = 2
    joint_dim: int = 16
    adapter_ratio: int = 4
    mlp_ratio: int = 4
    o_msa_position: str = "after"

    def __post_init__(self):
        if not 0 <= self.adapted_layers <= self.depth:
            raise ConfigError(f"text adapted_layers={self.adapted_layers} outside [0, {self.depth}]")
        if self.width % self.heads:
            raise ConfigError(f"text width {self.width} not divisible by {self.heads} heads")
        if self.context_length < 2:
            raise ConfigError("context_length must leave room for start and end markers")
        if self.o_msa_position not in O_MSA_POSITIONS:
            raise ConfigError(f"o_msa_position must be one of {O_MSA_POSITIONS}")

    @classmethod
    def paper_scale(cls, adapted_layers: int = 2) -> TextConfig:
        return cls(vocab_size=49408, context_length=77, width=512, depth=12, heads=8,
                   adapted_layers=adapted_layers, joint_dim=512)


def build_prompts(label: str, stages: Sequence[str]) -> tuple[str, str, str]:
    if len(stages) != 3:
        raise ContractError(f"expected 3 stage descriptions, got {len(stages)}")
    return tuple(PROMPT_TEMPLATE.format(label=label, stage=stage) for stage in stages)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        words = sorted(set(tokens) - set(SPECIALS))
        self.itos = list(SPECIALS) + words
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def eot_id(self):
        return self.stoi[EOT]

    @classmethod
    def from_corpus(cls, corpus: Mapping[str, Sequence[str]]) -> Vocabulary:
        words = set(split_words(PROMPT_TEMPLATE))
        for label, stages in corpus.items():
            for prompt in build_prompts(label, stages):
                words.update(split_words(prompt))
        return cls(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.itos)), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        pairs = [line.rsplit("\t", 1) for line in lines if line]
        itos = [tok for tok, _ in sorted(pairs, key=lambda p: int(p[1]))]
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise DataError(f"vocabulary {path} does not start with the reserved tokens")
        vocab = cls(itos)
        if vocab.itos != itos:
            raise DataError(f"vocabulary {path} is not in canonical order")
        return vocab


def tokenize(prompt: str, vocab: Vocabulary, context_length: int) -> list[int]:
    """Start marker, words, end marker, right padding. Truncation keeps the end marker."""
    unk = vocab.stoi[UNK]
    ids = [vocab.stoi.get(w, unk) for w in split_words(prompt)][: context_length - 2]
    row = [vocab.stoi[SOT], *ids, vocab.eot_id]
    return row + [vocab.pad_id] * (context_length - len(row))


def tokenize_corpus(
    class_names: Sequence[str], corpus: Mapping[str, Sequence[str]], vocab: Vocabulary, context_length: int
) -> torch.Tensor:
    """[C, 3, l] token ids for the stage prompts of each class."""
    rows = [[tokenize(p, vocab, context_length) for p in build_prompts(name, corpus[name])] for name in class_names]
    return torch.tensor(rows, dtype=torch.long)


class OrderAdapter(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.adapter = Adapter(dim, ratio, internal_residual=False)
        self.stage_pos = nn.Parameter(torch.zeros(3, dim))


def order_adapter_block(
    block: TransformerBlock,
    order: OrderAdapter,
    x: torch.Tensor,
    position: str = "after",
) -> torch.Tensor:
    """Text block with O-MSA over the stage axis. ``x`` is [..., 3, l, D] (stage, token)."""
    if x.ndim < 3 or x.shape[-3] != 3:
        raise ContractError(f"stage axis must have size 3, got shape {tuple(x.shape)}")

    def token_msa(x):
        return x + block.attn(block.ln_1(x), causal=True)

    def order_msa(x):
        h = block.ln_1(x) + order.stage_pos[:, None, :]
        return x + order.adapter(attend_along(block.attn, h, axis=-3))

    steps = (token_msa, order_msa) if position == "after" else (order_msa, token_msa)
    for step in steps:
        x = step(x)
    return x + block.mlp(block.ln_2(x))


class TextEncoder(nn.Module):
    def __init__(self, config: TextConfig, vocab_size: int):
        super().__init__()
        self.config = config
        D = config.width
        self.token_embedding = nn.Embedding(vocab_size, D)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        self.positional_embedding = nn.Parameter(0.1 * torch.randn(config.context_length, D))
        self.blocks = nn.ModuleList(TransformerBlock(D, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.ln_final = LayerNorm(D)
        self.text_projection = nn.Parameter(D**-0.5 * torch.randn(D, config.joint_dim))
        self.order_adapters = nn.ModuleDict()

    def add_adapters(self) -> None:
        cfg = self.config
        for i in range(cfg.depth - cfg.adapted_layers, cfg.depth):
            self.order_adapters[str(i)] = OrderAdapter(cfg.width, cfg.adapter_ratio)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids) + self.positional_embedding.to(self.token_embedding.weight.dtype)

    def _project(self, x: torch.Tensor, ids: torch.Tensor, eot_id: int) -> torch.Tensor:
        eot_pos = (ids == eot_id).int().argmax(dim=-1)
        picked = torch.take_along_dim(x, eot_pos[..., None, None], dim=-2).squeeze(-2)
        return F.normalize(self.ln_final(picked) @ self.text_projection, dim=-1)

    def frozen_prompt_features(self, ids: torch.Tensor, eot_id: int) -> torch.Tensor:
        """Each prompt row encoded alone by the frozen transformer: [..., l] -> [..., D_joint]."""
        x = self._embed(ids)
        for block in self.blocks:
            x = block(x, causal=True)
        return self._project(x, ids, eot_id)

    def encode_class_semantics(self, ids: torch.Tensor, eot_id: int) -> torch.Tensor:
        """Stage prompts [..., 3, l] -> unit-norm stage features [..., 3, D_joint]."""
        if ids.shape[-2] != 3:
            raise ContractError(f"expected 3 stage prompts per class, got {ids.shape[-2]}")
        if not ((ids == eot_id).sum(-1) == 1).all():
            raise ContractError("every prompt row must contain exactly one end-of-text token")
        cfg = self.config
        x = self._embed(ids)
        first = cfg.depth - cfg.adapted_layers
        for i, block in enumerate(self.blocks):
            if i < first:
                x = block(x, causal=True)
            else:
                x = order_adapter_block(block, self.order_adapters[str(i)], x, cfg.o_msa_position)
        return self._project(x, ids, eot_id)
