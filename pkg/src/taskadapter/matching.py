"""Prototype scoring, cross-modal scores, product fusion and the episode loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from .alignment import cosine, stage_match
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

METRICS = ("proto", "bimhm")
FUSIONS = ("prob", "raw")
PROB_FLOOR = 1e-12


def compute_prototypes(support: torch.Tensor, labels: torch.Tensor, ways: int) -> torch.Tensor:
    """Class means of support features: [C*K, T, D] -> [C, T, D]."""
    labels = torch.as_tensor(labels)
    counts = torch.bincount(labels, minlength=ways)
    if len(counts) > ways or (counts == 0).any():
        raise ContractError(f"every one of the {ways} classes needs support videos, got counts {counts.tolist()}")
    if (counts != counts[0]).any():
        raise ContractError(f"classes must have the same number of shots, got {counts.tolist()}")
    return torch.stack([support[labels == c].mean(dim=0) for c in range(ways)])


def proto_metric(query: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Average same-index frame cosine: [Q, T, D] x [C, T, D] -> [Q, C]."""
    return cosine(query[:, None], prototypes[None]).mean(dim=-1)


def bimhm_metric(query: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Bidirectional mean of frame-wise best matches: [Q, T, D] x [C, T, D] -> [Q, C]."""
    sim = cosine(query[:, None, :, None], prototypes[None, :, None, :])  # [Q, C, Tq, Tp]
    q_to_p = sim.max(dim=-1).values.mean(dim=-1)
    p_to_q = sim.max(dim=-2).values.mean(dim=-1)
    return 0.5 * (q_to_p + p_to_q)


def visual_scores(query: torch.Tensor, prototypes: torch.Tensor, metric: str = "proto") -> torch.Tensor:
    if metric == "proto":
        return proto_metric(query, prototypes)
    if metric == "bimhm":
        return bimhm_metric(query, prototypes)
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")


def crossmodal_scores(segments: torch.Tensor, semantics: torch.Tensor) -> torch.Tensor:
    """[Q, 3, D] query stage segments x [C, 3, D] class stages -> [Q, C]."""
    return stage_match(segments[:, None], semantics[None])


@dataclass
class FusedScores:
    log_probs: torch.Tensor  # [Q, C]

    @property
    def probabilities(self) -> torch.Tensor:
        return self.log_probs.exp()

    def predictions(self) -> torch.Tensor:
        return self.log_probs.argmax(dim=-1)


def fuse_scores(
    visual: torch.Tensor,
    crossmodal: torch.Tensor,
    tau_v: float = 0.07,
    tau_t: float = 0.07,
    mode: str = "prob",
) -> FusedScores:
    """Product of the two class distributions, renormalized per query.

    ``raw`` instead multiplies the raw scores and uses the product as logits.
    """
    if tau_v <= 0 or tau_t <= 0:
        raise ConfigError(f"temperatures must be positive, got {tau_v}, {tau_t}")
    if visual.shape != crossmodal.shape:
        raise ContractError(f"score shapes differ: {tuple(visual.shape)} vs {tuple(crossmodal.shape)}")
    if mode == "prob":
        joint = torch.log_softmax(visual / tau_v, dim=-1) + torch.log_softmax(crossmodal / tau_t, dim=-1)
    elif mode == "raw":
        joint = visual * crossmodal / tau_v
    else:
        raise ConfigError(f"unknown fusion {mode!r}; choose from {FUSIONS}")
    return FusedScores(torch.log_softmax(joint, dim=-1))


def episode_loss(fused: FusedScores, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log fused probability of the true class."""
    labels = torch.as_tensor(labels)
    picked = fused.log_probs.gather(1, labels[:, None]).squeeze(1)
    floor = math.log(PROB_FLOOR)
    if (picked < floor).any():
        log.warning("true-class probability below %g; clamping", PROB_FLOOR)
    return -picked.clamp_min(floor).mean()


def accuracy(fused: FusedScores, labels: torch.Tensor) -> float:
    return (fused.predictions() == torch.as_tensor(labels)).double().mean().item()
