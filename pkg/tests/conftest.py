import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from taskadapter.episodic_data import EpisodeConfig, bundled_corpus, default_class_specs, generate_synthetic_dataset
from taskadapter.model import ModelConfig
from taskadapter.semantic import TextConfig
from taskadapter.trainer import TrainConfig
from taskadapter.visual import VisualConfig


def tiny_model_config(**kw) -> ModelConfig:
    visual = VisualConfig(image_size=16, patch_size=8, width=8, depth=2, heads=2, frames=8, adapted_layers=2, joint_dim=8)
    text = TextConfig(context_length=24, width=8, depth=2, heads=2, adapted_layers=1, joint_dim=8)
    base = dict(visual=visual, text=text, pretrain_steps=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(
        episode=EpisodeConfig(ways=3, shots=1, queries_per_class=1, frames=8),
        model=tiny_model_config(),
        lr=0.01,
        train_episodes=5,
        eval_episodes=4,
        videos_per_class=4,
    )
    base.update(kw)
    return TrainConfig(**base)


def randomize_trainables(model, std=0.3, seed=0):
    """Move every trainable tensor off its zero initialisation."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            if p.requires_grad:
                p.add_(std * torch.randn(p.shape, generator=g, dtype=p.dtype))


@pytest.fixture(scope="session")
def corpus():
    return bundled_corpus()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(default_class_specs(), 4, rng_seed=5, frame_count=8, size=16)


# acceptance criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title} -- {detail}")
