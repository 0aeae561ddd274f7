"""Deterministic warm-start of the frozen backbones.

Randomly initialised transformers collapse: every frame's [class] token and
every prompt's end-of-text token come out nearly identical. A short supervised
pass gives the frozen encoders generic, input-dependent features before the
adapters are attached. Neither task uses the benchmark's motion classes:

* vision: single static frames of base objects (random shape, colour and
  position); the [class] token predicts shape, colour bin and coarse grid cell.
* text: random word sequences over the vocabulary; the end-of-text token
  predicts which words occur (bag of words).
"""

from __future__ import annotations

import contextlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .episodic_data import _shape_mask
from .visual import VisionEncoder

SHAPES = ("square", "disk", "cross", "ring")
COLOR_BINS = 8
GRID = 4


@contextlib.contextmanager
def seeded_init(seed: int):
    """Fork the torch RNG, seed it and draw initial weights in float32.

    Weight draws depend on the default dtype, so pinning it makes every
    seeded module identical whatever the caller set globally.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        previous = torch.get_default_dtype()
        torch.set_default_dtype(torch.float32)
        try:
            yield
        finally:
            torch.set_default_dtype(previous)


def base_frames(rng: np.random.Generator, count: int, size: int = 32, patch: int = 8):
    """Static frames of one random object each, labelled by shape, colour bin and grid cell."""
    frames = np.empty((count, size, size, 3))
    shapes = rng.integers(len(SHAPES), size=count)
    cells = np.empty(count, dtype=np.int64)
    hues = rng.integers(COLOR_BINS, size=count)
    for i in range(count):
        frames[i] = rng.uniform(0.0, 0.3, size=3)
        frames[i] += rng.normal(0.0, 0.05, size=(size, size, 3))
        # colour bin -> a corner of the RGB cube, jittered
        color = np.array([(hues[i] >> b) & 1 for b in range(3)], dtype=float) * 0.7 + 0.2
        color = np.clip(color + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)
        top, left = rng.integers(0, size - patch + 1, size=2)
        cy, cx = (top + patch / 2) * GRID // size, (left + patch / 2) * GRID // size
        cells[i] = int(cy) * GRID + int(cx)
        region = frames[i, top : top + patch, left : left + patch]
        region[_shape_mask(SHAPES[shapes[i]], patch)] = color
    return np.clip(frames, 0.0, 1.0), shapes, hues, cells


def pretrain_vision(encoder: VisionEncoder, steps: int, seed: int, lr: float = 1e-3, batch: int = 32) -> None:
    if steps <= 0:
        return
    cfg = encoder.config
    rng = np.random.default_rng([seed, 1])
    dtype = encoder.proj.dtype
    with seeded_init(seed):
        head = nn.Linear(cfg.width, len(SHAPES) + COLOR_BINS + GRID * GRID).to(dtype)
    params = [p for n, p in encoder.named_parameters() if not n.startswith("adapters.")]
    opt = torch.optim.Adam(params + list(head.parameters()), lr=lr)
    for _ in range(steps):
        frames, shapes, hues, cells = base_frames(rng, batch, cfg.image_size, cfg.image_size // 4)
        z = encoder.patch_embed(torch.as_tensor(frames, dtype=dtype))
        for block in encoder.blocks:
            z = block(z)
        logits = head(encoder.ln_post(z[:, 0]))
        a, b = len(SHAPES), len(SHAPES) + COLOR_BINS
        loss = (
            F.cross_entropy(logits[:, :a], torch.as_tensor(shapes))
            + F.cross_entropy(logits[:, a:b], torch.as_tensor(hues))
            + F.cross_entropy(logits[:, b:], torch.as_tensor(cells))
        )
        opt.zero_grad()
        loss.backward()
        opt.step()


def pretrain_text(encoder, vocab_size: int, n_special: int, eot_id: int, sot_id: int, steps: int, seed: int,
                  lr: float = 1e-3, batch: int = 32) -> None:
    if steps <= 0:
        return
    cfg = encoder.config
    rng = np.random.default_rng([seed, 2])
    dtype = encoder.text_projection.dtype
    with seeded_init(seed):
        head = nn.Linear(cfg.width, vocab_size).to(dtype)
    params = [p for n, p in encoder.named_parameters() if not n.startswith("order_adapters.")]
    opt = torch.optim.Adam(params + list(head.parameters()), lr=lr)
    l = cfg.context_length
    for _ in range(steps):
        ids = np.zeros((batch, l), dtype=np.int64)
        target = np.zeros((batch, vocab_size))
        for i in range(batch):
            n = rng.integers(1, l - 1)
            words = rng.integers(n_special, vocab_size, size=n)
            ids[i, 0] = sot_id
            ids[i, 1 : n + 1] = words
            ids[i, n + 1] = eot_id
            target[i, words] = 1.0
        ids_t = torch.as_tensor(ids)
        x = encoder._embed(ids_t)
        for block in encoder.blocks:
            x = block(x, causal=True)
        eot_pos = torch.as_tensor([int(np.flatnonzero(row == eot_id)[0]) for row in ids])
        feats = encoder.ln_final(x[torch.arange(batch), eot_pos])
        loss = F.binary_cross_entropy_with_logits(head(feats), torch.as_tensor(target, dtype=dtype))
        opt.zero_grad()
        loss.backward()
        opt.step()
