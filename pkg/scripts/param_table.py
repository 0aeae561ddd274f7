#!/usr/bin/env python3
"""Print analytic trainable-parameter counts for the ViT-B/16 + 12-layer text geometry.

Usage:
  python3 scripts/param_table.py
"""

from taskadapter.model import ModelConfig
from taskadapter.semantic import TextConfig
from taskadapter.trainer import count_parameters
from taskadapter.visual import VisualConfig


def counts(L, M):
    return count_parameters(ModelConfig(visual=VisualConfig.paper_scale(L), text=TextConfig.paper_scale(M), pretrain_steps=0))


def main():
    print(f"{'visual L':>8} {'text M':>6} {'visual':>12} {'text':>10} {'stage pos':>10} {'adapters':>12} {'+alignment':>12}")
    for L, M in [(12, 2), (6, 2), (2, 2), (6, 6), (2, 8), (0, 0)]:
        c = counts(L, M)
        print(f"{L:>8} {M:>6} {c['visual_adapters']:>12,} {c['text_adapters']:>10,} {c['stage_positional']:>10,} "
              f"{c['adapter_total']:>12,} {c['trainable_total']:>12,}")
    c = counts(6, 2)
    print(f"\nfrozen backbone: {c['full_model']:,} (visual {c['visual_backbone']:,}, text {c['text_backbone']:,})")


if __name__ == "__main__":
    main()
