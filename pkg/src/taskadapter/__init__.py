"""Parameter-efficient few-shot action recognition on frozen vision-language encoders.

Task adapters (temporal, spatial and cross-video attention reusing the frozen
attention weights) on the visual side, order adapters over a three-stage
sub-action description on the text side, an adjacent-frame alignment layer,
and product fusion of visual and stage-wise cross-modal scores.
"""

__version__ = "0.1.0"
