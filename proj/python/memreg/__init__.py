"""Two-stage scene adaptation for semantic segmentation.

Thin Python surface over the C++ core: deterministic shapes-world data
synthesis, the training losses, and inference with the two-head
segmentation net. Training itself runs through the C++ CLI; this module
is for inspection, notebooks, and cross-checking.
"""

from ._memreg import (
    Model,
    disagreement,
    fuse_labels,
    generate_sample,
    memory_reg,
    miou,
    poly_lr,
    seg_ce,
)

__all__ = [
    "Model",
    "disagreement",
    "fuse_labels",
    "generate_sample",
    "memory_reg",
    "miou",
    "poly_lr",
    "seg_ce",
]
