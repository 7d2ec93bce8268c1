"""Sparse-label teacher-student segmentation trainer (SGTS).

A self-contained weakly supervised segmentation pipeline: a minimal float64
autograd engine and encoder-decoder backbone, cosine curricula for loss
weighting and confidence thresholding, an EMA teacher with ground-truth /
pseudo-label fusion, a deterministic synthetic benchmark with dense oracle
masks, and mIoU/mDice evaluation.
"""

__version__ = "0.1.0"
