"""Bi-atrial wall and cavity segmentation from LGE-MRI slices.

Four 2D encoder-decoder networks trained on three data splits, fused by a
learned per-class logit ensemble, with exact Dice/HD95 evaluation and a
synthetic phantom generator for desk-scale experiments.
"""

__version__ = "0.1.0"
