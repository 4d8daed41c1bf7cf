"""Per-vessel coronary calcium segmentation kit.

Self-contained: a float32 autodiff tensor engine, a coordinate-attention
U-Net with residual attention blocks, the weighted Focal LogDice loss
family, a synthetic CT phantom generator matching clinical class-imbalance
statistics, and a deterministic training/evaluation pipeline.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
