"""Coordinate attention and the residual coordinate-attention (RICA) block.

The attention module factorizes spatial attention into two 1D encodings:
the feature map is average-pooled along each spatial axis, the pooled
maps are fused through a shared bottleneck conv, split back, and turned
into per-axis sigmoid gates that multiply the input. The RICA block adds
a two-conv main path to a skip path made of coordinate attention followed
by a 1x1 projection shortcut that matches channel counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .params import ParameterStore, kaiming_conv
from .tensor import (
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    directional_avgpool,
    relu,
    sigmoid,
)

_ACTIVATIONS = ("relu", "hardswish")


@dataclass
class CAConfig:
    """Bottleneck sizing and nonlinearity of the attention module."""

    reduction_ratio: int = 32
    min_mid_channels: int = 8
    activation: str = "relu"

    def validate(self) -> None:
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.min_mid_channels < 1:
            raise ConfigError(f"min_mid_channels must be >= 1, got {self.min_mid_channels}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}"
            )

    def mid_channels(self, channels: int) -> int:
        return max(channels // self.reduction_ratio, self.min_mid_channels, 1)


@dataclass
class AttentionMaps:
    """Height gate (N,C,H,1) and width gate (N,C,1,W), both in (0,1)."""

    a_h: Tensor
    a_w: Tensor


def _hardswish(x: Tensor) -> Tensor:
    return x * (x + 3.0).clip(0.0, 6.0) * (1.0 / 6.0)


def _nonlinear(x: Tensor, cfg: CAConfig) -> Tensor:
    if cfg.activation == "hardswish":
        return _hardswish(x)
    return relu(x)


def init_ca(store: ParameterStore, prefix: str, channels: int, cfg: CAConfig,
            rng: np.random.Generator) -> None:
    """Add the attention module's parameters under `prefix`."""
    mid = cfg.mid_channels(channels)
    store.add_param(f"{prefix}.conv1.weight", kaiming_conv(rng, mid, channels, 1, 1))
    store.add_param(f"{prefix}.bn.gamma", np.ones(mid, np.float32))
    store.add_param(f"{prefix}.bn.beta", np.zeros(mid, np.float32))
    store.add_moments(f"{prefix}.bn", mid)
    store.add_param(f"{prefix}.convh.weight", kaiming_conv(rng, channels, mid, 1, 1))
    store.add_param(f"{prefix}.convw.weight", kaiming_conv(rng, channels, mid, 1, 1))


def ca_forward(x: Tensor, store: ParameterStore, prefix: str, cfg: CAConfig,
               training: bool, attention_hook=None, return_maps: bool = False):
    """Gate `x` by its height and width attention maps.

    Pipeline: pool each spatial axis away, concatenate the two pooled
    maps along the collapsed axis, fuse (1x1 conv, BN, nonlinearity),
    split, per-branch 1x1 conv, sigmoid, then multiply both gates onto
    the input. Output shape equals input shape.

    `attention_hook`, when given, receives (a_h, a_w) after the sigmoid
    and returns replacements; it exists so tests can bypass the gates.
    """
    w1 = store.param(f"{prefix}.conv1.weight")
    if x.ndim != 4:
        raise DimensionError(f"attention input must be 4D, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != w1.shape[1]:
        raise DimensionError(
            f"attention module built for {w1.shape[1]} channels, input has {c}"
        )
    pooled_h = directional_avgpool(x, "width")            # N,C,H,1
    pooled_w = directional_avgpool(x, "height")           # N,C,1,W
    y = concat([pooled_h, pooled_w.transpose((0, 1, 3, 2))], axis=2)  # N,C,H+W,1
    y = conv2d(y, w1)
    y = batchnorm2d(y, store.param(f"{prefix}.bn.gamma"),
                    store.param(f"{prefix}.bn.beta"),
                    store.moments(f"{prefix}.bn"), training)
    y = _nonlinear(y, cfg)
    part_h = y.narrow(2, 0, h)                            # N,mid,H,1
    part_w = y.narrow(2, h, w).transpose((0, 1, 3, 2))    # N,mid,1,W
    a_h = sigmoid(conv2d(part_h, store.param(f"{prefix}.convh.weight")))
    a_w = sigmoid(conv2d(part_w, store.param(f"{prefix}.convw.weight")))
    if attention_hook is not None:
        a_h, a_w = attention_hook(a_h, a_w)
    out = x * a_w * a_h
    if return_maps:
        return out, AttentionMaps(a_h=a_h, a_w=a_w)
    return out


def init_rica(store: ParameterStore, prefix: str, cin: int, cout: int,
              cfg: CAConfig, rng: np.random.Generator, ca_enabled: bool = True) -> None:
    """Add a RICA block's parameters under `prefix`.

    With ca_enabled=False only the two-conv main path is created (the
    plain U-Net double-conv block used by the ablated baseline).
    """
    store.add_param(f"{prefix}.f1.conv.weight", kaiming_conv(rng, cout, cin, 3, 3))
    store.add_param(f"{prefix}.f1.bn.gamma", np.ones(cout, np.float32))
    store.add_param(f"{prefix}.f1.bn.beta", np.zeros(cout, np.float32))
    store.add_moments(f"{prefix}.f1.bn", cout)
    store.add_param(f"{prefix}.f2.conv.weight", kaiming_conv(rng, cout, cout, 3, 3))
    store.add_param(f"{prefix}.f2.bn.gamma", np.ones(cout, np.float32))
    store.add_param(f"{prefix}.f2.bn.beta", np.zeros(cout, np.float32))
    store.add_moments(f"{prefix}.f2.bn", cout)
    if ca_enabled:
        init_ca(store, f"{prefix}.ca", cin, cfg, rng)
        store.add_param(f"{prefix}.pjs.conv.weight", kaiming_conv(rng, cout, cin, 1, 1))
        store.add_param(f"{prefix}.pjs.bn.gamma", np.ones(cout, np.float32))
        store.add_param(f"{prefix}.pjs.bn.beta", np.zeros(cout, np.float32))
        store.add_moments(f"{prefix}.pjs.bn", cout)


def rica_forward(x: Tensor, store: ParameterStore, prefix: str, cfg: CAConfig,
                 training: bool, ca_enabled: bool = True) -> Tensor:
    """Main path conv-BN-ReLU x2 plus the attention/projection skip path."""
    main = conv2d(x, store.param(f"{prefix}.f1.conv.weight"), padding=1)
    main = batchnorm2d(main, store.param(f"{prefix}.f1.bn.gamma"),
                       store.param(f"{prefix}.f1.bn.beta"),
                       store.moments(f"{prefix}.f1.bn"), training)
    main = relu(main)
    main = conv2d(main, store.param(f"{prefix}.f2.conv.weight"), padding=1)
    main = batchnorm2d(main, store.param(f"{prefix}.f2.bn.gamma"),
                       store.param(f"{prefix}.f2.bn.beta"),
                       store.moments(f"{prefix}.f2.bn"), training)
    main = relu(main)
    if not ca_enabled:
        return main
    skip = ca_forward(x, store, f"{prefix}.ca", cfg, training)
    skip = conv2d(skip, store.param(f"{prefix}.pjs.conv.weight"))
    skip = batchnorm2d(skip, store.param(f"{prefix}.pjs.bn.gamma"),
                       store.param(f"{prefix}.pjs.bn.beta"),
                       store.moments(f"{prefix}.pjs.bn"), training)
    if skip.shape != main.shape:
        raise ContractError(
            f"skip path shape {skip.shape} diverged from main path {main.shape}"
        )
    return main + skip
