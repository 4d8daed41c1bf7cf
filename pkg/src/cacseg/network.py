"""Network assembly: RICA-block encoder, CA-augmented decoder, 6-class head.

The same builder produces the full attention network and, with
ca_enabled=False, the plain U-Net baseline (RICA skip paths and decoder
attention modules removed, strictly fewer parameters).

Encoder level k outputs base*2^k channels; level `levels` is the
bottleneck. Decoder level k upsamples, applies a standalone attention
module, concatenates the encoder skip, and runs two conv-BN-ReLU layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import CAConfig, ca_forward, init_ca, init_rica, rica_forward
from .errors import ConfigError, DimensionError
from .params import ParameterStore, kaiming_conv, load_checkpoint
from .tensor import (
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    upsample_bilinear2,
)


@dataclass
class ArchConfig:
    levels: int = 4
    base_channels: int = 64
    in_channels: int = 1
    num_classes: int = 6
    ca_enabled: bool = True
    ca: CAConfig = field(default_factory=CAConfig)

    def validate(self) -> None:
        for name in ("levels", "base_channels", "in_channels", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        self.ca.validate()


def _init_convbn(store: ParameterStore, prefix: str, cin: int, cout: int,
                 rng: np.random.Generator) -> None:
    store.add_param(f"{prefix}.conv.weight", kaiming_conv(rng, cout, cin, 3, 3))
    store.add_param(f"{prefix}.bn.gamma", np.ones(cout, np.float32))
    store.add_param(f"{prefix}.bn.beta", np.zeros(cout, np.float32))
    store.add_moments(f"{prefix}.bn", cout)


def _convbnrelu(x: Tensor, store: ParameterStore, prefix: str, training: bool) -> Tensor:
    x = conv2d(x, store.param(f"{prefix}.conv.weight"), padding=1)
    x = batchnorm2d(x, store.param(f"{prefix}.bn.gamma"),
                    store.param(f"{prefix}.bn.beta"),
                    store.moments(f"{prefix}.bn"), training)
    return relu(x)


def build(arch: ArchConfig, rng_seed: int) -> ParameterStore:
    """Create a freshly initialized parameter store for `arch`.

    Conv weights use fan-in scaled normal init, biases start at zero, BN
    affine at one/zero. Deterministic: the same seed gives a bit-identical
    store.
    """
    arch.validate()
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    store = ParameterStore()
    store.arch = arch

    cin = arch.in_channels
    for k in range(arch.levels + 1):
        cout = arch.base_channels * (2 ** k)
        init_rica(store, f"enc{k}.rica", cin, cout, arch.ca, rng, arch.ca_enabled)
        cin = cout

    for k in reversed(range(arch.levels)):
        c_up = arch.base_channels * (2 ** (k + 1))
        c_skip = arch.base_channels * (2 ** k)
        if arch.ca_enabled:
            init_ca(store, f"dec{k}.ca", c_up, arch.ca, rng)
        _init_convbn(store, f"dec{k}.c1", c_up + c_skip, c_skip, rng)
        _init_convbn(store, f"dec{k}.c2", c_skip, c_skip, rng)

    store.add_param("head.conv.weight",
                    kaiming_conv(rng, arch.num_classes, arch.base_channels, 1, 1))
    store.add_param("head.conv.bias", np.zeros(arch.num_classes, np.float32))
    return store


def forward(store: ParameterStore, batch: Tensor, training: bool = False) -> Tensor:
    """Run the network; returns logits spatially aligned with the input."""
    arch: ArchConfig = store.arch
    if arch is None:
        raise ConfigError("parameter store has no attached ArchConfig")
    if batch.ndim != 4:
        raise DimensionError(f"batch must be 4D (N,C,H,W), got shape {batch.shape}")
    n, c, h, w = batch.shape
    if c != arch.in_channels:
        raise DimensionError(f"batch has {c} channels, expected {arch.in_channels}")
    required = 2 ** arch.levels
    if h % required or w % required:
        raise DimensionError(
            f"spatial extents must be multiples of {required}, got {h}x{w}"
        )

    skips = []
    x = batch
    for k in range(arch.levels + 1):
        x = rica_forward(x, store, f"enc{k}.rica", arch.ca, training, arch.ca_enabled)
        if k < arch.levels:
            skips.append(x)
            x = maxpool2(x)

    for k in reversed(range(arch.levels)):
        x = upsample_bilinear2(x)
        if arch.ca_enabled:
            x = ca_forward(x, store, f"dec{k}.ca", arch.ca, training)
        x = concat_channels(x, skips[k])
        x = _convbnrelu(x, store, f"dec{k}.c1", training)
        x = _convbnrelu(x, store, f"dec{k}.c2", training)

    return conv2d(x, store.param("head.conv.weight"), store.param("head.conv.bias"))


def load_model(path, arch: ArchConfig) -> tuple[ParameterStore, dict[str, np.ndarray]]:
    """Rebuild a store for `arch` and fill it from a checkpoint file.

    Returns the store plus any extra entries (optimizer state etc.) the
    checkpoint carried.
    """
    entries = load_checkpoint(path)
    store = build(arch, rng_seed=0)
    store.load_entries(entries)
    known = set(store.state_entries())
    extra = {k: v for k, v in entries.items() if k not in known}
    return store, extra
