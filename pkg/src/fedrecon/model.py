"""Reconstruction network and adversarial domain identifier.

The reconstruction network is a small U-Net: ``depth`` encoder levels of
double 3x3 conv + ReLU with 2x2 max pooling between them, a double-conv
bottleneck whose output is the exposed latent, and a mirrored decoder
using nearest-neighbor upsampling, channel-concat skip connections, and
a 1x1 output conv. The output is added to the network input (global
residual), so an all-zero output layer reproduces the input exactly.

Parameter names are stable and documented because federated averaging
matches entries by name:

    enc{i}.conv1 / enc{i}.conv2       encoder double convs, i in [0, depth)
    bottleneck.conv1 / .conv2         latent-producing convs
    dec{i}.up / .conv1 / .conv2       decoder level i (mirrors enc{i})
    out                               1x1 output conv
    cls.conv1 / cls.conv2             domain identifier (never aggregated)

each with ``.w`` (out_c, in_c, kh, kw) and ``.b`` (out_c, 1, 1) leaves.
The encoder parameter namespace is enc*/bottleneck*; everything the
cross-site alignment updates at the target lives there.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ParamSet, Tensor

__all__ = [
    "UNetConfig",
    "DomainIdentifierConfig",
    "LatentBatch",
    "unet_init",
    "unet_param_count",
    "identifier_init",
    "encoder_forward",
    "decoder_forward",
    "reconstruct",
    "identifier_forward",
    "is_encoder_param",
    "is_identifier_param",
]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** (self.depth - 1)


@dataclass(frozen=True)
class DomainIdentifierConfig:
    latent_channels: int
    hidden_channels: int = 16


@dataclass
class LatentBatch:
    """Bottleneck features for one batch, tagged with the producing site."""

    features: Tensor
    origin_site: str = ""

    def __post_init__(self):
        if self.features.data.ndim != 4:
            raise ValueError(
                f"latent features must be 4D, got shape {self.features.data.shape}"
            )

    def to_bytes(self) -> bytes:
        arr = np.ascontiguousarray(self.features.data, dtype="<f8")
        site = self.origin_site.encode("utf-8")
        return (
            struct.pack("<IIII", *arr.shape)
            + arr.tobytes()
            + struct.pack("<H", len(site))
            + site
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LatentBatch":
        if len(raw) < 16:
            raise ValueError("latent payload truncated")
        shape = struct.unpack("<IIII", raw[:16])
        n = int(np.prod(shape))
        end = 16 + 8 * n
        if len(raw) < end + 2:
            raise ValueError("latent payload truncated")
        data = np.frombuffer(raw[16:end], dtype="<f8").reshape(shape).copy()
        (site_len,) = struct.unpack("<H", raw[end:end + 2])
        site = raw[end + 2:end + 2 + site_len].decode("utf-8")
        return cls(Tensor(data), site)


def _init_conv(entries, name, out_ch, in_ch, k, rng):
    fan_in = in_ch * k * k
    wb = math.sqrt(6.0 / fan_in)
    entries.append(
        (name + ".w", Tensor(rng.uniform(-wb, wb, size=(out_ch, in_ch, k, k)), requires_grad=True))
    )
    bb = 1.0 / math.sqrt(fan_in)
    entries.append(
        (name + ".b", Tensor(rng.uniform(-bb, bb, size=(out_ch, 1, 1)), requires_grad=True))
    )


def unet_init(cfg: UNetConfig, rng) -> ParamSet:
    """Fan-in-scaled uniform init, layer order fixed by the naming table."""
    entries = []
    ch = cfg.in_channels
    for i in range(cfg.depth):
        out = cfg.base_channels * 2 ** i
        _init_conv(entries, f"enc{i}.conv1", out, ch, 3, rng)
        _init_conv(entries, f"enc{i}.conv2", out, out, 3, rng)
        ch = out
    _init_conv(entries, "bottleneck.conv1", ch, ch, 3, rng)
    _init_conv(entries, "bottleneck.conv2", ch, ch, 3, rng)
    prev = ch
    for i in reversed(range(cfg.depth)):
        skip = cfg.base_channels * 2 ** i
        _init_conv(entries, f"dec{i}.up", skip, prev, 3, rng)
        _init_conv(entries, f"dec{i}.conv1", skip, 2 * skip, 3, rng)
        _init_conv(entries, f"dec{i}.conv2", skip, skip, 3, rng)
        prev = skip
    _init_conv(entries, "out", cfg.in_channels, cfg.base_channels, 1, rng)
    return ParamSet(entries)


def unet_param_count(cfg: UNetConfig) -> int:
    """Closed-form parameter count for the documented layer list."""

    def conv(out_ch, in_ch, k):
        return out_ch * in_ch * k * k + out_ch

    total = 0
    ch = cfg.in_channels
    for i in range(cfg.depth):
        out = cfg.base_channels * 2 ** i
        total += conv(out, ch, 3) + conv(out, out, 3)
        ch = out
    total += 2 * conv(ch, ch, 3)
    prev = ch
    for i in reversed(range(cfg.depth)):
        skip = cfg.base_channels * 2 ** i
        total += conv(skip, prev, 3) + conv(skip, 2 * skip, 3) + conv(skip, skip, 3)
        prev = skip
    return total + conv(cfg.in_channels, cfg.base_channels, 1)


def identifier_init(cfg: DomainIdentifierConfig, rng) -> ParamSet:
    entries = []
    _init_conv(entries, "cls.conv1", cfg.hidden_channels, cfg.latent_channels, 3, rng)
    _init_conv(entries, "cls.conv2", 1, cfg.hidden_channels, 3, rng)
    return ParamSet(entries)


def is_encoder_param(name: str) -> bool:
    return name.startswith("enc") or name.startswith("bottleneck")


def is_identifier_param(name: str) -> bool:
    return name.startswith("cls.")


def _conv_layer(params: ParamSet, name: str, x: Tensor, padding: int) -> Tensor:
    y = ops.conv2d(x, params.get(name + ".w"), stride=1, padding=padding)
    return ops.add(y, params.get(name + ".b"))


def _depth_of(params: ParamSet) -> int:
    depth = 0
    while f"enc{depth}.conv1.w" in params:
        depth += 1
    if depth == 0:
        raise ValueError("parameter set contains no encoder levels")
    return depth


def encoder_forward(params: ParamSet, batch: Tensor, origin_site: str = ""):
    """Run the encoder; returns the latent and the skip stack.

    The skip stack is [input, skip_0, ..., skip_{depth-1}]; the input
    rides along so the decoder can apply the residual connection.
    """
    depth = _depth_of(params)
    if batch.data.ndim != 4:
        raise ValueError(f"expected NCHW batch, got shape {batch.data.shape}")
    in_ch = params.get("enc0.conv1.w").data.shape[1]
    n, c, h, w = batch.data.shape
    if c != in_ch:
        raise ValueError(f"batch has {c} channels, model expects {in_ch}")
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {2 ** depth}")
    skips = [batch]
    x = batch
    for i in range(depth):
        x = ops.relu(_conv_layer(params, f"enc{i}.conv1", x, 1))
        x = ops.relu(_conv_layer(params, f"enc{i}.conv2", x, 1))
        skips.append(x)
        x = ops.maxpool2(x)
    x = ops.relu(_conv_layer(params, "bottleneck.conv1", x, 1))
    x = ops.relu(_conv_layer(params, "bottleneck.conv2", x, 1))
    return LatentBatch(x, origin_site), skips


def decoder_forward(params: ParamSet, latent: LatentBatch, skip_stack) -> Tensor:
    """Decode the latent against the skip stack; output includes the residual."""
    depth = _depth_of(params)
    if len(skip_stack) != depth + 1:
        raise ValueError(f"skip stack has {len(skip_stack)} entries, expected {depth + 1}")
    x = latent.features
    for i in reversed(range(depth)):
        x = _conv_layer(params, f"dec{i}.up", ops.upsample_nearest2(x), 1)
        x = ops.concat_channels(x, skip_stack[i + 1])
        x = ops.relu(_conv_layer(params, f"dec{i}.conv1", x, 1))
        x = ops.relu(_conv_layer(params, f"dec{i}.conv2", x, 1))
    x = _conv_layer(params, "out", x, 0)
    return ops.add(x, skip_stack[0])


def reconstruct(params: ParamSet, batch: Tensor) -> Tensor:
    latent, skips = encoder_forward(params, batch)
    return decoder_forward(params, latent, skips)


def identifier_forward(cparams: ParamSet, latent: LatentBatch) -> Tensor:
    """Per-sample probability that the latent came from the source site."""
    h = ops.leaky_relu(_conv_layer(cparams, "cls.conv1", latent.features, 1))
    logits = ops.global_avg_pool(_conv_layer(cparams, "cls.conv2", h, 1))
    return ops.sigmoid(logits)
