"""Style-based generator and residual discriminator building blocks.

Layers use equalized learning rate: parameters are drawn from N(0, 1) and
scaled by 1/sqrt(fan_in) at runtime. Up/down-sampling use bilinear
interpolation and 2x2 average pooling instead of the FIR filters of the
reference StyleGAN2 code.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .utils import ConfigError, NumericalError, check_latent, is_power_of_two

LRELU_SLOPE = 0.2
LRELU_GAIN = math.sqrt(2.0)


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LRELU_SLOPE) * LRELU_GAIN


@dataclass
class SynthesisConfig:
    """Generator/discriminator geometry.

    Channels at resolution ``r`` are ``min(channel_base // r, channel_max)``
    unless ``channels`` gives an explicit map. The desk default produces
    {4: 128, 8: 128, 16: 64, 32: 32}; ``full_scale()`` gives the 256x256 setting.
    """

    resolution: int = 32
    channel_base: int = 1024
    channel_max: int = 128
    z_dim: int = 512
    w_dim: int = 512
    mapping_layers: int = 2
    mapping_lr_mul: float = 0.01
    img_channels: int = 3
    const_resolution: int = 4
    disc_channel_base: Optional[int] = None
    disc_channel_max: Optional[int] = None
    mbstd_group: int = 4
    channels: Optional[dict] = None

    def __post_init__(self):
        if not is_power_of_two(self.resolution) or self.resolution < 8:
            raise ConfigError(f"resolution must be a power of two >= 8, got {self.resolution}")
        if self.const_resolution != 4:
            raise ConfigError("const_resolution is fixed at 4")
        if self.channels is not None:
            self.channels = {int(k): int(v) for k, v in self.channels.items()}
        for r in self.resolutions:
            if self.channels_at(r) < 1:
                raise ConfigError(f"channel count at resolution {r} must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "SynthesisConfig":
        kw = dict(resolution=256, channel_base=16384, channel_max=512)
        kw.update(overrides)
        return cls(**kw)

    @property
    def resolutions(self) -> list[int]:
        return [2 ** i for i in range(2, int(math.log2(self.resolution)) + 1)]

    def channels_at(self, res: int) -> int:
        if self.channels is not None:
            return self.channels[res]
        return min(self.channel_base // res, self.channel_max)

    def disc_channels_at(self, res: int) -> int:
        base = self.disc_channel_base or self.channel_base
        cmax = self.disc_channel_max or self.channel_max
        if self.channels is not None and self.disc_channel_base is None:
            return self.channels[res]
        return min(base // res, cmax)

    @property
    def channel_map(self) -> dict[int, int]:
        return {r: self.channels_at(r) for r in self.resolutions}

    def to_dict(self) -> dict:
        return asdict(self)


class FullyConnected(nn.Module):
    def __init__(self, in_features, out_features, bias=True, bias_init=0.0, lr_mul=1.0, activation="linear"):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init))) if bias else None
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.bias_gain = lr_mul
        self.activation = activation

    def forward(self, x):
        x = F.linear(x, self.weight * self.weight_gain,
                     None if self.bias is None else self.bias * self.bias_gain)
        return lrelu(x) if self.activation == "lrelu" else x


class MappingNetwork(nn.Module):
    """z -> w: RMS normalisation followed by ``num_layers`` FC + leaky ReLU layers."""

    def __init__(self, z_dim=512, w_dim=512, num_layers=2, lr_mul=0.01):
        super().__init__()
        self.z_dim, self.w_dim = z_dim, w_dim
        dims = [z_dim] + [w_dim] * num_layers
        for i in range(num_layers):
            setattr(self, f"fc{i}", FullyConnected(dims[i], dims[i + 1], lr_mul=lr_mul, activation="lrelu"))
        self.num_layers = num_layers

    def forward(self, z):
        z = check_latent(z, self.z_dim)
        x = z * (z.square().mean(dim=1, keepdim=True) + 1e-8).rsqrt()
        for i in range(self.num_layers):
            x = getattr(self, f"fc{i}")(x)
        return x


def map_latent(z, mapping: MappingNetwork) -> torch.Tensor:
    """Map latent codes to modulation weights with the given mapping network."""
    return mapping(z)


def modulated_weights(weight: torch.Tensor, styles: torch.Tensor, demodulate: bool = True,
                      eps: float = 1e-8) -> torch.Tensor:
    """Per-sample effective kernels, shape (N, O, I, k, k)."""
    w = weight[None] * styles[:, None, :, None, None]
    if demodulate:
        w = w * (w.square().sum(dim=[2, 3, 4], keepdim=True) + eps).rsqrt()
    return w


def modulated_conv(x: torch.Tensor, weight: torch.Tensor, styles: torch.Tensor,
                   bias: Optional[torch.Tensor] = None, demodulate: bool = True,
                   up: bool = False, eps: float = 1e-8) -> torch.Tensor:
    """Convolve ``x`` with ``weight`` modulated per sample by ``styles``.

    Equivalent to a grouped convolution with ``modulated_weights`` but
    computed by scaling activations, which is much faster on CPU.
    """
    if x.shape[1] != weight.shape[1] or styles.shape[1] != weight.shape[1]:
        raise ConfigError(f"channel mismatch: x {x.shape[1]}, weight {weight.shape[1]}, styles {styles.shape[1]}")
    if not torch.isfinite(styles).all():
        raise NumericalError("non-finite modulation styles")
    x = x * styles[:, :, None, None].to(x.dtype)
    if up:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    x = F.conv2d(x, weight.to(x.dtype), padding=weight.shape[-1] // 2)
    if demodulate:
        wsq = weight.square().sum(dim=[2, 3])  # O x I
        dcoefs = (styles.square() @ wsq.t() + eps).rsqrt()
        x = x * dcoefs[:, :, None, None]
    if bias is not None:
        x = x + bias[None, :, None, None]
    return x


class SynthesisLayer(nn.Module):
    """Modulated 3x3 conv + noise + bias + leaky ReLU."""

    def __init__(self, in_channels, out_channels, w_dim, resolution, up=False):
        super().__init__()
        self.resolution, self.up = resolution, up
        self.affine = FullyConnected(w_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 3, 3))
        self.noise_strength = nn.Parameter(torch.zeros([]))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w, noise=None):
        styles = self.affine(w)
        x = modulated_conv(x, self.weight, styles, demodulate=True, up=self.up)
        if noise is not None:
            x = x + noise * self.noise_strength
        return lrelu(x + self.bias[None, :, None, None])


class ToImage(nn.Module):
    """Modulated 1x1 conv without demodulation (ToRGB, or ToMask with one channel)."""

    def __init__(self, in_channels, out_channels, w_dim):
        super().__init__()
        self.affine = FullyConnected(w_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.weight_gain = 1.0 / math.sqrt(in_channels)

    def forward(self, x, w):
        styles = self.affine(w) * self.weight_gain
        return modulated_conv(x, self.weight, styles, bias=self.bias, demodulate=False)


class SynthesisBlock(nn.Module):
    """One resolution of the skip generator: (const | up-conv0) -> conv1 [-> ToRGB]."""

    def __init__(self, in_channels, out_channels, w_dim, resolution, img_channels=3, to_rgb=True):
        super().__init__()
        self.resolution = resolution
        if in_channels == 0:
            self.const = nn.Parameter(torch.randn(out_channels, resolution, resolution))
        else:
            self.conv0 = SynthesisLayer(in_channels, out_channels, w_dim, resolution, up=True)
        self.conv1 = SynthesisLayer(out_channels, out_channels, w_dim, resolution)
        if to_rgb:
            self.torgb = ToImage(out_channels, img_channels, w_dim)
        self.in_channels = in_channels

    def noise_names(self) -> list[str]:
        return ["conv1"] if self.in_channels == 0 else ["conv0", "conv1"]

    def features(self, x, w, noise: dict):
        if self.in_channels == 0:
            x = self.const[None].expand(w.shape[0], -1, -1, -1)
        else:
            x = self.conv0(x, w, noise.get("conv0"))
        return self.conv1(x, w, noise.get("conv1"))


def upsample_image(img: torch.Tensor) -> torch.Tensor:
    return F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)


FeatureHook = Callable[[int, Optional[torch.Tensor], torch.Tensor], torch.Tensor]


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: SynthesisConfig):
        super().__init__()
        self.cfg = cfg
        prev = 0
        for res in cfg.resolutions:
            ch = cfg.channels_at(res)
            setattr(self, f"b{res}", SynthesisBlock(prev, ch, cfg.w_dim, res, cfg.img_channels))
            prev = ch

    def blocks(self):
        return [getattr(self, f"b{r}") for r in self.cfg.resolutions]

    def noise_shapes(self) -> dict[str, tuple[int, int]]:
        return {f"b{b.resolution}.{n}": (b.resolution, b.resolution) for b in self.blocks() for n in b.noise_names()}

    def forward(self, w, noise: Optional[dict] = None, hook: Optional[FeatureHook] = None):
        """Return (image, features) where ``features[res]`` is the block output.

        ``hook(res, block_input, block_output)`` may replace the block output
        before it reaches ToRGB and the next block.
        """
        noise = noise or {}
        x, img, feats = None, None, {}
        for block in self.blocks():
            res = block.resolution
            bn = {k.split(".", 1)[1]: v for k, v in noise.items() if k.startswith(f"b{res}.")}
            out = block.features(x, w, bn)
            if hook is not None:
                out = hook(res, x, out)
            feats[res] = out
            y = block.torgb(out, w)
            img = y if img is None else upsample_image(img) + y
            x = out
        return img, feats


def make_noise(noise_shapes: dict, batch: int, generator: Optional[torch.Generator] = None,
               dtype=torch.float32) -> dict:
    return {k: torch.randn(batch, 1, h, w, generator=generator, dtype=dtype) for k, (h, w) in sorted(noise_shapes.items())}


class Generator(nn.Module):
    """Backbone generator: mapping network + skip synthesis network."""

    def __init__(self, cfg: SynthesisConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_layers, cfg.mapping_lr_mul)
        self.synthesis = SynthesisNetwork(cfg)

    def noise_shapes(self):
        return self.synthesis.noise_shapes()

    def forward(self, z, noise=None):
        return self.synthesis(self.mapping(z), noise)[0]


def synthesize(w, noise, generator: Generator):
    """Render images and per-resolution features from modulation weights."""
    return generator.synthesis(w, noise)


class Conv2dLayer(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, bias=True, activation="lrelu", down=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size ** 2)
        self.activation, self.down = activation, down

    def forward(self, x, gain=1.0):
        if self.down and self.weight.shape[-1] == 1:
            x = F.avg_pool2d(x, 2)
        x = F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.weight.shape[-1] // 2)
        if self.down and self.weight.shape[-1] > 1:
            x = F.avg_pool2d(x, 2)
        if self.activation == "lrelu":
            x = lrelu(x)
        return x * gain if gain != 1.0 else x


class DiscriminatorBlock(nn.Module):
    """Residual block: [fromrgb] -> conv0 -> conv1(down), plus a 1x1 down skip."""

    def __init__(self, tmp_channels, out_channels, resolution, img_channels=0):
        super().__init__()
        self.resolution, self.img_channels = resolution, img_channels
        if img_channels:
            self.fromrgb = Conv2dLayer(img_channels, tmp_channels, 1)
        self.conv0 = Conv2dLayer(tmp_channels, tmp_channels, 3)
        self.conv1 = Conv2dLayer(tmp_channels, out_channels, 3, down=True)
        self.skip = Conv2dLayer(tmp_channels, out_channels, 1, bias=False, activation="linear", down=True)

    def forward(self, x):
        if self.img_channels:
            x = self.fromrgb(x)
        y = self.skip(x, gain=math.sqrt(0.5))
        x = self.conv1(self.conv0(x), gain=math.sqrt(0.5))
        return x + y


def minibatch_stddev(x: torch.Tensor, group_size: int = 4) -> torch.Tensor:
    n, c, h, w = x.shape
    g = max(d for d in range(1, min(group_size, n) + 1) if n % d == 0)
    y = x.reshape(g, -1, 1, c, h, w)
    y = y - y.mean(dim=0)
    y = y.square().mean(dim=0)
    y = (y + 1e-8).sqrt()
    y = y.mean(dim=[2, 3, 4])
    y = y.reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
    return torch.cat([x, y], dim=1)


class DiscriminatorEpilogue(nn.Module):
    def __init__(self, in_channels, resolution=4, mbstd_group=4):
        super().__init__()
        self.mbstd_group = mbstd_group
        self.conv = Conv2dLayer(in_channels + 1, in_channels, 3)
        self.fc = FullyConnected(in_channels * resolution ** 2, in_channels, activation="lrelu")
        self.out = FullyConnected(in_channels, 1)

    def forward(self, x):
        x = minibatch_stddev(x, self.mbstd_group)
        x = self.conv(x)
        x = self.fc(x.flatten(1))
        return self.out(x)


class Discriminator(nn.Module):
    """Residual discriminator from ``resolution`` down to the 4x4 epilogue.

    ``width_divisor`` divides every layer's channel count (rounding up); the
    defect matching discriminator uses 4 with ``in_channels`` = 4.
    """

    def __init__(self, cfg: SynthesisConfig, in_channels: int = 3, width_divisor: int = 1):
        super().__init__()
        self.cfg, self.in_channels = cfg, in_channels
        ch = {r: math.ceil(cfg.disc_channels_at(r) / width_divisor) for r in cfg.resolutions}
        self.block_resolutions = [r for r in reversed(cfg.resolutions) if r >= 8]
        for i, res in enumerate(self.block_resolutions):
            setattr(self, f"b{res}", DiscriminatorBlock(ch[res], ch[res // 2], res, in_channels if i == 0 else 0))
        self.b4 = DiscriminatorEpilogue(ch[4], 4, cfg.mbstd_group)
        self.channels = ch

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"discriminator expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] != self.cfg.resolution:
            raise ConfigError(f"discriminator expects resolution {self.cfg.resolution}, got {x.shape[2]}")
        for res in self.block_resolutions:
            x = getattr(self, f"b{res}")(x)
        return self.b4(x).squeeze(1)


def discriminate(image, discriminator: Discriminator) -> torch.Tensor:
    return discriminator(image)
