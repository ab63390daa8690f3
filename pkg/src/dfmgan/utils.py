"""Seeding, input validation and small shared helpers."""

from __future__ import annotations

import zlib

import numpy as np
import torch


class ConfigError(ValueError):
    """Invalid configuration or shape/dimension mismatch."""


class DatasetError(ValueError):
    """Missing, empty or malformed dataset."""


class NumericalError(FloatingPointError):
    """A loss or parameter became non-finite during training."""


def stream_seed(root_seed: int, label: str) -> int:
    """Derive an independent 63-bit seed for the named random stream.

    All randomness in the package flows from one root seed; each subsystem
    ("data", "g_init", "z_sample", ...) gets its own stream so that changing
    one consumer does not perturb the others.
    """
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(zlib.crc32(label.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def torch_generator(root_seed: int, label: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(root_seed, label))
    return g


def numpy_rng(root_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root_seed, label))


def check_images(images, channels: int | None = 3, resolution: int | None = None,
                 name: str = "images") -> torch.Tensor:
    """Coerce ``images`` to a float32 NCHW tensor and validate its shape."""
    x = torch.as_tensor(images)
    if not x.is_floating_point():
        x = x.float()
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ConfigError(f"{name}: expected an (N, C, H, W) array, got shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ConfigError(f"{name}: expected {channels} channels, got {x.shape[1]}")
    if x.shape[2] != x.shape[3]:
        raise ConfigError(f"{name}: images must be square, got {x.shape[2]}x{x.shape[3]}")
    if resolution is not None and x.shape[2] != resolution:
        raise ConfigError(f"{name}: expected resolution {resolution}, got {x.shape[2]}")
    if not torch.isfinite(x).all():
        raise ConfigError(f"{name}: non-finite values")
    return x


def check_masks(masks, resolution: int | None = None, name: str = "masks") -> torch.Tensor:
    """Coerce binary masks to an (N, 1, H, W) float tensor with values in {0, 1}."""
    m = torch.as_tensor(masks)
    if m.ndim == 3:
        m = m[:, None]
    m = check_images(m.float(), channels=1, resolution=resolution, name=name)
    if not torch.all((m == 0) | (m == 1)):
        raise ConfigError(f"{name}: masks must be binary {{0, 1}}")
    return m


def check_latent(z, dim: int, name: str = "z") -> torch.Tensor:
    z = torch.as_tensor(z)
    if not z.is_floating_point():
        z = z.float()
    if z.ndim == 1:
        z = z[None]
    if z.ndim != 2 or z.shape[1] != dim:
        raise ConfigError(f"{name}: expected (N, {dim}) codes, got shape {tuple(z.shape)}")
    return z


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def count_parameters(module: torch.nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def ensure_finite(losses: dict, where: str) -> None:
    for k, v in losses.items():
        if torch.is_tensor(v) and not torch.isfinite(v).all():
            raise NumericalError(f"non-finite loss {k!r} at {where}")
