"""Differentiable augmentation applied to both real and generated batches."""

from __future__ import annotations

from typing import Optional

import torch

from .utils import ConfigError

DEFAULT_OPS = ("flip", "translation", "brightness")


def diff_augment(images: torch.Tensor, p: float, generator: Optional[torch.Generator] = None,
                 ops=DEFAULT_OPS, color_channels: int = 3) -> torch.Tensor:
    """Randomly flip, translate and brighten each sample with probability ``p``.

    Geometric ops move every channel; brightness only shifts the first
    ``color_channels`` channels so that a concatenated mask channel stays
    binary. All ops are differentiable with respect to ``images``.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"augmentation probability must be in [0, 1], got {p}")
    if p == 0.0:
        return images
    n, _, h, w = images.shape
    x = images

    def draw():
        return torch.rand(n, generator=generator) < p

    for op in ops:
        if op == "flip":
            apply = draw()
            if apply.any():
                x = torch.where(apply[:, None, None, None], x.flip(3), x)
        elif op == "translation":
            apply = draw()
            max_shift = max(1, w // 8)
            shifts = torch.randint(-max_shift, max_shift + 1, (n, 2), generator=generator)
            shifts = shifts * apply[:, None]
            if apply.any():
                x = translate(x, shifts)
        elif op == "brightness":
            apply = draw()
            delta = (torch.rand(n, generator=generator) - 0.5) * apply
            if apply.any():
                shift = torch.zeros(n, x.shape[1], 1, 1, dtype=x.dtype)
                shift[:, :color_channels] = delta[:, None, None, None].to(x.dtype)
                x = x + shift
        else:
            raise ConfigError(f"unknown augmentation op {op!r}")
    return x


def translate(x: torch.Tensor, shifts: torch.Tensor) -> torch.Tensor:
    """Integer translation with zero fill; ``shifts[i] = (dy, dx)``."""
    n, c, h, w = x.shape
    ys = torch.arange(h)[None, :] - shifts[:, :1]
    xs = torch.arange(w)[None, :] - shifts[:, 1:]
    valid = ((ys >= 0) & (ys < h))[:, :, None] & ((xs >= 0) & (xs < w))[:, None, :]
    yi = ys.clamp(0, h - 1)[:, :, None].expand(n, h, w)
    xi = xs.clamp(0, w - 1)[:, None, :].expand(n, h, w)
    flat = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
    out = x.reshape(n, c, h * w).gather(2, flat).reshape(n, c, h, w)
    return out * valid[:, None].to(x.dtype)


class AdaptiveAugment:
    """Sign-of-D(real) heuristic controlling the augmentation probability.

    Every ``interval`` batches, ``p`` moves by ``step`` towards more
    augmentation if the mean sign of the real scores exceeds ``target``.
    """

    def __init__(self, p: float = 0.0, target: float = 0.6, step: float = 0.01, interval: int = 4,
                 pending=()):
        self.p, self.target, self.step, self.interval = float(p), target, step, interval
        self._signs: list[float] = list(pending)

    @property
    def pending(self) -> list[float]:
        """Signs accumulated since the last adjustment (saved with checkpoints)."""
        return list(self._signs)

    def update(self, real_scores: torch.Tensor) -> float:
        self._signs.append(float(torch.sign(real_scores.detach()).mean()))
        if len(self._signs) >= self.interval:
            rt = sum(self._signs) / len(self._signs)
            self.p += self.step if rt > self.target else -self.step
            self.p = min(max(self.p, 0.0), 1.0)
            self._signs.clear()
        return self.p
