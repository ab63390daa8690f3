"""Adversarial losses and the R1 / path-length regularizers."""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .utils import ConfigError


def adversarial_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor, kind: str = "wgan",
                       drift: float = 0.0):
    """Return (generator loss, discriminator loss) for the given score batches.

    ``wgan``: D minimizes E[D(fake)] - E[D(real)] + drift * E[D(real)^2],
    G minimizes -E[D(fake)]. ``logistic``: the non-saturating softplus form.
    """
    if kind == "wgan":
        loss_d = fake_scores.mean() - real_scores.mean()
        if drift:
            loss_d = loss_d + drift * real_scores.square().mean()
        return -fake_scores.mean(), loss_d
    if kind == "logistic":
        return F.softplus(-fake_scores).mean(), F.softplus(fake_scores).mean() + F.softplus(-real_scores).mean()
    raise ConfigError(f"unknown adversarial loss {kind!r}")


def r1_penalty(discriminator: Callable, real: torch.Tensor, gamma: float = 10.0):
    """(gamma / 2) * E[||grad_x D(x)||^2] at the real samples.

    Returns (penalty, real scores) so callers can reuse the forward pass.
    """
    if gamma == 0:
        scores = discriminator(real)
        return torch.zeros([], dtype=scores.dtype), scores
    real = real.detach().requires_grad_(True)
    scores = discriminator(real)
    (grad,) = torch.autograd.grad(scores.sum(), real, create_graph=True)
    penalty = grad.square().sum(dim=[1, 2, 3]).mean() * (gamma / 2)
    return penalty, scores


def path_lengths(render: Callable, w: torch.Tensor, noise_generator: Optional[torch.Generator] = None):
    """Jacobian-vector norms ||J_w^T y|| with y ~ N(0, I) / sqrt(H W)."""
    w = w.detach().requires_grad_(True) if not w.requires_grad else w
    img = render(w)
    h, wd = img.shape[2], img.shape[3]
    y = torch.randn(img.shape, generator=noise_generator, dtype=img.dtype) / math.sqrt(h * wd)
    (grad,) = torch.autograd.grad((img * y).sum(), w, create_graph=True)
    return grad.square().sum(dim=1).sqrt()


def path_length_penalty(render: Callable, w: torch.Tensor, pl_mean: torch.Tensor,
                        noise_generator: Optional[torch.Generator] = None, decay: float = 0.01):
    """StyleGAN2 perceptual path-length penalty.

    Returns (penalty, updated running mean). The running mean is detached.
    """
    lengths = path_lengths(render, w, noise_generator)
    new_mean = pl_mean + decay * (lengths.mean().detach() - pl_mean)
    penalty = (lengths - new_mean).square().mean()
    return penalty, new_mean


def stylegan_losses(discriminator: Callable, real: torch.Tensor, fake: torch.Tensor, *,
                    kind: str = "wgan", r1_gamma: float = 10.0,
                    render: Optional[Callable] = None, w: Optional[torch.Tensor] = None,
                    pl_mean: Optional[torch.Tensor] = None,
                    noise_generator: Optional[torch.Generator] = None) -> dict:
    """Un-weighted adversarial, R1 and (optionally) path-length terms.

    Lazy-regularization intervals and weights are applied by the trainer.
    ``path_length`` is computed only if ``render`` and ``w`` are given.
    """
    if len(real) == 0 or len(fake) == 0:
        raise ConfigError("empty batch")
    r1, real_scores = r1_penalty(discriminator, real, r1_gamma)
    fake_scores = discriminator(fake)
    adv_g, adv_d = adversarial_losses(real_scores, fake_scores, kind)
    out = {"adv_g": adv_g, "adv_d": adv_d, "r1": r1}
    if render is not None and w is not None:
        mean = pl_mean if pl_mean is not None else torch.zeros([], dtype=real.dtype)
        out["path_length"], out["pl_mean"] = path_length_penalty(render, w, mean, noise_generator)
    return out
