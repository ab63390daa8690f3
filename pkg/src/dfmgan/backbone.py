"""Stage 1: train the style-based backbone on defect-free images."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
import torch

from .augment import AdaptiveAugment, diff_augment
from .checkpoint import Checkpoint, load_state, state_arrays
from .losses import adversarial_losses, path_length_penalty, r1_penalty
from .networks import Discriminator, Generator, SynthesisConfig, make_noise
from .utils import (ConfigError, DatasetError, NumericalError, check_images, ensure_finite,
                    stream_seed, torch_generator)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 0.0025
    betas: tuple = (0.0, 0.99)
    eps: float = 1e-8
    loss: str = "wgan"
    wgan_drift: float = 0.001
    r1_gamma: float = 10.0
    r1_interval: int = 16
    pl_weight: float = 2.0
    pl_interval: int = 8
    pl_batch_shrink: int = 2
    ada: bool = True
    ada_target: float = 0.6
    augment_p: float = 0.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.loss not in ("wgan", "logistic"):
            raise ConfigError(f"loss must be 'wgan' or 'logistic', got {self.loss!r}")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ConfigError("augment_p must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def make_adam(params, cfg: TrainConfig, reg_interval: int = 0) -> torch.optim.Adam:
    """Adam with the lazy-regularization correction of lr and betas."""
    c = reg_interval / (reg_interval + 1) if reg_interval else 1.0
    betas = (cfg.betas[0] ** c, cfg.betas[1] ** c)
    return torch.optim.Adam(params, lr=cfg.lr * c, betas=betas, eps=cfg.eps)


def optimizer_arrays(opt: torch.optim.Adam, names: dict, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for p, name in names.items():
        st = opt.state.get(p)
        if st:
            out[f"optim.{prefix}.{name}.exp_avg"] = st["exp_avg"].numpy().astype("<f4")
            out[f"optim.{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype("<f4")
            out[f"optim.{prefix}.{name}.step"] = np.array([float(st["step"])], dtype="<f4")
    return out


def restore_optimizer(opt: torch.optim.Adam, names: dict, prefix: str, arrays: dict) -> None:
    for p, name in names.items():
        key = f"optim.{prefix}.{name}"
        if f"{key}.exp_avg" in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"{key}.step"][0])),
                "exp_avg": torch.from_numpy(arrays[f"{key}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"{key}.exp_avg_sq"].copy()),
            }


def build_models(cfg: SynthesisConfig, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_seed(seed, "g_init"))
        G = Generator(cfg)
        torch.manual_seed(stream_seed(seed, "d_init"))
        D = Discriminator(cfg)
    return G, D


def set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def check_params_finite(*modules, where: str = "") -> None:
    for m in modules:
        for name, p in m.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericalError(f"non-finite parameter {name} {where}")


def backbone_checkpoint(G, D, cfg: SynthesisConfig, train: TrainConfig, step: int, extra: dict,
                        opt_arrays: Optional[dict] = None) -> Checkpoint:
    arrays = {**state_arrays(G.mapping, "mapping"), **state_arrays(G.synthesis, "synthesis"),
              **state_arrays(D, "disc")}
    arrays.update(opt_arrays or {})
    return Checkpoint(arrays=arrays, config={"model": cfg.to_dict(), "training": train.to_dict()},
                      step=step, kind="backbone", metadata=extra)


def load_backbone(ckpt: Checkpoint):
    """Rebuild (G, D, SynthesisConfig) from a stage-1 or stage-2 checkpoint."""
    cfg = SynthesisConfig(**ckpt.config["model"])
    G, D = Generator(cfg), Discriminator(cfg)
    load_state(G.mapping, ckpt.subset("mapping"))
    load_state(G.synthesis, ckpt.subset("synthesis"))
    load_state(D, ckpt.subset("disc"))
    return G, D, cfg


def train_backbone(images, model: SynthesisConfig = None, train: TrainConfig = None,
                   resume: Optional[Checkpoint] = None,
                   callback: Optional[Callable[[dict], None]] = None) -> tuple[Checkpoint, list]:
    """Alternate generator / discriminator Adam steps on defect-free images.

    Returns the final checkpoint and a list of logged loss records. With
    ``resume`` the parameters, optimizer moments, augmentation probability and
    step counter continue from the given checkpoint.
    """
    model = model or SynthesisConfig()
    train = train or TrainConfig()
    if images is None or len(images) == 0:
        raise DatasetError("empty training set")
    reals = check_images(images, 3, model.resolution)

    if resume is not None:
        G, D, model = load_backbone(resume)
        start = resume.step
        meta = resume.metadata
    else:
        G, D = build_models(model, train.seed)
        start, meta = 0, {}
    pl_mean = torch.tensor(float(meta.get("pl_mean", 0.0)))
    ada = AdaptiveAugment(p=meta.get("augment_p", train.augment_p), target=train.ada_target,
                          pending=meta.get("augment_pending", ()))

    opt_g = make_adam(G.parameters(), train, train.pl_interval if train.pl_weight > 0 else 0)
    opt_d = make_adam(D.parameters(), train, train.r1_interval if train.r1_gamma > 0 else 0)
    g_names = {p: n for n, p in G.named_parameters()}
    d_names = {p: n for n, p in D.named_parameters()}
    if resume is not None:
        restore_optimizer(opt_g, g_names, "G", resume.arrays)
        restore_optimizer(opt_d, d_names, "D", resume.arrays)

    history = []
    noise_shapes = G.noise_shapes()
    B = train.batch_size
    for step in range(start, start + train.steps):
        gen = torch_generator(train.seed, f"backbone/{step}")
        rec = {"step": step}

        # generator phase
        set_requires_grad(D, False)
        z = torch.randn(B, model.z_dim, generator=gen)
        noise = make_noise(noise_shapes, B, gen)
        w = G.mapping(z)
        fake = G.synthesis(w, noise)[0]
        fake_scores = D(diff_augment(fake, ada.p, gen))
        adv_g, _ = adversarial_losses(fake_scores, fake_scores, train.loss)
        loss_g = adv_g
        rec["adv_g"] = adv_g
        if train.pl_weight > 0 and step % train.pl_interval == 0:
            bp = max(1, B // train.pl_batch_shrink)
            pl_noise = {k: v[:bp] for k, v in noise.items()}
            pl_w = G.mapping(z[:bp])
            pen, pl_mean = path_length_penalty(lambda ww: G.synthesis(ww, pl_noise)[0], pl_w, pl_mean, gen)
            loss_g = loss_g + pen * train.pl_weight * train.pl_interval
            rec["path_length"] = pen
        ensure_finite(rec, f"generator step {step}")
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()
        set_requires_grad(D, True)

        # discriminator phase
        with torch.no_grad():
            z = torch.randn(B, model.z_dim, generator=gen)
            fake = G(z, make_noise(noise_shapes, B, gen))
        idx = torch.randint(len(reals), (B,), generator=gen)
        real_aug = diff_augment(reals[idx], ada.p, gen)
        fake_aug = diff_augment(fake, ada.p, gen)
        loss_d = 0.0
        if train.r1_gamma > 0 and step % train.r1_interval == 0:
            r1, real_scores = r1_penalty(D, real_aug, train.r1_gamma)
            loss_d = r1 * train.r1_interval
            rec["r1"] = r1
        else:
            real_scores = D(real_aug)
        fake_scores = D(fake_aug)
        _, adv_d = adversarial_losses(real_scores, fake_scores, train.loss, train.wgan_drift)
        loss_d = loss_d + adv_d
        rec["adv_d"] = adv_d
        ensure_finite(rec, f"discriminator step {step}")
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        if train.ada:
            ada.update(real_scores)

        if step % train.log_every == 0 or step == start + train.steps - 1:
            check_params_finite(G, D, where=f"after step {step}")
            row = {k: (float(v.detach()) if torch.is_tensor(v) else v) for k, v in rec.items()}
            row["augment_p"] = ada.p
            history.append(row)
            log.info("backbone %s", row)
            if callback:
                callback(row)

    extra = {"pl_mean": float(pl_mean), "augment_p": ada.p, "augment_pending": ada.pending}
    opt = {**optimizer_arrays(opt_g, g_names, "G"), **optimizer_arrays(opt_d, d_names, "D")}
    return backbone_checkpoint(G, D, model, train, start + train.steps, extra, opt), history
