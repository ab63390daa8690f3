"""Stage 2: defect-aware residual blocks, mask gating and dual discriminators."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .augment import AdaptiveAugment, diff_augment
from .backbone import (TrainConfig, check_params_finite, load_backbone, make_adam, optimizer_arrays,
                       restore_optimizer, set_requires_grad)
from .checkpoint import Checkpoint, load_state, state_arrays
from .losses import adversarial_losses, r1_penalty
from .networks import (Conv2dLayer, Discriminator, DiscriminatorBlock, Generator, MappingNetwork,
                       SynthesisBlock, SynthesisConfig, ToImage, make_noise)
from .utils import (ConfigError, DatasetError, check_images, check_latent, check_masks, ensure_finite,
                    stream_seed, torch_generator)

log = logging.getLogger(__name__)

FEATURE_MODES = ("residual", "replace")
DISCRIMINATOR_MODES = ("dual", "unified")
MS_MODES = ("mask", "image", "none")


@dataclass
class DefectConfig:
    feature_mode: str = "residual"
    discriminator_mode: str = "dual"
    ms_mode: str = "mask"
    ms_lambda: float = 0.1
    ms_eps: float = 1e-8
    attach_start: Optional[int] = None
    match_width_divisor: int = 4

    def __post_init__(self):
        for name, allowed in (("feature_mode", FEATURE_MODES), ("discriminator_mode", DISCRIMINATOR_MODES),
                              ("ms_mode", MS_MODES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.ms_lambda < 0:
            raise ConfigError("ms_lambda must be >= 0")

    def resolve_attach(self, resolution: int) -> int:
        att = self.attach_start or resolution // 4
        if att < 4 or att > resolution or att & (att - 1):
            raise ConfigError(f"attach_start must be a power of two in [4, {resolution}], got {att}")
        return att

    @classmethod
    def from_dict(cls, d: dict) -> "DefectConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown defect keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# mask operations ---------------------------------------------------------------

def binarize_mask(raw: torch.Tensor) -> torch.Tensor:
    """1 where the raw mask is >= 0 (defect), else 0."""
    return (raw >= 0).to(raw.dtype)


def upsample_mask(mask: torch.Tensor, target_res: int) -> torch.Tensor:
    """Nearest-neighbour upsampling by an integer power-of-two factor."""
    h = mask.shape[-1]
    factor = target_res // h if h else 0
    if factor < 1 or factor * h != target_res or factor & (factor - 1):
        raise ConfigError(f"cannot upsample a {h}x{h} mask to {target_res}")
    if factor == 1:
        return mask
    return mask.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def gate_features(f_object: torch.Tensor, f_defect: torch.Tensor, mask: torch.Tensor,
                  mode: str = "residual") -> torch.Tensor:
    """Manipulate object features only where the raw mask is non-negative.

    ``residual`` adds the defect features there, ``replace`` substitutes them.
    Pixels with mask < 0 return ``f_object`` unchanged (bitwise). No gradient
    flows through the comparison.
    """
    if f_object.shape != f_defect.shape:
        raise ConfigError(f"feature shapes differ: {tuple(f_object.shape)} vs {tuple(f_defect.shape)}")
    if mask.shape[-2:] != f_object.shape[-2:]:
        raise ConfigError(f"mask {tuple(mask.shape)} does not match features {tuple(f_object.shape)}")
    gate = mask >= 0
    if mode == "residual":
        return torch.where(gate, f_object + f_defect, f_object)
    if mode == "replace":
        return torch.where(gate, f_defect, f_object)
    raise ConfigError(f"unknown feature mode {mode!r}")


def to_mask(f_defect: torch.Tensor, w_defect: torch.Tensor, module: ToImage, resolution: int) -> torch.Tensor:
    """Raw one-channel mask from the defect features at the attach resolution."""
    if f_defect.shape[-1] != resolution:
        raise ConfigError(f"ToMask expects resolution {resolution}, got {f_defect.shape[-1]}")
    return module(f_defect, w_defect)


def mode_seeking_loss(w1: torch.Tensor, w2: torch.Tensor, m1: torch.Tensor, m2: torch.Tensor,
                      eps: float = 1e-8) -> torch.Tensor:
    """Batch mean of ||w1 - w2||_1 / (||m1 - m2||_1 + eps)."""
    if w1.shape != w2.shape or m1.shape != m2.shape:
        raise ConfigError("mode seeking operands must have matching shapes")
    if w1.ndim == 1:
        w1, w2, m1, m2 = w1[None], w2[None], m1[None], m2[None]
    num = (w1 - w2).abs().flatten(1).sum(1)
    den = (m1 - m2).abs().flatten(1).sum(1) + eps
    return (num / den).mean()


def straight_through(binary: torch.Tensor, raw: torch.Tensor) -> torch.Tensor:
    """Forward value exactly ``binary``; gradient passes to ``raw`` unchanged."""
    return binary + (raw - raw.detach())


# generator ----------------------------------------------------------------------

class DefectGenerator(nn.Module):
    """Frozen backbone plus defect mapping, residual blocks and ToMask."""

    def __init__(self, backbone: Generator, dcfg: DefectConfig):
        super().__init__()
        cfg = backbone.cfg
        self.cfg, self.dcfg = cfg, dcfg
        self.attach = dcfg.resolve_attach(cfg.resolution)
        self.backbone = backbone
        set_requires_grad(self.backbone, False)
        self.defect_map = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_layers, cfg.mapping_lr_mul)
        self.res_block = nn.ModuleDict()
        for res in cfg.resolutions:
            if res >= self.attach:
                in_ch = cfg.channels_at(res // 2) if res > 4 else 0
                self.res_block[str(res)] = SynthesisBlock(in_ch, cfg.channels_at(res), cfg.w_dim, res, to_rgb=False)
        self.to_mask = ToImage(cfg.channels_at(self.attach), 1, cfg.w_dim)

    def adaptation_modules(self) -> dict:
        return {"defect_map": self.defect_map, "res_block": self.res_block, "to_mask": self.to_mask}

    def trainable_parameters(self):
        return [p for m in self.adaptation_modules().values() for p in m.parameters()]

    def noise_shapes(self) -> dict:
        shapes = dict(self.backbone.noise_shapes())
        for res, blk in self.res_block.items():
            for n in blk.noise_names():
                shapes[f"res{res}.{n}"] = (int(res), int(res))
        return shapes

    def synthesize(self, w_object, w_defect, noise: Optional[dict] = None, defect_free: bool = False):
        """Run the manipulated synthesis; returns a dict of image, raw_mask, mask.

        ``mask`` is the binary mask upsampled to the output resolution.
        """
        noise = noise or {}
        state = {}
        mode = self.dcfg.feature_mode

        def hook(res, x_in, out):
            if res < self.attach:
                return out
            blk = self.res_block[str(res)]
            bn = {k.split(".", 1)[1]: v for k, v in noise.items() if k.startswith(f"res{res}.")}
            f_def = blk.features(x_in, w_defect, bn)
            if res == self.attach:
                state["raw_mask"] = to_mask(f_def, w_defect, self.to_mask, self.attach)
            return gate_features(out, f_def, upsample_mask(state["raw_mask"], res), mode)

        image, _ = self.backbone.synthesis(w_object, noise, hook)
        raw = state["raw_mask"]
        out = {"image": image, "raw_mask": raw,
               "mask": upsample_mask(binarize_mask(raw), self.cfg.resolution)}
        out["mask_st"] = straight_through(out["mask"], upsample_mask(raw, self.cfg.resolution))
        if defect_free:
            out["defect_free"] = self.backbone.synthesis(w_object, noise)[0]
        return out

    def forward(self, z_object, z_defect, noise=None, defect_free=False):
        w_obj = self.backbone.mapping(check_latent(z_object, self.cfg.z_dim, "z_object"))
        w_def = self.defect_map(check_latent(z_defect, self.cfg.z_dim, "z_defect"))
        out = self.synthesize(w_obj, w_def, noise, defect_free)
        out["w_object"], out["w_defect"] = w_obj, w_def
        return out


def map_defect_latent(z_defect, generator: DefectGenerator) -> torch.Tensor:
    return generator.defect_map(z_defect)


@torch.no_grad()
def generate_defect_image(generator: DefectGenerator, z_object, z_defect, noise=None):
    """Return (defect_image, binary mask at output resolution, defect_free_image)."""
    out = generator(z_object, z_defect, noise, defect_free=True)
    return out["image"], out["mask"], out["defect_free"]


# discriminators -------------------------------------------------------------------

class UnifiedDiscriminator(nn.Module):
    """Single discriminator on (image, mask) pairs.

    The image branch inherits the stage-1 discriminator; a reduced-width mask
    branch runs from full resolution down to the attach resolution, where its
    features are concatenated with the image features and projected back
    (identity on the image path, learned 1x1 conv on the mask path).
    """

    def __init__(self, image_disc: Discriminator, attach: int, width_divisor: int = 4):
        super().__init__()
        cfg = image_disc.cfg
        self.cfg, self.attach, self.in_channels = cfg, attach, 4
        self.image = image_disc
        ch = {r: math.ceil(cfg.disc_channels_at(r) / width_divisor) for r in cfg.resolutions}
        self.mask_from = Conv2dLayer(1, ch[cfg.resolution], 1)
        self.mask_blocks = nn.ModuleList(
            DiscriminatorBlock(ch[r], ch[r // 2], r) for r in reversed(cfg.resolutions) if r > attach)
        self.fuse = Conv2dLayer(ch[attach], image_disc.channels[attach], 1, bias=False, activation="linear")

    def forward(self, x):
        if x.shape[1] != 4:
            raise ConfigError(f"unified discriminator expects 4 channels, got {x.shape[1]}")
        img, mask = x[:, :3], x[:, 3:]
        m = self.mask_from(mask)
        for blk in self.mask_blocks:
            m = blk(m)
        h = img
        for res in self.image.block_resolutions:
            if res == self.attach:
                h = h + self.fuse(m)
            h = getattr(self.image, f"b{res}")(h)
        if self.attach == 4:
            h = h + self.fuse(m)
        return self.image.b4(h).squeeze(1)


def match_discriminate(image, mask_binary, discriminator: nn.Module) -> torch.Tensor:
    """Score (image, mask) pairs with the 4-channel matching discriminator."""
    if image.shape[1] != 3 or mask_binary.shape[1] != 1 or image.shape[-2:] != mask_binary.shape[-2:]:
        raise ConfigError(f"need 3-channel image and 1-channel mask of equal size, got "
                          f"{tuple(image.shape)} and {tuple(mask_binary.shape)}")
    return discriminator(torch.cat([image, mask_binary.to(image.dtype)], dim=1))


# stage-2 model container --------------------------------------------------------------

class DefectModel(nn.Module):
    """Everything stage 2 trains or reads: generator, D and D_match (or unified D)."""

    def __init__(self, backbone: Generator, disc: Discriminator, dcfg: DefectConfig, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(stream_seed(seed, "defect_init"))
            self.G = DefectGenerator(backbone, dcfg)
            torch.manual_seed(stream_seed(seed, "dmatch_init"))
            if dcfg.discriminator_mode == "dual":
                self.D = disc
                self.D_match = Discriminator(backbone.cfg, in_channels=4, width_divisor=dcfg.match_width_divisor)
            else:
                self.D = UnifiedDiscriminator(disc, self.G.attach, dcfg.match_width_divisor)
                self.D_match = None
        self.cfg, self.dcfg = backbone.cfg, dcfg

    def discriminators(self):
        return [d for d in (self.D, self.D_match) if d is not None]


def stage2_objective(model: DefectModel, real_images, real_masks, z_object, z_defect1, z_defect2,
                     noise: dict, *, loss: str = "wgan", r1_gamma: float = 10.0, drift: float = 0.0,
                     augment: Optional[Callable] = None) -> dict:
    """Evaluate every term of the stage-2 objective on one batch.

    The generated batch pairs each object code with two defect codes (same
    noise), giving 2 * len(z_object) samples. Returned keys:

    * ``stylegan`` = E[D(real)] - E[D(fake)] - R1, ``match`` likewise for
      D_match on (image, mask) pairs, ``ms`` the mode-seeking term and
      ``total = stylegan + match + ms_lambda * ms`` (G minimizes, the
      discriminators maximize).
    * ``loss_g`` / ``loss_d`` the per-player losses actually optimized.
    """
    dcfg = model.dcfg
    n = len(z_object)
    z_obj = torch.cat([z_object, z_object])
    z_def = torch.cat([z_defect1, z_defect2])
    noise2 = {k: torch.cat([v, v]) for k, v in noise.items()}
    out = model.G(z_obj, z_def, noise2)
    aug = augment or (lambda x: x)
    fake_pair = aug(torch.cat([out["image"], out["mask_st"]], dim=1))
    real_pair = aug(torch.cat([real_images, real_masks.to(real_images.dtype)], dim=1)).detach()
    terms = {}

    if dcfg.discriminator_mode == "dual":
        r1, real_scores = r1_penalty(lambda x: model.D(x), real_pair[:, :3], r1_gamma)
        fake_scores = model.D(fake_pair[:, :3])
        m_r1, m_real = r1_penalty(model.D_match, real_pair, r1_gamma)
        m_fake = model.D_match(fake_pair)
    else:
        r1, real_scores = r1_penalty(model.D, real_pair, r1_gamma)
        fake_scores = model.D(fake_pair)
        m_r1 = torch.zeros([], dtype=r1.dtype)
        m_real = m_fake = None

    adv_g, adv_d = adversarial_losses(real_scores, fake_scores, loss, drift)
    terms.update(adv_g=adv_g, adv_d=adv_d, r1=r1, real_scores=real_scores.detach())
    terms["stylegan"] = real_scores.mean() - fake_scores.mean() - r1
    if m_real is not None:
        match_g, match_d = adversarial_losses(m_real, m_fake, loss, drift)
        terms["match"] = m_real.mean() - m_fake.mean() - m_r1
        terms["match_real_scores"] = m_real.detach()
    else:
        match_g = match_d = torch.zeros([], dtype=r1.dtype)
        terms["match"] = torch.zeros([], dtype=r1.dtype)
    terms.update(match_g=match_g, match_d=match_d, match_r1=m_r1)

    if dcfg.ms_mode == "none":
        ms = torch.zeros([], dtype=r1.dtype)
    else:
        w_def = out["w_defect"].detach()
        if dcfg.ms_mode == "mask":
            a, b = out["raw_mask"][:n], out["raw_mask"][n:]
        else:
            a, b = out["image"][:n], out["image"][n:]
        ms = mode_seeking_loss(w_def[:n], w_def[n:], a, b, dcfg.ms_eps)
    terms["ms"] = ms
    terms["total"] = terms["stylegan"] + terms["match"] + dcfg.ms_lambda * ms
    terms["loss_g"] = adv_g + match_g + dcfg.ms_lambda * ms
    terms["loss_d"] = adv_d + r1 + match_d + m_r1
    terms["fake"] = out
    return terms


# training ---------------------------------------------------------------------------------

def defect_checkpoint(model: DefectModel, backbone_arrays: dict, train: TrainConfig, step: int,
                      extra: dict, opt_arrays: Optional[dict] = None) -> Checkpoint:
    arrays = dict(backbone_arrays)
    frozen = set(arrays)
    for prefix, mod in model.G.adaptation_modules().items():
        arrays.update(state_arrays(mod, prefix))
    if model.dcfg.discriminator_mode == "dual":
        arrays.update(state_arrays(model.D, "disc"))
        arrays.update(state_arrays(model.D_match, "d_match"))
    else:
        arrays.update(state_arrays(model.D.image, "disc"))
        unified = {k: v for k, v in model.D.state_dict().items() if not k.startswith("image.")}
        arrays.update({f"d_unified.{k}": v.numpy().astype("<f4") for k, v in unified.items()})
    arrays.update(opt_arrays or {})
    config = {"model": model.cfg.to_dict(), "defect": model.dcfg.to_dict(), "training": train.to_dict()}
    return Checkpoint(arrays=arrays, config=config, step=step, kind="defect", frozen=frozen, metadata=extra)


def load_defect_model(ckpt: Checkpoint) -> DefectModel:
    if ckpt.kind != "defect":
        raise DatasetError("checkpoint holds no stage-2 (defect) parameters")
    G, D, cfg = load_backbone(ckpt)
    dcfg = DefectConfig.from_dict(ckpt.config["defect"])
    model = DefectModel(G, D, dcfg)
    for prefix, mod in model.G.adaptation_modules().items():
        load_state(mod, ckpt.subset(prefix))
    if dcfg.discriminator_mode == "dual":
        load_state(model.D_match, ckpt.subset("d_match"))
    else:
        state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.subset("d_unified").items()}
        model.D.load_state_dict({**state, **{f"image.{k}": v for k, v in model.D.image.state_dict().items()}})
    return model


def backbone_generator_arrays(ckpt: Checkpoint) -> dict:
    return {k: v for k, v in ckpt.arrays.items() if k.startswith(("mapping.", "synthesis."))}


def train_defect_stage(backbone: Checkpoint, images, masks, dcfg: DefectConfig = None,
                       train: TrainConfig = None, resume: Optional[Checkpoint] = None,
                       callback: Optional[Callable[[dict], None]] = None) -> tuple[Checkpoint, list]:
    """Train the defect branch on (image, mask) pairs with the backbone frozen.

    D is finetuned from the backbone checkpoint, D_match is trained from
    scratch (``dual``), or one unified discriminator is trained whose image
    branch starts from D (``unified``).
    """
    dcfg = dcfg or DefectConfig()
    train = train or TrainConfig()
    if images is None or len(images) == 0:
        raise DatasetError("empty defect set")
    source = resume if resume is not None else backbone
    G, D, cfg = load_backbone(source)
    reals = check_images(images, 3, cfg.resolution, "defect images")
    real_masks = check_masks(masks, cfg.resolution, "defect masks")
    if len(real_masks) != len(reals):
        raise DatasetError("number of masks and defect images differ")

    if resume is not None:
        model = load_defect_model(resume)
        dcfg, start, meta = model.dcfg, resume.step, resume.metadata
    else:
        model = DefectModel(G, D, dcfg, train.seed)
        start, meta = 0, {}
    frozen_arrays = backbone_generator_arrays(source)
    ada = AdaptiveAugment(p=meta.get("augment_p", train.augment_p), target=train.ada_target,
                          pending=meta.get("augment_pending", ()))

    g_params = model.G.trainable_parameters()
    opt_g = make_adam(g_params, train)
    opt_d = make_adam([p for d in model.discriminators() for p in d.parameters()], train,
                      train.r1_interval if train.r1_gamma > 0 else 0)
    g_names = {p: n for n, p in model.G.named_parameters() if not n.startswith("backbone.")}
    d_names = {p: n for n, p in model.named_parameters() if n.startswith(("D.", "D_match."))}
    if resume is not None:
        restore_optimizer(opt_g, g_names, "G2", resume.arrays)
        restore_optimizer(opt_d, d_names, "D2", resume.arrays)

    noise_shapes = model.G.noise_shapes()
    half = max(1, train.batch_size // 2)
    history = []
    for step in range(start, start + train.steps):
        gen = torch_generator(train.seed, f"defect/{step}")
        p = ada.p

        def aug(x):
            return diff_augment(x, p, gen)

        # generator phase
        for d in model.discriminators():
            set_requires_grad(d, False)
        z_obj = torch.randn(half, cfg.z_dim, generator=gen)
        z1 = torch.randn(half, cfg.z_dim, generator=gen)
        z2 = torch.randn(half, cfg.z_dim, generator=gen)
        noise = make_noise(noise_shapes, half, gen)
        idx = torch.randint(len(reals), (2 * half,), generator=gen)
        terms = stage2_objective(model, reals[idx], real_masks[idx], z_obj, z1, z2, noise,
                                 loss=train.loss, r1_gamma=0.0, drift=train.wgan_drift, augment=aug)
        rec = {"step": step, "adv_g": terms["adv_g"], "match_g": terms["match_g"], "ms": terms["ms"]}
        ensure_finite(rec, f"stage-2 generator step {step}")
        opt_g.zero_grad(set_to_none=True)
        terms["loss_g"].backward()
        opt_g.step()
        for d in model.discriminators():
            set_requires_grad(d, True)

        # discriminator phase
        do_r1 = train.r1_gamma > 0 and step % train.r1_interval == 0
        with torch.no_grad():
            z_obj = torch.randn(half, cfg.z_dim, generator=gen)
            z1 = torch.randn(half, cfg.z_dim, generator=gen)
            z2 = torch.randn(half, cfg.z_dim, generator=gen)
            noise = make_noise(noise_shapes, half, gen)
        idx = torch.randint(len(reals), (2 * half,), generator=gen)
        model.G.requires_grad_(False)
        terms = stage2_objective(model, reals[idx], real_masks[idx], z_obj, z1, z2, noise,
                                 loss=train.loss, r1_gamma=train.r1_gamma if do_r1 else 0.0,
                                 drift=train.wgan_drift, augment=aug)
        for prm in g_params:
            prm.requires_grad_(True)
        loss_d = terms["adv_d"] + terms["match_d"]
        if do_r1:
            loss_d = loss_d + (terms["r1"] + terms["match_r1"]) * train.r1_interval
            rec.update(r1=terms["r1"], match_r1=terms["match_r1"])
        rec.update(adv_d=terms["adv_d"], match_d=terms["match_d"])
        ensure_finite(rec, f"stage-2 discriminator step {step}")
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        if train.ada:
            ada.update(terms["real_scores"])

        if step % train.log_every == 0 or step == start + train.steps - 1:
            check_params_finite(model, where=f"after stage-2 step {step}")
            row = {k: (float(v.detach()) if torch.is_tensor(v) else v) for k, v in rec.items()}
            row["augment_p"] = ada.p
            row["mask_area"] = float(terms["fake"]["mask"].mean())
            history.append(row)
            log.info("defect %s", row)
            if callback:
                callback(row)

    for name, arr in frozen_arrays.items():
        prefix, rest = name.split(".", 1)
        current = dict(getattr(model.G.backbone, prefix).state_dict())[rest].numpy()
        if not np.array_equal(current, arr):
            raise RuntimeError(f"frozen backbone parameter {name} changed")
    opt = {**optimizer_arrays(opt_g, g_names, "G2"), **optimizer_arrays(opt_d, d_names, "D2")}
    extra = {"augment_p": ada.p, "augment_pending": ada.pending, "backbone_step": int(backbone.step)}
    return defect_checkpoint(model, frozen_arrays, train, start + train.steps, extra, opt), history


# inference helpers -------------------------------------------------------------------------

@torch.no_grad()
def interpolate(generator: DefectGenerator, z_object_pair, z_defect_pair, steps: int = 5,
                mode: str = "both", noise: Optional[dict] = None) -> list[dict]:
    """Linearly interpolate the codes; returns one triplet dict per step.

    ``defect_only`` keeps the object code at the first element.
    """
    if steps < 2:
        raise ConfigError("steps must be >= 2")
    if mode not in ("both", "defect_only"):
        raise ConfigError(f"mode must be 'both' or 'defect_only', got {mode!r}")
    za = check_latent(z_object_pair[0], generator.cfg.z_dim)
    zb = check_latent(z_object_pair[1], generator.cfg.z_dim)
    da = check_latent(z_defect_pair[0], generator.cfg.z_dim)
    db = check_latent(z_defect_pair[1], generator.cfg.z_dim)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        t = float(t)
        z_obj = za if mode == "defect_only" else (1 - t) * za + t * zb
        z_def = (1 - t) * da + t * db
        image, mask, free = generate_defect_image(generator, z_obj, z_def, noise)
        out.append({"t": t, "z_object": z_obj, "z_defect": z_def, "image": image, "mask": mask,
                    "defect_free": free})
    return out
