"""Estimator-style wrappers around the two training stages."""

from __future__ import annotations

from typing import Optional

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import TrainConfig, load_backbone, train_backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .defect import DefectConfig, interpolate, load_defect_model, train_defect_stage
from .downstream import draw_codes, sample_defect_images
from .networks import SynthesisConfig
from .utils import ConfigError


class BackboneGAN(BaseEstimator):
    """Stage 1: style-based GAN trained on defect-free images.

    ``fit(X)`` takes (N, 3, H, W) images in [-1, 1]. After fitting,
    ``checkpoint_`` holds the trained weights and ``history_`` the log rows.
    """

    def __init__(self, model: Optional[SynthesisConfig] = None, training: Optional[TrainConfig] = None):
        self.model = model
        self.training = training

    def fit(self, X, y=None, resume: Optional[Checkpoint] = None):
        self.checkpoint_, self.history_ = train_backbone(X, self.model, self.training, resume=resume)
        self.generator_, self.discriminator_, self.config_ = load_backbone(self.checkpoint_)
        return self

    @torch.no_grad()
    def sample(self, n: int, seed: int = 0) -> torch.Tensor:
        """Draw ``n`` defect-free images."""
        check_is_fitted(self, "checkpoint_")
        z, _, noise = draw_codes(n, self.config_.z_dim, self.generator_.noise_shapes(), seed)
        return self.generator_(z, noise)

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return save_checkpoint(path, self.checkpoint_)

    @classmethod
    def load(cls, path) -> "BackboneGAN":
        ckpt = load_checkpoint(path)
        if ckpt.kind != "backbone":
            raise ConfigError(f"{path} is a {ckpt.kind} checkpoint, expected backbone")
        est = cls(SynthesisConfig(**ckpt.config["model"]), TrainConfig.from_dict(ckpt.config["training"]))
        est.checkpoint_, est.history_ = ckpt, []
        est.generator_, est.discriminator_, est.config_ = load_backbone(ckpt)
        return est


class DefectGAN(BaseEstimator):
    """Stage 2: defect branch learned on a few (image, mask) pairs over a frozen backbone."""

    def __init__(self, backbone=None, defect: Optional[DefectConfig] = None,
                 training: Optional[TrainConfig] = None):
        self.backbone = backbone
        self.defect = defect
        self.training = training

    def _backbone_checkpoint(self) -> Checkpoint:
        bb = self.backbone
        if isinstance(bb, BackboneGAN):
            check_is_fitted(bb, "checkpoint_")
            return bb.checkpoint_
        if isinstance(bb, Checkpoint):
            return bb
        if bb is None:
            raise ConfigError("DefectGAN needs a backbone")
        return load_checkpoint(bb)

    def fit(self, X, masks, resume: Optional[Checkpoint] = None):
        self.checkpoint_, self.history_ = train_defect_stage(
            self._backbone_checkpoint(), X, masks, self.defect, self.training, resume=resume)
        self.generator_ = load_defect_model(self.checkpoint_).G
        return self

    def generate(self, n: int, seed: int = 0, label: str = ""):
        """Return (defect images, binary masks, defect-free images) for ``n`` fresh code pairs."""
        check_is_fitted(self, "checkpoint_")
        return sample_defect_images(self.generator_, n, seed, label)

    def interpolate(self, z_object_pair, z_defect_pair, steps: int = 5, mode: str = "both", noise=None):
        check_is_fitted(self, "checkpoint_")
        return interpolate(self.generator_, z_object_pair, z_defect_pair, steps, mode, noise)

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return save_checkpoint(path, self.checkpoint_)

    @classmethod
    def load(cls, path) -> "DefectGAN":
        ckpt = load_checkpoint(path)
        if ckpt.kind != "defect":
            raise ConfigError(f"{path} is a {ckpt.kind} checkpoint, expected defect")
        est = cls(defect=DefectConfig.from_dict(ckpt.config["defect"]),
                  training=TrainConfig.from_dict(ckpt.config["training"]))
        est.checkpoint_, est.history_ = ckpt, []
        est.generator_ = load_defect_model(ckpt).G
        return est
