"""Few-shot defect image generation with a frozen style-based backbone."""

__version__ = "0.1.0"

from .backbone import TrainConfig, train_backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetSpec, generate_synthetic, load_dataset
from .defect import DefectConfig, DefectGenerator, gate_features, generate_defect_image, mode_seeking_loss, train_defect_stage
from .downstream import ClassifierConfig, DefectClassifier, build_augmented_trainset, evaluate_classifier, train_classifier
from .estimators import BackboneGAN, DefectGAN
from .metrics import RandomConvFeatures, clustered_lpips, kid, perceptual_distance
from .networks import Discriminator, Generator, SynthesisConfig
from .stats import welch_t_test
from .utils import ConfigError, DatasetError, NumericalError

__all__ = [
    "BackboneGAN", "Checkpoint", "ClassifierConfig", "ConfigError", "DatasetError", "DatasetSpec",
    "DefectClassifier", "DefectConfig", "DefectGAN", "DefectGenerator", "Discriminator", "Generator",
    "NumericalError", "RandomConvFeatures", "RunConfig", "SynthesisConfig", "TrainConfig",
    "build_augmented_trainset", "clustered_lpips", "evaluate_classifier", "gate_features",
    "generate_defect_image", "generate_synthetic", "kid", "load_checkpoint", "load_dataset",
    "mode_seeking_loss", "perceptual_distance", "save_checkpoint", "train_backbone", "train_classifier",
    "train_defect_stage", "welch_t_test",
]
