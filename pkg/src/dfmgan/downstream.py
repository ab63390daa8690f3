"""Defect classification with generated training data."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import confusion_matrix
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .backbone import TrainConfig
from .checkpoint import Checkpoint, load_checkpoint
from .data import partition_for_classification, stack_samples
from .defect import DefectConfig, DefectGenerator, load_defect_model, train_defect_stage
from .networks import make_noise
from .stats import welch_t_test
from .utils import ConfigError, DatasetError, check_images, stream_seed, torch_generator

log = logging.getLogger(__name__)

ARCHITECTURES = ("tiny_cnn", "resnet34")
DEFAULT_LR = {"tiny_cnn": 1e-3, "resnet34": 1e-5}


class TinyCNN(nn.Module):
    def __init__(self, n_classes: int, widths=(16, 32, 64)):
        super().__init__()
        layers, c = [], 3
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, n_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=[2, 3]))


def build_network(architecture: str, n_classes: int) -> nn.Module:
    if architecture == "tiny_cnn":
        return TinyCNN(n_classes)
    if architecture == "resnet34":
        from torchvision.models import resnet34
        return resnet34(weights=None, num_classes=n_classes)
    raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {architecture!r}")


class DefectClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier trained with cross-entropy and Adam.

    ``learning_rate=None`` picks 1e-3 for ``tiny_cnn`` and 1e-5 for
    ``resnet34``. Inputs are (N, 3, H, W) images in [-1, 1]; no further
    normalization or augmentation is applied.
    """

    def __init__(self, architecture: str = "tiny_cnn", learning_rate: Optional[float] = None,
                 batch_size: int = 64, epochs: int = 50, random_state: int = 0):
        self.architecture = architecture
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        x = check_images(X)
        y = np.asarray(y)
        if len(x) != len(y):
            raise ConfigError("X and y have different lengths")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ConfigError("classifier needs at least two classes")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        targets = torch.from_numpy(np.searchsorted(self.classes_, y))
        lr = self.learning_rate or DEFAULT_LR[self.architecture]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(stream_seed(self.random_state, "classifier_init"))
            self.module_ = build_network(self.architecture, len(self.classes_))
        opt = torch.optim.Adam(self.module_.parameters(), lr=lr)
        self.loss_curve_ = []
        self.module_.train()
        for epoch in range(self.epochs):
            order = torch.randperm(len(x), generator=torch_generator(self.random_state, f"classifier/{epoch}"))
            total = 0.0
            for k in range(0, len(x), self.batch_size):
                idx = order[k:k + self.batch_size]
                loss = F.cross_entropy(self.module_(x[idx]), targets[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(x))
        self.module_.eval()
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "module_")
        x = check_images(X)
        with torch.no_grad():
            return torch.cat([self.module_(x[k:k + 256]) for k in range(0, len(x), 256)]).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]


@dataclass
class ClassifierConfig:
    architecture: str = "tiny_cnn"
    lr: Optional[float] = None
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if (self.lr is not None and self.lr <= 0) or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("classifier hyperparameters must be positive")

    def estimator(self) -> DefectClassifier:
        return DefectClassifier(self.architecture, self.lr, self.batch_size, self.epochs, self.seed)


def train_classifier(images, labels, config: ClassifierConfig = None) -> DefectClassifier:
    return (config or ClassifierConfig()).estimator().fit(images, labels)


def evaluate_classifier(clf: DefectClassifier, images, labels) -> dict:
    """Top-1 accuracy and confusion matrix (rows: true class, sorted labels)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DatasetError("empty test set")
    unknown = sorted(set(labels) - set(clf.classes_))
    if unknown:
        warnings.warn(f"test labels {unknown} were not seen in training; counted as wrong", stacklevel=2)
    pred = clf.predict(images)
    classes = sorted(set(clf.classes_) | set(labels))
    cm = confusion_matrix(labels, pred, labels=classes)
    return {"accuracy": float(np.mean(pred == labels)), "classes": [str(c) for c in classes],
            "confusion": cm.tolist(), "n": int(len(labels))}


def draw_codes(n: int, z_dim: int, noise_shapes: dict, seed: int, label: str = "z_sample"):
    """Draw (z_object, z_defect, noise) for ``n`` samples from one labeled stream.

    Everything is drawn up front, so sample ``i`` does not depend on the
    batch size used later. Noise keys are drawn in sorted order, and backbone
    keys sort before the residual-block keys, so the backbone part of the
    noise matches what a stage-1 checkpoint draws for the same seed.
    """
    if n < 0:
        raise ConfigError("n must be >= 0")
    gen = torch_generator(seed, label)
    z_obj = torch.randn(n, z_dim, generator=gen)
    z_def = torch.randn(n, z_dim, generator=gen)
    return z_obj, z_def, make_noise(noise_shapes, n, gen)


@torch.no_grad()
def sample_defect_images(generator: DefectGenerator, n: int, seed: int, label: str = "",
                         batch_size: int = 64):
    """Draw ``n`` (image, binary mask, defect-free image) triplets with fresh codes."""
    z_obj, z_def, noise = draw_codes(n, generator.cfg.z_dim, generator.noise_shapes(), seed,
                                     f"z_sample/{label}" if label else "z_sample")
    imgs, masks, free = [], [], []
    for k in range(0, n, batch_size):
        sl = slice(k, k + batch_size)
        out = generator(z_obj[sl], z_def[sl], {key: v[sl] for key, v in noise.items()}, defect_free=True)
        imgs.append(out["image"])
        masks.append(out["mask"])
        free.append(out["defect_free"])
    res = generator.cfg.resolution
    if not imgs:
        return torch.zeros(0, 3, res, res), torch.zeros(0, 1, res, res), torch.zeros(0, 3, res, res)
    return torch.cat(imgs), torch.cat(masks), torch.cat(free)


def build_augmented_trainset(generators: dict, n_per_category: int = 200, seed: int = 0):
    """Generate ``n_per_category`` defect images per label.

    ``generators`` maps a label to a :class:`DefectGenerator`, a stage-2
    :class:`Checkpoint` or a checkpoint path. Returns (images, labels).
    """
    images, labels = [], []
    for label in sorted(generators):
        g = generators[label]
        if not isinstance(g, DefectGenerator):
            ckpt = g if isinstance(g, Checkpoint) else load_checkpoint(g)
            g = load_defect_model(ckpt).G
        imgs, _, _ = sample_defect_images(g, n_per_category, seed, label)
        images.append(imgs)
        labels += [label] * n_per_category
    if not images:
        raise ConfigError("no generators given")
    return torch.cat(images), labels


def classification_benchmark(samples_by_category: dict, backbone: Checkpoint,
                             partition_seeds=(1, 2, 3), n_per_category: int = 200,
                             defect_cfg: DefectConfig = None, defect_train: TrainConfig = None,
                             classifier: ClassifierConfig = None, include_base: bool = False,
                             generators: Optional[dict] = None, seed: int = 0) -> dict:
    """Partition -> stage-2 per category -> generate -> train -> evaluate, per partition.

    For each partition seed the defect images are split 1/3 base / 2/3 test.
    A stage-2 model is trained per category on its base set (unless
    ``generators[partition_name][category]`` supplies one), ``n_per_category``
    images are generated per category, and a classifier trained on them is
    compared with one trained on the base sets alone. With ``include_base``
    the augmented classifier sees the generated images plus the base sets,
    and a generated-only classifier is reported as well. All classifiers are
    evaluated on the real test images only.
    """
    if len(samples_by_category) < 2:
        raise ConfigError("classification needs at least two defect categories")
    classifier = classifier or ClassifierConfig(seed=seed)
    report = {"partitions": [], "n_per_category": n_per_category, "include_base": include_base,
              "classifier": asdict(classifier)}
    for k, pseed in enumerate(partition_seeds, start=1):
        name = f"P{k}"
        base, test = partition_for_classification(samples_by_category, pseed)
        test_x, _, test_y = stack_samples(test)
        gens = {}
        for cat in sorted(base):
            supplied = (generators or {}).get(name, {}).get(cat) if generators else None
            if supplied is not None:
                gens[cat] = supplied
                continue
            bx, bm, _ = stack_samples(base[cat])
            ckpt, _ = train_defect_stage(backbone, bx, bm, defect_cfg, defect_train)
            gens[cat] = load_defect_model(ckpt).G
        gen_x, gen_y = build_augmented_trainset(gens, n_per_category, seed=stream_seed(seed, name))
        base_x, _, base_y = stack_samples([s for c in sorted(base) for s in base[c]])
        row = {"partition": name, "partition_seed": pseed, "n_test": len(test_y)}
        if include_base:
            row["generated_only"] = evaluate_classifier(train_classifier(gen_x, gen_y, classifier), test_x, test_y)
            gen_x, gen_y = torch.cat([gen_x, base_x]), gen_y + base_y
        row["augmented"] = evaluate_classifier(train_classifier(gen_x, gen_y, classifier), test_x, test_y)
        row["base_only"] = evaluate_classifier(train_classifier(base_x, base_y, classifier), test_x, test_y)
        log.info("%s: augmented %.3f base-only %.3f", name, row["augmented"]["accuracy"],
                 row["base_only"]["accuracy"])
        report["partitions"].append(row)
    accs = [r["augmented"]["accuracy"] for r in report["partitions"]]
    base_accs = [r["base_only"]["accuracy"] for r in report["partitions"]]
    report["mean_accuracy"] = float(np.mean(accs))
    report["mean_base_only_accuracy"] = float(np.mean(base_accs))
    if include_base:
        report["mean_generated_only_accuracy"] = float(np.mean(
            [r["generated_only"]["accuracy"] for r in report["partitions"]]))
    return report


def compare_reports(report: dict, other: dict) -> dict:
    """Welch's t-test on per-partition augmented accuracies of two reports."""
    a = [r["augmented"]["accuracy"] for r in report["partitions"]]
    b = [r["augmented"]["accuracy"] for r in other["partitions"]]
    t, df, p = welch_t_test(a, b)
    return {"t": t, "df": df, "p": p}
