"""Generation metrics: KID, perceptual distance, clustered LPIPS, mask statistics."""

from __future__ import annotations

import hashlib
import itertools
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .utils import ConfigError, check_images, numpy_rng


@dataclass
class FeatureEmbedding:
    vectors: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ConfigError("embedding vectors must be an (n, d) matrix")
        if not np.isfinite(self.vectors).all():
            raise ConfigError("embedding vectors must be finite")

    def __len__(self):
        return len(self.vectors)


class RandomConvFeatures(BaseEstimator, TransformerMixin):
    """Training-free feature extractor: three strided 3x3 convs with fixed seeded weights.

    ``transform`` returns globally average-pooled ``width[-1]``-dim embeddings;
    ``feature_maps`` exposes the per-layer activations used by
    :func:`perceptual_distance`. Stands in for Inception / LPIPS networks.
    """

    def __init__(self, widths=(16, 32, 64), seed: int = 0):
        self.widths = widths
        self.seed = seed

    @property
    def extractor_id(self) -> str:
        return f"random-conv-{'-'.join(map(str, self.widths))}-seed{self.seed}"

    def fit(self, X=None, y=None):
        rng = numpy_rng(self.seed, "extractor")
        self.weights_, self.biases_ = [], []
        c_in = 3
        for c_out in self.widths:
            w = rng.normal(size=(c_out, c_in, 3, 3)) * math.sqrt(2.0 / (c_in * 9))
            self.weights_.append(torch.from_numpy(w))
            self.biases_.append(torch.from_numpy(rng.normal(size=c_out) * 0.1))
            c_in = c_out
        return self

    def _ensure_fitted(self):
        if not hasattr(self, "weights_"):
            self.fit()

    def feature_maps(self, images) -> list[torch.Tensor]:
        self._ensure_fitted()
        x = check_images(images).to(torch.float64)
        maps = []
        with torch.no_grad():
            for w, b in zip(self.weights_, self.biases_):
                x = F.relu(F.conv2d(x, w, b, stride=2, padding=1))
                maps.append(x)
        return maps

    def transform(self, X) -> np.ndarray:
        return self.feature_maps(X)[-1].mean(dim=[2, 3]).numpy()

    def embed(self, images, batch_size: int = 256) -> FeatureEmbedding:
        x = check_images(images)
        parts = [self.transform(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        vecs = np.concatenate(parts) if parts else np.zeros((0, self.widths[-1]))
        return FeatureEmbedding(vecs, self.extractor_id)


_EXTRACTORS: dict[str, Callable[[], RandomConvFeatures]] = {
    "random-conv": lambda: RandomConvFeatures(),
}


def register_extractor(name: str, factory: Callable) -> None:
    """Register a factory returning an object with ``embed`` and ``feature_maps``."""
    _EXTRACTORS[name] = factory


def get_extractor(name: str = "random-conv"):
    try:
        return _EXTRACTORS[name]()
    except KeyError:
        raise ConfigError(f"unknown extractor {name!r}; registered: {sorted(_EXTRACTORS)}") from None


def extract_features(images, extractor="random-conv") -> FeatureEmbedding:
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    return extractor.embed(images)


# KID --------------------------------------------------------------------------

def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (diagonals excluded in-set)."""
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def _canonical_key(a: np.ndarray) -> tuple:
    return (len(a), hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest())


def kid(x, y, n_subsets: int = 10, subset_size: Optional[int] = None, seed: int = 0):
    """Kernel inception distance: (mean, std) of unbiased MMD^2 over random subsets.

    Subsets are drawn without replacement; the draw is keyed to the two sets
    in a canonical order so ``kid(x, y) == kid(y, x)``.
    """
    x = x.vectors if isinstance(x, FeatureEmbedding) else np.asarray(x, dtype=np.float64)
    y = y.vectors if isinstance(y, FeatureEmbedding) else np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ConfigError("KID needs at least 2 samples in each set")
    if x.shape[1] != y.shape[1]:
        raise ConfigError("feature dimensions differ")
    m = subset_size or min(len(x), len(y), 1000)
    m = min(m, len(x), len(y))
    if m < 2:
        raise ConfigError("subset_size must be >= 2")
    first, second = (x, y) if _canonical_key(x) <= _canonical_key(y) else (y, x)
    rng = numpy_rng(seed, "kid")
    values = []
    for _ in range(n_subsets):
        a = first[rng.choice(len(first), m, replace=False)]
        b = second[rng.choice(len(second), m, replace=False)]
        values.append(mmd2_unbiased(a, b))
    return float(np.mean(values)), float(np.std(values))


# perceptual distance ------------------------------------------------------------

def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.square().sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(a, b, extractor=None) -> np.ndarray:
    """LPIPS-style distance between image batches ``a`` and ``b`` (paired).

    Per layer: channel-normalise each feature map, take the squared L2
    difference per pixel, average spatially; then average over layers.
    Returns one value per pair (a scalar for single images).
    """
    extractor = extractor or get_extractor()
    ta, tb = check_images(a), check_images(b)
    if ta.shape != tb.shape:
        raise ConfigError(f"image shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    fa, fb = extractor.feature_maps(ta), extractor.feature_maps(tb)
    per_layer = [(_unit_normalize(x) - _unit_normalize(y)).square().sum(dim=1).mean(dim=[1, 2])
                 for x, y in zip(fa, fb)]
    d = torch.stack(per_layer).mean(dim=0).numpy()
    return d if np.ndim(a) == 4 else d[0]


def pairwise_perceptual(a, b, extractor=None) -> np.ndarray:
    """Distance matrix ``D[i, j] = perceptual_distance(a[i], b[j])``."""
    extractor = extractor or get_extractor()
    fa = [_unit_normalize(f) for f in extractor.feature_maps(a)]
    fb = [_unit_normalize(f) for f in extractor.feature_maps(b)]
    total = np.zeros((len(fa[0]), len(fb[0])))
    for x, y in zip(fa, fb):
        hw = x.shape[2] * x.shape[3]
        xf, yf = x.flatten(1), y.flatten(1)
        sq = (xf.square().sum(1)[:, None] + yf.square().sum(1)[None, :] - 2 * xf @ yf.T) / hw
        total += sq.clamp_min(0).numpy()
    return total / len(fa)


def _pair_distances(feats: list[torch.Tensor], pairs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = []
    for k in range(0, len(pairs), chunk):
        i = torch.from_numpy(pairs[k:k + chunk, 0])
        j = torch.from_numpy(pairs[k:k + chunk, 1])
        per_layer = [(f[i] - f[j]).square().sum(dim=1).mean(dim=[1, 2]) for f in feats]
        out.append(torch.stack(per_layer).mean(dim=0).numpy())
    return np.concatenate(out)


def clustered_lpips(generated, dataset, extractor=None, distance: Optional[Callable] = None):
    """Diversity score: mean within-cluster pairwise distance, averaged over clusters.

    Each generated sample joins the cluster of its nearest dataset sample
    (ties -> lowest dataset index). Clusters with fewer than two members are
    skipped. ``distance(i_or_item, j_or_item)`` may override the perceptual
    distance; it is then called as ``distance(gen, data)`` and
    ``distance(gen, gen)`` on the raw list items.
    Returns ``(score, n_clusters_used)``.
    """
    n_gen, n_data = len(generated), len(dataset)
    if n_gen == 0 or n_data == 0:
        raise ConfigError("clustered LPIPS needs non-empty generated and dataset sets")
    if distance is None:
        extractor = extractor or get_extractor()
        to_data = pairwise_perceptual(generated, dataset, extractor)
        gen_feats = [_unit_normalize(f) for f in extractor.feature_maps(generated)]
    else:
        to_data = np.array([[distance(g, d) for d in dataset] for g in generated], dtype=np.float64)
    assign = np.argmin(to_data, axis=1)
    scores = []
    for c in range(n_data):
        members = np.flatnonzero(assign == c)
        if len(members) < 2:
            continue
        pairs = np.array(list(itertools.combinations(members, 2)))
        if distance is None:
            vals = _pair_distances(gen_feats, pairs)
        else:
            vals = [distance(generated[i], generated[j]) for i, j in pairs]
        scores.append(float(np.mean(vals)))
    if not scores:
        warnings.warn("no cluster has two or more members; clustered LPIPS set to 0", stacklevel=2)
        return 0.0, 0
    return float(np.mean(scores)), len(scores)


# mask statistics ------------------------------------------------------------------

def mask_area_fractions(masks) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    if len(m) == 0:
        return np.zeros(0)
    return m.reshape(len(m), -1).mean(axis=1)


def mask_area_stats(masks) -> dict:
    f = mask_area_fractions(masks)
    if len(f) == 0:
        return {"mean": 0.0, "min": 0.0, "max": 0.0, "count": 0}
    return {"mean": float(f.mean()), "min": float(f.min()), "max": float(f.max()), "count": int(len(f))}


@dataclass
class MetricReport:
    kid: float
    kid_std: float
    clustered_lpips: float
    n_clusters_used: int
    mask_area_stats: Optional[dict] = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kid_x1e3"] = self.kid * 1e3
        return d
