"""Synthetic defect datasets and the MVTec AD directory layout.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png
    <root>/<category>/ground_truth/<defect>/*_mask.png
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .utils import ConfigError, DatasetError, is_power_of_two, numpy_rng

log = logging.getLogger(__name__)

DEFECT_KINDS = ("hole", "scratch", "print")
META_FILE = "synthetic_meta.json"


@dataclass
class DatasetSpec:
    category: str = "nut"
    n_good: int = 64
    defects: dict = field(default_factory=lambda: {"hole": 10})
    resolution: int = 32
    seed: int = 0
    n_test_good: int = 0
    area_range: tuple = (0.02, 0.3)

    def __post_init__(self):
        if self.n_good < 0 or self.n_test_good < 0 or any(n < 0 for n in self.defects.values()):
            raise ConfigError("sample counts must be >= 0")
        if not is_power_of_two(self.resolution) or self.resolution < 8:
            raise ConfigError(f"resolution must be a power of two >= 8, got {self.resolution}")
        for name in self.defects:
            if defect_kind(name) is None:
                raise ConfigError(f"unknown defect category {name!r}; expected one of {DEFECT_KINDS}")
        self.area_range = tuple(self.area_range)

    @classmethod
    def from_json(cls, path) -> "DatasetSpec":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read dataset spec {path}: {exc}") from exc
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


def defect_kind(name: str) -> Optional[str]:
    """Defect names map to a rendering kind by prefix ("hole", "hole_large", ...)."""
    for kind in DEFECT_KINDS:
        if name == kind or name.startswith(kind + "_"):
            return kind
    return None


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [-1, 1]
    mask: Optional[np.ndarray]  # H x W in {0, 1}
    label: str
    path: str = ""


# rendering -------------------------------------------------------------------

def object_silhouette(params: dict, size: int) -> np.ndarray:
    """Boolean silhouette of a (possibly lobed) rotated ellipse at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - params["cx"] * size, yy - params["cy"] * size
    c, s = math.cos(params["angle"]), math.sin(params["angle"])
    u = (c * dx + s * dy) / (params["a"] * size)
    v = (-s * dx + c * dy) / (params["b"] * size)
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    return rho <= 1.0 + params["lobe_amp"] * np.sin(params["lobes"] * phi + params["lobe_phase"])


def _smooth_noise(rng, size, cells, channels=1):
    coarse = rng.normal(size=(channels, cells, cells))
    return np.stack([ndimage.zoom(c, size / cells, order=1, mode="nearest")[:size, :size] for c in coarse])


def render_object(rng, size: int):
    params = {
        "cx": 0.5 + rng.uniform(-0.05, 0.05),
        "cy": 0.5 + rng.uniform(-0.05, 0.05),
        "a": rng.uniform(0.36, 0.43),
        "angle": rng.uniform(0, math.pi),
        "lobes": int(rng.integers(3, 7)),
        "lobe_amp": float(rng.choice([0.0, rng.uniform(0.03, 0.08)])),
        "lobe_phase": rng.uniform(0, 2 * math.pi),
    }
    params["b"] = params["a"] * rng.uniform(0.78, 1.0)
    sil = object_silhouette(params, size)

    bg = np.array([-0.85, -0.85, -0.8])[:, None, None] + 0.03 * rng.normal(size=(3, size, size))
    base = np.array([0.35, -0.05, -0.45]) + rng.uniform(-0.12, 0.12, size=3)
    tex = base[:, None, None] + 0.15 * _smooth_noise(rng, size, 4) + 0.04 * rng.normal(size=(3, size, size))
    dist = ndimage.distance_transform_edt(sil)
    shade = np.clip(dist / (0.15 * size), 0, 1)
    tex = tex * (0.6 + 0.4 * shade) - 0.2 * (1 - shade)
    img = np.where(sil[None], tex, bg)
    return np.clip(img, -1, 1), sil, params


def _interior(sil: np.ndarray) -> np.ndarray:
    return ndimage.binary_erosion(sil, structure=np.ones((3, 3), bool), border_value=0)


def render_defect(rng, img, sil, kind: str, area_range=(0.02, 0.3)):
    """Paint one defect strictly inside the object; returns (image, mask, info)."""
    size = img.shape[-1]
    inner = _interior(sil)
    ys, xs = np.nonzero(inner)
    if len(ys) == 0:
        raise DatasetError("object too small to host a defect")
    target = rng.uniform(*area_range) * size * size
    target = min(target, 0.6 * inner.sum())
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    best = None
    for _ in range(30):
        k = rng.integers(len(ys))
        cy, cx = ys[k] + 0.5, xs[k] + 0.5
        if kind == "hole":
            r = math.sqrt(target / math.pi)
            shape = np.hypot(yy - cy, xx - cx) <= r
        elif kind == "print":
            r = math.sqrt(target / math.pi)
            ang = rng.uniform(0, math.pi)
            ratio = rng.uniform(0.6, 1.0)
            c, s = math.cos(ang), math.sin(ang)
            u = (c * (xx - cx) + s * (yy - cy)) / (r / math.sqrt(ratio))
            v = (-s * (xx - cx) + c * (yy - cy)) / (r * math.sqrt(ratio))
            shape = np.hypot(u, v) <= 1.0
        else:
            pts = [(cy, cx)]
            seg = rng.uniform(0.15, 0.3) * size
            heading = rng.uniform(0, 2 * math.pi)
            for _ in range(2):
                heading += rng.uniform(-0.8, 0.8)
                pts.append((pts[-1][0] + seg * math.sin(heading), pts[-1][1] + seg * math.cos(heading)))
            length = 2 * seg
            width = max(1.0, target / length)
            d = np.full((size, size), np.inf)
            for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
                d = np.minimum(d, _segment_distance(yy, xx, y0, x0, y1, x1))
            shape = d <= width / 2
        mask = shape & inner
        area = mask.sum()
        if best is None or abs(area - target) < abs(best[1] - target):
            best = (mask, area)
        if area >= 0.7 * target:
            break
    mask = best[0]
    if mask.sum() == 0:
        mask = np.zeros_like(inner)
        mask[ys[0], xs[0]] = True

    out = img.copy()
    noise = 0.05 * rng.normal(size=img.shape)
    if kind == "hole":
        depth = ndimage.distance_transform_edt(mask)
        color = np.array([-0.75, -0.8, -0.85])[:, None, None] - 0.1 * np.clip(depth / 3, 0, 1)[None]
    elif kind == "print":
        color = (np.array([0.2, -0.6, 0.7]) + rng.uniform(-0.15, 0.15, 3))[:, None, None] + 0 * img
    else:
        color = np.array([0.85, 0.8, 0.7])[:, None, None] + 0 * img
    out = np.where(mask[None], np.clip(color + noise, -1, 1), out)
    return out, mask.astype(np.uint8), {"kind": kind, "area": int(mask.sum())}


def _segment_distance(yy, xx, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-12)
    t = np.clip(t, 0, 1)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


# image io --------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] CHW float -> HWC uint8 (clamping only happens here)."""
    x = np.asarray(image, dtype=np.float64)
    u = np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return u.transpose(1, 2, 0) if u.ndim == 3 else u


def from_uint8(array: np.ndarray) -> np.ndarray:
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 3:
        a = a.transpose(2, 0, 1)
    return a / np.float32(127.5) - np.float32(1.0)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, optimize=False)


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, optimize=False)


def read_png(path, resolution: Optional[int] = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return from_uint8(np.asarray(im))
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def read_mask(path, resolution: Optional[int] = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.NEAREST)
            a = np.asarray(im, dtype=np.float32)
    except OSError as exc:
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc
    peak = a.max()
    return (a > 0.5 * peak).astype(np.float32) if peak > 0 else np.zeros_like(a)


# dataset generation ----------------------------------------------------------

def generate_synthetic(spec: DatasetSpec, root) -> Path:
    """Render ``spec`` into the MVTec layout under ``root``; deterministic per seed."""
    root = Path(root)
    base = root / spec.category
    try:
        (base / "train" / "good").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc
    size = spec.resolution
    meta = {"spec": asdict(spec), "objects": {}}

    def render(split, label, i):
        rng = numpy_rng(spec.seed, f"data/{spec.category}/{split}/{label}/{i}")
        img, sil, params = render_object(rng, size)
        return rng, img, sil, params

    for i in range(spec.n_good):
        _, img, _, params = render("train", "good", i)
        save_png(base / "train" / "good" / f"{i:03d}.png", img)
        meta["objects"][f"train/good/{i:03d}.png"] = params
    if spec.n_test_good:
        (base / "test" / "good").mkdir(parents=True, exist_ok=True)
        for i in range(spec.n_test_good):
            _, img, _, params = render("test", "good", i)
            save_png(base / "test" / "good" / f"{i:03d}.png", img)
            meta["objects"][f"test/good/{i:03d}.png"] = params
    for name, count in sorted(spec.defects.items()):
        (base / "test" / name).mkdir(parents=True, exist_ok=True)
        (base / "ground_truth" / name).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rng, img, sil, params = render("test", name, i)
            img, mask, info = render_defect(rng, img, sil, defect_kind(name), spec.area_range)
            save_png(base / "test" / name / f"{i:03d}.png", img)
            save_mask_png(base / "ground_truth" / name / f"{i:03d}_mask.png", mask)
            meta["objects"][f"test/{name}/{i:03d}.png"] = {**params, **info}
    (base / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    log.info("wrote synthetic dataset %s: %d good, %s", base, spec.n_good, spec.defects)
    return base


# loading ---------------------------------------------------------------------

def _mask_path(root: Path, category: str, defect: str, stem: str) -> Path:
    gt = root / category / "ground_truth" / defect
    for cand in (gt / f"{stem}_mask.png", gt / f"{stem}.png"):
        if cand.exists():
            return cand
    raise DatasetError(f"missing mask for defect sample {category}/test/{defect}/{stem}.png")


def select_subset(n: int, k: Optional[int], seed: int, label: str = "subset") -> list[int]:
    if k is None or k >= n:
        return list(range(n))
    if k < 1:
        raise ConfigError("subset_k must be >= 1")
    return sorted(numpy_rng(seed, label).choice(n, size=k, replace=False).tolist())


def load_dataset(root, category: str, split: str = "train", defect_category: Optional[str] = None,
                 subset_k: Optional[int] = None, resolution: Optional[int] = None,
                 seed: int = 0) -> list[Sample]:
    """Load samples from an MVTec-layout directory.

    ``split="train"`` reads defect-free images. ``split="test"`` reads the
    given ``defect_category`` (or every test subdirectory when None). Images
    are resized bilinearly, masks by nearest neighbour and thresholded.
    ``subset_k`` keeps k samples chosen by a seeded RNG, in original order.
    """
    root = Path(root)
    base = root / category
    if not base.is_dir():
        raise DatasetError(f"no category directory {base}")
    if split == "train":
        groups = [("good", base / "train" / "good")]
    elif split == "test":
        test = base / "test"
        if defect_category is not None:
            groups = [(defect_category, test / defect_category)]
        else:
            groups = [(d.name, d) for d in sorted(test.iterdir()) if d.is_dir()] if test.is_dir() else []
    else:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")

    samples = []
    for label, d in groups:
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
        for p in sorted(d.glob("*.png")):
            img = read_png(p, resolution)
            mask = None
            if label != "good":
                mask = read_mask(_mask_path(root, category, label, p.stem), resolution or img.shape[-1])
            samples.append(Sample(img, mask, label, str(p)))
    keep = select_subset(len(samples), subset_k, seed, f"subset/{category}/{split}/{defect_category}")
    return [samples[i] for i in keep]


def stack_samples(samples: list[Sample]):
    """(images, masks or None, labels) as tensors / list."""
    if not samples:
        raise DatasetError("no samples")
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    masks = None
    if all(s.mask is not None for s in samples):
        masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    return images, masks, [s.label for s in samples]


def partition_for_classification(samples_by_category: dict, seed: int):
    """Split each category 1/3 base (floor, at least 1) / 2/3 test, seeded.

    Returns ``(base_sets, test_set)`` where ``base_sets`` maps category to a
    list of samples and ``test_set`` is the pooled remainder.
    """
    base, test = {}, []
    for cat in sorted(samples_by_category):
        items = list(samples_by_category[cat])
        if not items:
            raise DatasetError(f"defect category {cat!r} has no images")
        n_base = max(1, len(items) // 3)
        if len(items) == 1:
            warnings.warn(f"category {cat!r} has a single image: empty test share", stacklevel=2)
        order = numpy_rng(seed, f"partition/{cat}").permutation(len(items))
        base[cat] = [items[i] for i in sorted(order[:n_base])]
        test.extend(items[i] for i in sorted(order[n_base:]))
    return base, test
