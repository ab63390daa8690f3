import filecmp
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dfmgan.data import (DatasetSpec, Sample, from_uint8, generate_synthetic, load_dataset,
                         partition_for_classification, read_png, save_png, select_subset, stack_samples,
                         to_uint8)
from dfmgan.utils import ConfigError, DatasetError


def silhouette_oracle(p, size):
    """Point-in-shape test per pixel centre, written out longhand."""
    out = np.zeros((size, size), bool)
    for i in range(size):
        for j in range(size):
            dx = (j + 0.5) - p["cx"] * size
            dy = (i + 0.5) - p["cy"] * size
            u = (math.cos(p["angle"]) * dx + math.sin(p["angle"]) * dy) / (p["a"] * size)
            v = (-math.sin(p["angle"]) * dx + math.cos(p["angle"]) * dy) / (p["b"] * size)
            r = math.hypot(u, v)
            out[i, j] = r <= 1.0 + p["lobe_amp"] * math.sin(p["lobes"] * math.atan2(v, u) + p["lobe_phase"])
    return out


def test_layout(synthetic_root):
    base = synthetic_root / "widget"
    assert len(list((base / "train" / "good").glob("*.png"))) == 12
    for d in ("hole", "scratch"):
        imgs = sorted(p.stem for p in (base / "test" / d).glob("*.png"))
        masks = sorted(p.stem for p in (base / "ground_truth" / d).glob("*_mask.png"))
        assert masks == [f"{s}_mask" for s in imgs] and len(imgs) == 6


def test_empty_good_split_is_valid(tmp_path):
    generate_synthetic(DatasetSpec(category="c", n_good=0, defects={"hole": 1}, resolution=16), tmp_path)
    assert list((tmp_path / "c" / "train" / "good").iterdir()) == []
    assert load_dataset(tmp_path, "c", "train") == []


def test_same_seed_gives_identical_files(tmp_path):
    spec = DatasetSpec(category="c", n_good=3, defects={"print": 2}, resolution=16, seed=4)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a" / "c", tmp_path / "b" / "c")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert not cmp.diff_files


@pytest.mark.parametrize("kind", ["hole", "scratch", "print"])
def test_defects_lie_strictly_inside_the_object(tmp_path, kind):
    spec = DatasetSpec(category="c", n_good=0, defects={kind: 8}, resolution=32, seed=1)
    generate_synthetic(spec, tmp_path)
    meta = json.loads((tmp_path / "c" / "synthetic_meta.json").read_text())
    samples = load_dataset(tmp_path, "c", "test", kind)
    for s in samples:
        key = "test/" + s.path.split("/test/")[1]
        sil = silhouette_oracle(meta["objects"][key], 32)
        mask = s.mask.astype(bool)
        assert mask.any()
        assert not (mask & ~sil).any()
        # strictly inside: no defect pixel touches the silhouette border
        padded = np.pad(sil, 1)
        for i, j in zip(*np.nonzero(mask)):
            assert padded[i:i + 3, j:j + 3].all()


def test_defect_areas_follow_the_spec(tmp_path):
    spec = DatasetSpec(category="c", n_good=0, defects={"hole": 20}, resolution=32, seed=0)
    generate_synthetic(spec, tmp_path)
    fr = np.array([s.mask.mean() for s in load_dataset(tmp_path, "c", "test", "hole")])
    assert (fr >= 0.01).all() and (fr <= 0.6).all()


def test_good_split_has_no_masks(synthetic_root):
    samples = load_dataset(synthetic_root, "widget", "train")
    assert samples and all(s.mask is None and s.label == "good" for s in samples)


def test_loaded_values_in_range(synthetic_root):
    for s in load_dataset(synthetic_root, "widget", "test"):
        assert s.image.min() >= -1 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_png_round_trip_is_exact(tmp_path):
    u = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    img = from_uint8(u)
    save_png(tmp_path / "x.png", img)
    assert np.array_equal(to_uint8(read_png(tmp_path / "x.png")), u)
    assert np.array_equal(read_png(tmp_path / "x.png"), img)


def test_resize_on_load(synthetic_root):
    s = load_dataset(synthetic_root, "widget", "test", "hole", resolution=8)
    assert s[0].image.shape == (3, 8, 8) and s[0].mask.shape == (8, 8)


def test_subset_full_size_is_identity(synthetic_root):
    full = load_dataset(synthetic_root, "widget", "test", "hole")
    same = load_dataset(synthetic_root, "widget", "test", "hole", subset_k=len(full))
    assert [s.path for s in full] == [s.path for s in same]


def test_one_shot_subset_reproducible(synthetic_root):
    a = load_dataset(synthetic_root, "widget", "test", "hole", subset_k=1, seed=0)
    b = load_dataset(synthetic_root, "widget", "test", "hole", subset_k=1, seed=0)
    assert len(a) == 1 and a[0].path == b[0].path


def test_missing_mask_is_an_error(tmp_path):
    generate_synthetic(DatasetSpec(category="c", n_good=0, defects={"hole": 2}, resolution=16), tmp_path)
    (tmp_path / "c" / "ground_truth" / "hole" / "000_mask.png").unlink()
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "c", "test", "hole")


def test_mask_without_suffix_accepted(tmp_path):
    generate_synthetic(DatasetSpec(category="c", n_good=0, defects={"hole": 1}, resolution=16), tmp_path)
    gt = tmp_path / "c" / "ground_truth" / "hole"
    (gt / "000_mask.png").rename(gt / "000.png")
    assert load_dataset(tmp_path, "c", "test", "hole")[0].mask.sum() > 0


def test_unreadable_image(tmp_path):
    generate_synthetic(DatasetSpec(category="c", n_good=1, defects={}, resolution=16), tmp_path)
    (tmp_path / "c" / "train" / "good" / "000.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "c", "train")


@pytest.mark.parametrize("kwargs", [dict(n_good=-1), dict(resolution=24), dict(defects={"crack": 3})])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        DatasetSpec(**kwargs)


def _fake(n, label):
    return [Sample(np.zeros((3, 4, 4), np.float32), np.zeros((4, 4), np.float32), label, f"{label}/{i}")
            for i in range(n)]


def test_partition_eighteen_images():
    base, test = partition_for_classification({"a": _fake(18, "a")}, seed=1)
    assert len(base["a"]) == 6 and len(test) == 12


def test_partition_single_image_warns():
    with pytest.warns(UserWarning):
        base, test = partition_for_classification({"a": _fake(1, "a")}, seed=1)
    assert len(base["a"]) == 1 and test == []


def test_partition_empty_category():
    with pytest.raises(DatasetError):
        partition_for_classification({"a": []}, seed=0)


@given(sizes=st.lists(st.integers(2, 30), min_size=1, max_size=4), seed=st.integers(0, 100))
def test_partition_set_algebra(sizes, seed):
    data = {f"c{i}": _fake(n, f"c{i}") for i, n in enumerate(sizes)}
    base, test = partition_for_classification(data, seed)
    for cat, items in data.items():
        b = {s.path for s in base[cat]}
        t = {s.path for s in test if s.label == cat}
        assert b | t == {s.path for s in items}
        assert not b & t
        assert len(b) == max(1, len(items) // 3)


def test_partition_is_seeded():
    data = {"a": _fake(12, "a"), "b": _fake(9, "b")}
    p1 = partition_for_classification(data, 1)
    assert [s.path for s in p1[1]] == [s.path for s in partition_for_classification(data, 1)[1]]
    assert [s.path for s in p1[1]] != [s.path for s in partition_for_classification(data, 2)[1]]


def test_select_subset_rejects_zero():
    with pytest.raises(ConfigError):
        select_subset(5, 0, 0)


def test_stack_samples_shapes(synthetic_root):
    x, m, labels = stack_samples(load_dataset(synthetic_root, "widget", "test"))
    assert x.shape == (12, 3, 16, 16) and m.shape == (12, 1, 16, 16)
    assert sorted(set(labels)) == ["hole", "scratch"]
