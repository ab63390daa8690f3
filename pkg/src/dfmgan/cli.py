"""Command-line interface: ``dfmgan <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure (non-finite loss or parameter).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import __version__
from .backbone import load_backbone, train_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_seed
from .data import (DatasetSpec, generate_synthetic, load_dataset, read_mask, read_png, save_mask_png,
                   save_png, stack_samples, to_uint8)
from .defect import interpolate, load_defect_model, train_defect_stage
from .downstream import classification_benchmark, compare_reports, draw_codes, sample_defect_images
from .metrics import MetricReport, clustered_lpips, get_extractor, kid, mask_area_stats
from .utils import ConfigError, DatasetError, NumericalError

log = logging.getLogger("dfmgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
INDEX_FILE = "index.json"
LOG_FILE = "training_log.json"


def write_json(path, obj) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path} is not valid JSON: {exc}") from None


def effective_config(args) -> RunConfig:
    """Config file values, then command-line overrides, then the seed."""
    cfg = RunConfig.load(getattr(args, "config", None))
    for flag, section, key in (("steps", "training", "steps"), ("batch_size", "training", "batch_size"),
                               ("resolution", "model", "resolution"), ("category", "data", "category"),
                               ("subset_k", "data", "subset_k"), ("extractor", "eval", "extractor"),
                               ("epochs", "classifier", "epochs"), ("architecture", "classifier", "architecture")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    # re-validate after overrides
    return RunConfig.from_dict(cfg.to_dict())


# image-set helpers ----------------------------------------------------------------

def list_images(directory) -> list[Path]:
    """PNG files of a set, excluding masks; honours an ``index.json`` written by ``generate``."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"image directory {d} does not exist")
    index = d / INDEX_FILE
    if index.exists():
        entries = read_json(index).get("samples", [])
        key = "defect" if entries and "defect" in entries[0] else "image"
        return [d / e[key] for e in entries]
    return [p for p in sorted(d.glob("*.png")) if not p.stem.endswith("_mask")]


def load_image_set(directory, resolution: Optional[int] = None) -> torch.Tensor:
    paths = list_images(directory)
    if not paths:
        return torch.zeros(0, 3, resolution or 1, resolution or 1)
    return torch.from_numpy(np.stack([read_png(p, resolution) for p in paths]))


def load_mask_set(directory) -> Optional[np.ndarray]:
    d = Path(directory)
    index = d / INDEX_FILE
    if not index.exists():
        return None
    entries = read_json(index).get("samples", [])
    if not entries or "mask" not in entries[0]:
        return None
    return np.stack([read_mask(d / e["mask"]) for e in entries])


def image_grid(rows: list[list[np.ndarray]]) -> np.ndarray:
    """Tile HWC uint8 panels into one image (rows x columns)."""
    return np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)


def mask_panel(mask: torch.Tensor) -> np.ndarray:
    m = (mask[0].numpy() > 0).astype(np.uint8) * 255
    return np.repeat(m[:, :, None], 3, axis=2)


def resolve_defect_dir(path, category: Optional[str], defect: Optional[str]):
    """Accept ``<root>/<category>/test/<defect>`` or a dataset root plus --category/--defect."""
    p = Path(path)
    if category is None and defect is None and p.parent.name == "test":
        return p.parent.parent.parent, p.parent.parent.name, p.name
    if category is None or defect is None:
        raise ConfigError("give a <root>/<category>/test/<defect> directory or --category and --defect")
    return p, category, defect


# commands -------------------------------------------------------------------------

def cmd_make_data(args) -> int:
    spec = DatasetSpec.from_json(args.spec)
    base = generate_synthetic(spec, args.out_dir)
    n_def = sum(spec.defects.values())
    print(f"{base}: {spec.n_good} good, {n_def} defect images "
          f"({', '.join(f'{k}={v}' for k, v in sorted(spec.defects.items()))}) at {spec.resolution}x{spec.resolution}")
    return EXIT_OK


def _log_payload(cfg: RunConfig, history: list, started: float, extra: dict) -> dict:
    return {"config": cfg.to_dict(), "history": history, "elapsed_seconds": time.time() - started, **extra}


def cmd_train_backbone(args) -> int:
    cfg = effective_config(args)
    category = cfg.data.category
    if category is None:
        raise ConfigError("data.category is required (--category)")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.kind != "backbone":
        raise ConfigError(f"{args.resume} is not a backbone checkpoint")
    model = cfg.model
    if resume is not None:
        from .networks import SynthesisConfig
        model = SynthesisConfig(**resume.config["model"])
    samples = load_dataset(args.data_dir, category, "train", subset_k=cfg.data.subset_k,
                           resolution=model.resolution, seed=cfg.seed)
    images, _, _ = stack_samples(samples)
    started = time.time()
    ckpt, history = train_backbone(images, model, cfg.training, resume=resume)
    ckpt.metadata["run_config"] = cfg.to_dict()
    out = save_checkpoint(args.out_ckpt, ckpt)
    write_json(out / LOG_FILE, _log_payload(cfg, history, started, {"n_images": len(images), "step": ckpt.step}))
    print(f"wrote backbone checkpoint {out} at step {ckpt.step}")
    return EXIT_OK


def cmd_train_defect(args) -> int:
    cfg = effective_config(args)
    root, category, defect = resolve_defect_dir(args.defect_dir, args.category, args.defect)
    backbone = load_checkpoint(args.backbone_ckpt)
    if backbone.kind != "backbone":
        raise ConfigError(f"{args.backbone_ckpt} is not a backbone checkpoint")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.kind != "defect":
        raise ConfigError(f"{args.resume} is not a stage-2 checkpoint")
    res = backbone.config["model"]["resolution"]
    samples = load_dataset(root, category, "test", defect_category=defect, subset_k=cfg.data.subset_k,
                           resolution=res, seed=cfg.seed)
    images, masks, _ = stack_samples(samples)
    started = time.time()
    ckpt, history = train_defect_stage(backbone, images, masks, cfg.defect, cfg.training, resume=resume)
    ckpt.metadata.update(run_config=cfg.to_dict(), category=category, defect=defect)
    out = save_checkpoint(args.out_ckpt, ckpt)
    write_json(out / LOG_FILE, _log_payload(cfg, history, started, {"n_images": len(images), "step": ckpt.step}))
    print(f"wrote stage-2 checkpoint {out} at step {ckpt.step}")
    return EXIT_OK


@torch.no_grad()
def cmd_generate(args) -> int:
    if args.n < 0:
        raise ConfigError("n must be >= 0")
    seed = default_seed() if args.seed is None else args.seed
    ckpt = load_checkpoint(args.ckpt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(max(args.n - 1, 0))))
    entries = []
    if ckpt.kind == "defect":
        G = load_defect_model(ckpt).G
        images, masks, free = sample_defect_images(G, args.n, seed)
        for i in range(args.n):
            stem = f"{i:0{width}d}"
            entry = {"index": i, "defect": f"{stem}_defect.png"}
            save_png(out / entry["defect"], images[i].numpy())
            if args.triplets:
                entry.update(defect_free=f"{stem}_defect_free.png", mask=f"{stem}_mask.png")
                save_png(out / entry["defect_free"], free[i].numpy())
                save_mask_png(out / entry["mask"], masks[i, 0].numpy())
            entries.append(entry)
    else:
        if args.triplets:
            raise ConfigError("--triplets needs a stage-2 checkpoint; this one holds the backbone only")
        G, _, cfg = load_backbone(ckpt)
        z, _, noise = draw_codes(args.n, cfg.z_dim, G.noise_shapes(), seed)
        for k in range(0, args.n, 64):
            sl = slice(k, k + 64)
            batch = G(z[sl], {key: v[sl] for key, v in noise.items()})
            for j, img in enumerate(batch):
                i = k + j
                entry = {"index": i, "image": f"{i:0{width}d}.png"}
                save_png(out / entry["image"], img.numpy())
                entries.append(entry)
    write_json(out / INDEX_FILE, {"checkpoint": str(args.ckpt), "kind": ckpt.kind, "step": ckpt.step,
                                  "seed": seed, "triplets": bool(args.triplets), "samples": entries,
                                  "config": ckpt.config})
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = effective_config(args)
    real = load_image_set(args.real_dir)
    res = real.shape[-1] if len(real) else None
    gen = load_image_set(args.gen_dir, res)
    if len(gen) < 2 or len(real) < 2:
        raise DatasetError(f"KID needs at least 2 images per set (got {len(gen)} generated, {len(real)} real)")
    extractor = get_extractor(cfg.eval.extractor)
    fg, fr = extractor.embed(gen), extractor.embed(real)
    subset = cfg.eval.subset_size or min(len(gen), len(real), 1000)
    kid_mean, kid_std = kid(fg, fr, cfg.eval.n_subsets, subset, seed=cfg.seed)
    lp, n_used = clustered_lpips(gen, real, extractor)
    masks = load_mask_set(args.gen_dir)
    report = MetricReport(
        kid=kid_mean, kid_std=kid_std, clustered_lpips=lp, n_clusters_used=n_used,
        mask_area_stats=mask_area_stats(masks) if masks is not None else None,
        metadata={"extractor_id": fg.extractor_id, "seed": cfg.seed, "n_subsets": cfg.eval.n_subsets,
                  "subset_size": subset, "n_generated": len(gen), "n_real": len(real),
                  "gen_dir": str(args.gen_dir), "real_dir": str(args.real_dir), "config": cfg.to_dict()},
    )
    payload = report.to_dict()
    if args.report:
        write_json(args.report, payload)
    print(json.dumps({k: payload[k] for k in ("kid", "kid_x1e3", "clustered_lpips")}))
    return EXIT_OK


@torch.no_grad()
def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise ConfigError("--steps must be >= 2")
    if args.rows < 1:
        raise ConfigError("--rows must be >= 1")
    seed = default_seed() if args.seed is None else args.seed
    ckpt = load_checkpoint(args.ckpt)
    G = load_defect_model(ckpt).G
    z_obj, z_def, noise = draw_codes(args.rows + 1, G.cfg.z_dim, G.noise_shapes(), seed)
    grid_rows = []
    for r in range(args.rows):
        fixed = {k: v[r:r + 1] for k, v in noise.items()}
        path = interpolate(G, (z_obj[r:r + 1], z_obj[r + 1:r + 2]), (z_def[r:r + 1], z_def[r + 1:r + 2]),
                           args.steps, args.mode, fixed)
        panels = [np.concatenate([to_uint8(p["defect_free"][0].numpy()), mask_panel(p["mask"][0]),
                                  to_uint8(p["image"][0].numpy())], axis=0) for p in path]
        grid_rows.append(panels)
    out = Path(args.out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_grid(grid_rows)).save(out, optimize=False)
    print(f"wrote {args.rows}x{args.steps} interpolation grid to {out}")
    return EXIT_OK


def cmd_classify_benchmark(args) -> int:
    cfg = effective_config(args)
    category = cfg.data.category
    if category is None:
        raise ConfigError("data.category is required (--category)")
    spec = read_json(args.ckpts)
    backbone_path = spec.get("backbone")
    backbone = load_checkpoint(backbone_path) if backbone_path else None
    res = backbone.config["model"]["resolution"] if backbone else None
    test_dir = Path(args.data_dir) / category / "test"
    if not test_dir.is_dir():
        raise DatasetError(f"missing directory {test_dir}")
    defects = sorted(d.name for d in test_dir.iterdir() if d.is_dir() and d.name != "good")
    if args.defects:
        defects = [d for d in defects if d in set(args.defects)]
    if len(defects) < 2:
        raise ConfigError(f"classification needs at least two defect categories, found {defects}")
    samples = {d: load_dataset(args.data_dir, category, "test", defect_category=d, resolution=res) for d in defects}
    seeds = list(range(1, args.partitions + 1))
    generators = {}
    for k in range(1, args.partitions + 1):
        name = f"P{k}"
        per = spec.get("partitions", {}).get(name, spec.get("categories", {}))
        generators[name] = {cat: load_checkpoint(path) for cat, path in per.items() if cat in defects}
        missing = [d for d in defects if d not in generators[name]]
        if missing and backbone is None:
            raise ConfigError(f"no checkpoint for {missing} in {name} and no backbone to train one")
    report = classification_benchmark(samples, backbone, seeds, args.n_per_category, cfg.defect, cfg.training,
                                      cfg.classifier, include_base=args.include_base,
                                      generators=generators, seed=cfg.seed)
    report["config"] = cfg.to_dict()
    report["defect_categories"] = defects
    if args.compare:
        report["comparison"] = compare_reports(report, read_json(args.compare))
    if args.report:
        write_json(args.report, report)
    for row in report["partitions"]:
        print(f"{row['partition']}: augmented {row['augmented']['accuracy']:.4f} "
              f"base-only {row['base_only']['accuracy']:.4f}")
    return EXIT_OK


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfmgan", description="Few-shot defect image generation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, training=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="root seed (default: $DFM_SEED or 0)")
        if training:
            sp.add_argument("--steps", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--subset-k", type=int, help="use k images chosen by the seed")
            sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("make-data", help="render a synthetic dataset in the MVTec layout")
    sp.add_argument("spec", help="dataset spec JSON")
    sp.add_argument("out_dir")
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("train-backbone", help="stage 1: train on defect-free images")
    sp.add_argument("data_dir")
    sp.add_argument("out_ckpt")
    sp.add_argument("--category")
    sp.add_argument("--resolution", type=int)
    common(sp)
    sp.set_defaults(func=cmd_train_backbone)

    sp = sub.add_parser("train-defect", help="stage 2: learn one defect category")
    sp.add_argument("backbone_ckpt")
    sp.add_argument("defect_dir", help="<root>/<category>/test/<defect>, or a root with --category/--defect")
    sp.add_argument("out_ckpt")
    sp.add_argument("--category")
    sp.add_argument("--defect")
    common(sp)
    sp.set_defaults(func=cmd_train_defect)

    sp = sub.add_parser("generate", help="sample images (or triplets) from a checkpoint")
    sp.add_argument("ckpt")
    sp.add_argument("n", type=int)
    sp.add_argument("out_dir")
    sp.add_argument("--triplets", action="store_true", help="also write defect-free image and mask")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="KID and clustered LPIPS of a generated set")
    sp.add_argument("gen_dir")
    sp.add_argument("real_dir")
    sp.add_argument("--extractor", help="feature extractor name (default random-conv)")
    sp.add_argument("--report", help="write the JSON report here")
    common(sp, training=False)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("interpolate", help="grid of code interpolations")
    sp.add_argument("ckpt")
    sp.add_argument("out_png")
    sp.add_argument("--mode", choices=("both", "defect_only"), default="both")
    sp.add_argument("--steps", type=int, default=5)
    sp.add_argument("--rows", type=int, default=4)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("classify-benchmark", help="defect classification with generated data")
    sp.add_argument("data_dir")
    sp.add_argument("ckpts", help="JSON: {backbone, categories: {defect: ckpt}, partitions: {P1: {...}}}")
    sp.add_argument("--category")
    sp.add_argument("--defects", nargs="+", help="restrict to these defect categories")
    sp.add_argument("--partitions", type=int, default=3)
    sp.add_argument("--n-per-category", type=int, default=200)
    sp.add_argument("--include-base", action="store_true", help="add the real base images to the generated set")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--architecture", choices=("tiny_cnn", "resnet34"))
    sp.add_argument("--compare", help="earlier report to test against (Welch)")
    sp.add_argument("--report")
    common(sp)
    sp.set_defaults(func=cmd_classify_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"dfmgan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"dfmgan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"dfmgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
