"""Command-line entry point.

Exit codes: 0 on success, 1 when inputs fail validation, 2 on runtime errors
(click usage errors also exit with 2).
"""

from __future__ import annotations

import datetime as _dt
import functools
import hashlib
import json
import logging
import secrets
import shutil
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from . import __version__
from .anchors import DEFAULT_ANCHOR_COUNT, estimate_anchors, load_anchors, save_anchors
from .dataio import list_items, load_dataset, load_item, resample_to_spacing, save_item
from .errors import ValidationError
from .evaluation import aggregate, evaluate_image, render_overlay, render_report, side_by_side
from .phantom import PhantomConfig, generate_phantom

MANIFEST = "run_manifest.json"


def hash_path(path) -> str:
    """Content hash of a file or a directory tree (relative names + bytes)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": hash_path(p)} for name, p in inputs.items()},
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "argv": sys.argv[1:],
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except Exception as exc:  # noqa: BLE001 - map every runtime failure to exit 2
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _ensure_empty(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ValidationError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)


def _resolve_seed(seed):
    return seed if seed is not None else secrets.randbelow(2**31)


def _train_config(config_path, overrides: dict):
    from .pipeline import TrainConfig

    doc = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {config_path}: {exc}") from exc
        doc = doc.get("train", doc)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if doc.get("seed") is None:
        doc["seed"] = _resolve_seed(None)
    return TrainConfig.from_dict(doc)


train_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON training config."),
    click.option("--epochs", type=click.IntRange(min=1)),
    click.option("--lr", type=float),
    click.option("--batch-size", type=click.IntRange(min=1)),
    click.option("--augment", "augment_multiplier", type=click.IntRange(min=1), help="Copies per image per epoch."),
    click.option("--backbone", type=click.Choice(["tiny", "resnet50"])),
    click.option("--teacher-forcing", type=click.Choice(["gt", "predicted", "scheduled"])),
    click.option("--seed", type=int),
]


def with_train_options(fn):
    for opt in reversed(train_options):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress.")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Cap on worker threads.")
def main(verbose, jobs):
    """Sequential rib detection, labeling and segmentation in chest radiographs."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if jobs:
        import torch

        torch.set_num_threads(jobs)


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--count", required=True, type=click.IntRange(min=1))
@click.option("--size", type=click.IntRange(min=64), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--noise", type=float, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="PhantomConfig JSON.")
@click.option("--force", is_flag=True, help="Replace a non-empty output directory.")
@handle_errors
def synth(out, count, size, seed, noise, config_path, force):
    """Generate synthetic rib phantoms in the dataset format."""
    out = Path(out)
    _ensure_empty(out, force)
    cfg = PhantomConfig.from_json(config_path) if config_path else PhantomConfig()
    if size is not None:
        cfg.size = size
    if noise is not None:
        cfg.noise_sigma = noise
    if seed is None and config_path:
        seed = cfg.seed_range[0]
    seed = _resolve_seed(seed)
    cfg.seed_range = (seed, seed + count)
    cfg.validate()
    write_manifest(out, "synth", {"count": count, "seed": seed, "phantom": cfg.to_dict()}, {})
    for s in range(seed, seed + count):
        save_item(generate_phantom(s, cfg), out)
    click.echo(f"wrote {count} phantoms to {out}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--count", type=click.IntRange(min=1), default=DEFAULT_ANCHOR_COUNT, show_default=True)
@click.option("--spacing", type=float, default=1.0, show_default=True, help="Target pixel spacing in mm.")
@handle_errors
def anchors(data, out, count, spacing):
    """Estimate dedicated anchor boxes by Mean Shift."""
    write_manifest(out, "anchors", {"count": count, "spacing": spacing}, {"data": data})
    dataset = [resample_to_spacing(it, spacing) for it in load_dataset(data)]
    a = estimate_anchors(dataset, count)
    save_anchors(a, Path(out) / "anchors.json")
    click.echo(f"bandwidth {a.bandwidth:.6g}: {len(a)} anchors written to {Path(out) / 'anchors.json'}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--anchors", "anchors_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@with_train_options
@handle_errors
def train(data, anchors_path, out, config_path, **overrides):
    """Train the nine rib networks."""
    from .pipeline import train_all

    cfg = _train_config(config_path, overrides)
    out = Path(out)
    write_manifest(out, "train", cfg.to_dict(), {"data": data, "anchors": anchors_path})
    a = load_anchors(anchors_path)
    dataset = [resample_to_spacing(it, cfg.target_spacing) for it in load_dataset(data)]
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_anchors(a, out / "anchors.json")
    train_all(dataset, a, cfg, out)
    click.echo(f"trained 9 networks into {out}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoints", required=True, type=click.Path(file_okay=False))
@click.option("--anchors", "anchors_path", type=click.Path(exists=True, dir_okay=False), help="Defaults to the checkpoint directory's anchors.json.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@handle_errors
def infer(data, checkpoints, anchors_path, out):
    """Run the rib cascade on every image of a dataset."""
    from .pipeline import infer_cascade, load_networks, save_prediction

    nets, metas = load_networks(checkpoints)
    anchors_path = anchors_path or Path(checkpoints) / "anchors.json"
    a = load_anchors(anchors_path)
    if any(m.get("anchor_file_hash") not in (None, a.content_hash()) for m in metas.values()):
        raise ValidationError(f"anchors {anchors_path} differ from the ones the networks were trained with")
    spacing = metas[1].get("training_config", {}).get("target_spacing", 1.0)
    floor = metas[1].get("training_config", {}).get("score_floor", 0.05)
    write_manifest(out, "infer", {"target_spacing": spacing}, {"data": data, "checkpoints": checkpoints, "anchors": anchors_path})
    n = 0
    for d in list_items(data):
        item = resample_to_spacing(load_item(d, validate=False), spacing)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = infer_cascade(item.image, nets, a, item.id, floor)
        save_prediction(res, out, spacing)
        n += 1
    click.echo(f"wrote predictions for {n} images to {out}")


@main.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--sample-std", is_flag=True, help="Use the sample (n-1) standard deviation.")
@handle_errors
def eval_cmd(pred, gt, out, sample_std):
    """Score predictions against ground truth: metrics.json and report.md."""
    from .pipeline import load_prediction

    write_manifest(out, "eval", {"sample_std": sample_std}, {"pred": pred, "gt": gt})
    pred_dirs = {p.name: p for p in list_items(pred)}
    evals = []
    for item in load_dataset(gt):
        if item.id not in pred_dirs:
            raise ValidationError(f"no prediction for image {item.id}")
        res = load_prediction(pred_dirs[item.id])
        meta = json.loads((pred_dirs[item.id] / "meta.json").read_text()) if (pred_dirs[item.id] / "meta.json").is_file() else {}
        item = resample_to_spacing(item, float(meta.get("pixel_spacing_mm", item.image.spacing)))
        evals.append(evaluate_image(res, item))
    report = aggregate(evals, sample_std)
    report.save(Path(out) / "metrics.json")
    (Path(out) / "report.md").write_text(render_report(report))
    c = report.cells
    click.echo(
        f"detection L {c['left/detection']['mean']:.3f} R {c['right/detection']['mean']:.3f}; "
        f"segmentation L {c['left/segmentation']['mean']:.3f} R {c['right/segmentation']['mean']:.3f}"
    )


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--k", type=click.IntRange(min=2), default=5, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Defaults to runs/<timestamp>.")
@click.option("--anchors-from-all", is_flag=True, help="Estimate anchors on the whole dataset, test folds included.")
@with_train_options
@handle_errors
def cv(data, k, out, anchors_from_all, config_path, **overrides):
    """k-fold cross-validation with a Dice report."""
    from .pipeline import run_cross_validation

    cfg = _train_config(config_path, overrides)
    if out is None:
        out = Path("runs") / _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    write_manifest(out, "cv", {"k": k, "anchors_from_all": anchors_from_all, "train": cfg.to_dict()}, {"data": data})
    dataset = load_dataset(data)
    result = run_cross_validation(dataset, k, cfg, out, anchors_from_all, progress=lambda m: click.echo(m, err=True))
    click.echo((Path(out) / "report.md").read_text())


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--pred", type=click.Path(exists=True, file_okay=False), help="Prediction directory from `infer`.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--id", "ids", multiple=True, help="Image ids to render (default: all).")
@handle_errors
def render(data, pred, out, ids):
    """Overlay masks, boxes and rib labels; ground truth next to prediction."""
    from .pipeline import load_prediction

    out = Path(out)
    write_manifest(out, "render", {"ids": list(ids)}, {"data": data, **({"pred": pred} if pred else {})})
    dirs = [d for d in list_items(data) if not ids or d.name in ids]
    if ids and len(dirs) != len(set(ids)):
        raise ValidationError(f"unknown image ids {sorted(set(ids) - {d.name for d in dirs})}")
    for d in dirs:
        item = load_item(d)
        gt_png = out / f"{item.id}_gt.png"
        render_overlay(item.image, item, gt_png)
        if pred:
            res = load_prediction(Path(pred) / item.id)
            meta = json.loads((Path(pred) / item.id / "meta.json").read_text())
            item = resample_to_spacing(item, float(meta.get("pixel_spacing_mm", item.image.spacing)))
            pred_png = out / f"{item.id}_pred.png"
            render_overlay(item.image, res, pred_png)
            side_by_side(gt_png, pred_png, out / f"{item.id}.png")
    click.echo(f"rendered {len(dirs)} images into {out}")


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False))
@click.option("--anchors", "anchors_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoints", type=click.Path(exists=True, file_okay=False))
@handle_errors
def validate(data, anchors_path, checkpoints):
    """Check a dataset, an anchor file and/or a checkpoint directory."""
    if not (data or anchors_path or checkpoints):
        raise click.UsageError("give at least one of --data, --anchors, --checkpoints")
    if data:
        items = load_dataset(data)
        n_masks = sum(len(it.annotations) for it in items)
        click.echo(f"dataset ok: {len(items)} images, {n_masks} rib masks")
    if anchors_path:
        a = load_anchors(anchors_path)
        click.echo(f"anchors ok: {len(a)} boxes")
    if checkpoints:
        from .pipeline import load_networks

        load_networks(checkpoints)
        click.echo("checkpoints ok: ribs 1-9")


if __name__ == "__main__":
    main()
