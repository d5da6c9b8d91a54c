"""Training of the nine rib networks, the sequential inference cascade and cross-validation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .anchors import AnchorSet, estimate_anchors, save_anchors
from .dataio import (
    RIB_INDICES,
    SIDES,
    AnnotatedImage,
    AugmentConfig,
    GrayImage,
    RibLabel,
    apply_affine,
    resample_to_spacing,
    sample_affine,
    split_folds,
)
from .errors import RibCascadeError, ValidationError
from .evaluation import SCORE_FLOOR, aggregate, evaluate_image, render_report
from .geometry import PixelBox, box_from_mask, paste_mask
from .model import (
    BACKBONES,
    Detection,
    LossWeights,
    RibNetwork,
    anchors_tensor,
    build_input,
    forward,
    load_checkpoint,
    loss,
    make_targets,
    save_checkpoint,
)

log = logging.getLogger(__name__)

TEACHER_FORCING_MODES = ("gt", "predicted", "scheduled")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 2e-3
    lr_schedule: str = "cosine"  # cosine | constant
    batch_size: int = 8
    weight_decay: float = 1e-4
    augment_multiplier: int = 1  # copies per image per epoch; copies beyond the first are augmented
    backbone: str = "tiny"
    teacher_forcing: str = "gt"
    seed: int = 0
    mask_box_jitter: float = 0.05
    loss_score: float = 1.0
    loss_shift: float = 1.0
    loss_mask: float = 1.0
    target_spacing: float = 1.0
    anchor_count: int = 30
    score_floor: float = SCORE_FLOOR
    max_rotation_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    max_translation: float = 0.05
    sample_std: bool = False

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.augment_multiplier < 1:
            raise ValidationError("epochs, batch_size and augment_multiplier must be positive")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.teacher_forcing not in TEACHER_FORCING_MODES:
            raise ValidationError(f"teacher_forcing must be one of {TEACHER_FORCING_MODES}")
        if self.backbone not in BACKBONES:
            raise ValidationError(f"backbone must be one of {BACKBONES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc).validate()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.loss_score, self.loss_shift, self.loss_mask)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.max_rotation_deg, (self.scale_min, self.scale_max), self.max_translation)


def ids_hash(ids) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


# ------------------------------------------------------------------ training


def _upper_gt(item: AnnotatedImage, rib_index: int) -> np.ndarray | None:
    if rib_index == 1:
        return None
    shape = item.image.shape
    out = np.zeros(shape, dtype=bool)
    for side in SIDES:
        m = item.annotations.get(RibLabel(side, rib_index - 1))
        if m is not None:
            out |= m
    return out


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))


def train_rib(
    rib_index: int,
    dataset: Sequence[AnnotatedImage],
    anchors: AnchorSet,
    cfg: TrainConfig,
    predicted_upper: dict[str, np.ndarray] | None = None,
) -> tuple[RibNetwork, list[float]]:
    """Train the network of one rib index; returns it with the per-epoch mean loss.

    ``predicted_upper`` maps image id to the cascade's union mask of rib
    ``rib_index - 1``; it is used for channel 2 in the "predicted" and
    "scheduled" teacher-forcing modes.
    """
    cfg.validate()
    items = [it for it in dataset if any(RibLabel(s, rib_index) in it.annotations for s in SIDES)]
    if not items:
        raise ValidationError(f"rib {rib_index} is absent from every training image")
    if cfg.teacher_forcing != "gt" and rib_index > 1 and predicted_upper is None:
        raise RibCascadeError(f"rib {rib_index}: mode {cfg.teacher_forcing!r} needs predicted upper masks")
    torch.manual_seed(cfg.seed * 1009 + rib_index)
    rng = np.random.default_rng([cfg.seed, rib_index])
    net = RibNetwork(rib_index, cfg.backbone, len(anchors))
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    anchor_t = anchors_tensor(anchors)
    samples = [(k, c) for k in range(len(items)) for c in range(cfg.augment_multiplier)]
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        p_pred = 0.0
        if cfg.teacher_forcing == "predicted":
            p_pred = 1.0
        elif cfg.teacher_forcing == "scheduled":
            p_pred = epoch / max(cfg.epochs - 1, 1)
        order = rng.permutation(len(samples))
        # group by image shape so every batch stacks
        batches: dict[tuple, list] = {}
        epoch_losses = []
        for pos in order:
            k, copy = samples[pos]
            item = items[k]
            upper = _upper_gt(item, rib_index)
            if upper is not None and p_pred > 0 and rng.random() < p_pred:
                upper = predicted_upper[item.id]
            sub = AnnotatedImage(
                item.image,
                {l: m for l, m in item.annotations.items() if l.index == rib_index},
                item.id,
            )
            if copy > 0:
                params = sample_affine(rng, item.image.shape, cfg.augment)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    extra = {"upper": upper} if upper is not None else {}
                    sub, warped = apply_affine(sub, params, extra)
                upper = warped.get("upper")
            stack = build_input(sub.image, upper)
            masks = {l.side: m for l, m in sub.annotations.items()}
            if not masks:
                continue
            tgt = make_targets(masks, sub.image.shape, anchors, net.mask_size, cfg.mask_box_jitter, rng)
            key = sub.image.shape
            batches.setdefault(key, []).append((stack, tgt))
            if len(batches[key]) == cfg.batch_size:
                epoch_losses.append(_step(net, opt, batches.pop(key), anchor_t, cfg, _lr_at(cfg, step, total_steps)))
                step += 1
        for key in sorted(batches):
            if batches[key]:
                epoch_losses.append(_step(net, opt, batches[key], anchor_t, cfg, _lr_at(cfg, step, total_steps)))
                step += 1
        history.append(float(np.mean(epoch_losses)))
        log.info("rib %d epoch %d loss %.4f", rib_index, epoch + 1, history[-1])
    net.eval()
    return net, history


def _step(net, opt, batch, anchor_t, cfg: TrainConfig, lr: float) -> float:
    for group in opt.param_groups:
        group["lr"] = lr
    x = torch.from_numpy(np.stack([s for s, _ in batch]))
    targets = [t for _, t in batch]
    boxes = torch.stack([t.mask_boxes for t in targets]).float()
    out = net(x, anchor_t, boxes)
    total, _ = loss(out, targets, cfg.weights)
    opt.zero_grad()
    total.backward()
    opt.step()
    return float(total.detach())


def _predict_union(net: RibNetwork, item: AnnotatedImage, upper, anchors: AnchorSet, floor: float) -> np.ndarray:
    dets = forward(net, build_input(item.image, upper), anchors)
    out = np.zeros(item.image.shape, dtype=bool)
    for d in dets:
        if d.score >= floor:
            out |= paste_mask(d.soft_mask, d.box, item.image.shape)
    return out


def train_all(
    dataset: Sequence[AnnotatedImage],
    anchors: AnchorSet,
    cfg: TrainConfig,
    out_dir=None,
    rib_order: Sequence[int] = RIB_INDICES,
    lineage: dict | None = None,
) -> dict[int, RibNetwork]:
    """Train the nine rib networks, writing ``rib_{i}.ckpt`` + sidecar when ``out_dir`` is set.

    In "gt" mode the networks are independent and ``rib_order`` may be any
    permutation; the other modes need rib i-1 trained before rib i.
    """
    cfg.validate()
    if sorted(rib_order) != list(RIB_INDICES):
        raise ValidationError(f"rib_order must be a permutation of 1..9, got {list(rib_order)}")
    if cfg.teacher_forcing != "gt":
        rib_order = RIB_INDICES
    for i in RIB_INDICES:
        if not any(RibLabel(s, i) in it.annotations for it in dataset for s in SIDES):
            raise ValidationError(f"rib {i} is absent from every training image")
    train_ids = sorted(it.id for it in dataset)
    sidecar = {
        "anchor_file_hash": anchors.content_hash(),
        "anchor_dataset_hash": anchors.dataset_hash,
        "training_config": cfg.to_dict(),
        "training_ids": train_ids,
        "training_ids_hash": ids_hash(train_ids),
    }
    if lineage:
        sidecar.update(lineage)
    nets: dict[int, RibNetwork] = {}
    running: dict[str, np.ndarray] = {}
    for i in rib_order:
        predicted = running if (cfg.teacher_forcing != "gt" and i > 1) else None
        net, history = train_rib(i, dataset, anchors, cfg, predicted)
        nets[i] = net
        if out_dir is not None:
            save_checkpoint(net, out_dir, dict(sidecar, loss_history=history))
        if cfg.teacher_forcing != "gt" and i < RIB_INDICES[-1]:
            running = {
                it.id: _predict_union(net, it, running.get(it.id) if i > 1 else None, anchors, cfg.score_floor)
                for it in dataset
            }
    return nets


def load_networks(directory) -> tuple[dict[int, RibNetwork], dict[int, dict]]:
    """Load all nine rib networks; the error lists every missing rib index."""
    d = Path(directory)
    missing = [i for i in RIB_INDICES if not (d / f"rib_{i}.ckpt").is_file() or not (d / f"rib_{i}.json").is_file()]
    if missing:
        raise ValidationError(f"missing checkpoints for rib indices {missing} in {d}")
    nets, metas = {}, {}
    for i in RIB_INDICES:
        nets[i], metas[i] = load_checkpoint(d, i)
    return nets, metas


# ----------------------------------------------------------------- inference


@dataclass
class CascadeResult:
    image_id: str
    detections: list[Detection]
    masks: dict[RibLabel, np.ndarray]
    timing: dict[str, float] = field(default_factory=dict)

    def labels(self) -> list[RibLabel]:
        return [d.label for d in self.detections]


def infer_cascade(
    img,
    nets: dict[int, RibNetwork],
    anchors: AnchorSet,
    image_id: str = "",
    score_floor: float = SCORE_FLOOR,
    trace: list | None = None,
    upper_override: dict[int, np.ndarray] | None = None,
) -> CascadeResult:
    """Run ribs 1..9 strictly in order, feeding each the union of its upper neighbor's masks.

    ``trace`` receives ``("read", i, j)`` when rib i consumes rib j's output and
    ``("write", i)`` when rib i's detections are recorded. ``upper_override``
    replaces the channel-2 mask given to the listed rib indices.
    """
    missing = [i for i in RIB_INDICES if i not in nets]
    if missing:
        raise ValidationError(f"missing networks for rib indices {missing}")
    if isinstance(img, AnnotatedImage):
        image_id = image_id or img.id
        img = img.image
    if not isinstance(img, GrayImage):
        img = GrayImage(img)
    shape = img.shape
    detections: list[Detection] = []
    masks: dict[RibLabel, np.ndarray] = {}
    timing = {}
    start = time.perf_counter()
    for i in RIB_INDICES:
        t0 = time.perf_counter()
        if i == 1:
            upper = None
        else:
            if trace is not None:
                trace.append(("read", i, i - 1))
            upper = np.zeros(shape, dtype=bool)
            for d in detections[-2:]:
                if d.label.index == i - 1 and d.score >= score_floor:
                    upper |= masks[d.label]
            if not upper.any():
                warnings.warn(f"{image_id}: no confident rib {i - 1} detection; channel 2 of rib {i} is empty")
        if upper_override and i in upper_override:
            upper = upper_override[i]
        dets = forward(nets[i], build_input(img, upper), anchors)
        for d in dets:
            masks[d.label] = paste_mask(d.soft_mask, d.box, shape)
            detections.append(d)
        if trace is not None:
            trace.append(("write", i))
        timing[f"rib_{i}"] = time.perf_counter() - t0
    timing["total"] = time.perf_counter() - start
    return CascadeResult(image_id, detections, masks, timing)


# ---------------------------------------------------------- cross-validation


@dataclass
class CVResult:
    fold_reports: list
    report: object
    evaluations: list
    split: object
    predictions: dict = field(default_factory=dict)


def run_cross_validation(
    dataset: Sequence[AnnotatedImage],
    k: int = 5,
    cfg: TrainConfig | None = None,
    out_dir=None,
    anchors_from_all: bool = False,
    keep_predictions: bool = False,
    progress: Callable[[str], None] | None = None,
) -> CVResult:
    """k-fold cross-validation: anchors, nine networks and held-out cascade per fold."""
    cfg = (cfg or TrainConfig()).validate()
    dataset = [resample_to_spacing(it, cfg.target_spacing) for it in dataset]
    if len(dataset) < k:
        raise ValidationError(f"{len(dataset)} images cannot be split into {k} folds")
    split = split_folds([it.id for it in dataset], k, cfg.seed)
    by_id = {it.id: it for it in dataset}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"k": k, "anchors_from_all": anchors_from_all, "train": cfg.to_dict()}, indent=2, sort_keys=True) + "\n"
        )
        (out / "folds.json").write_text(json.dumps(split.assignments, indent=2, sort_keys=True) + "\n")
    fold_reports, evaluations, predictions = [], [], {}
    for f in range(k):
        try:
            train = [by_id[i] for i in sorted(split.train_ids(f))]
            test = [by_id[i] for i in sorted(split.fold_ids(f))]
            fold_dir = out / f"fold_{f}" if out is not None else None
            if progress:
                progress(f"fold {f}: estimating anchors")
            anchors = estimate_anchors(dataset if anchors_from_all else train, cfg.anchor_count)
            if fold_dir is not None:
                fold_dir.mkdir(parents=True, exist_ok=True)
                save_anchors(anchors, fold_dir / "anchors.json")
            if progress:
                progress(f"fold {f}: training {len(RIB_INDICES)} networks on {len(train)} images")
            nets = train_all(train, anchors, cfg, fold_dir, lineage={"fold": f, "heldout_ids_hash": ids_hash(it.id for it in test)})
            if progress:
                progress(f"fold {f}: cascade on {len(test)} held-out images")
            fold_evals = []
            for item in test:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = infer_cascade(item.image, nets, anchors, item.id, cfg.score_floor)
                fold_evals.append(evaluate_image(res, item, cfg.score_floor))
                if keep_predictions:
                    predictions[item.id] = res
            report = aggregate(fold_evals, cfg.sample_std)
            report.meta = {"fold": f, "n_train": len(train), "n_test": len(test)}
            fold_reports.append(report)
            evaluations.extend(fold_evals)
        except RibCascadeError as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
    pooled = aggregate(evaluations, cfg.sample_std)
    pooled.meta = {"k": k, "folds": [r.meta for r in fold_reports]}
    if out is not None:
        pooled.save(out / "metrics.json")
        for f, r in enumerate(fold_reports):
            r.save(out / f"fold_{f}" / "metrics.json")
        (out / "report.md").write_text(render_report(pooled, f"Rib cascade, {k}-fold cross-validation"))
    return CVResult(fold_reports, pooled, evaluations, split, predictions)


# ------------------------------------------------------------ prediction io


def save_prediction(res: CascadeResult, root, spacing: float = 1.0) -> Path:
    """Write a cascade result in the dataset mask layout plus ``detections.json``."""
    d = Path(root) / res.image_id
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for label, m in sorted(res.masks.items()):
        Image.fromarray(np.asarray(m, dtype=np.uint8) * 255).save(d / "masks" / f"{label.stem}.png")
    dets = {
        d_.label.stem: {"box": list(d_.box.as_tuple()), "score": d_.score, "anchor_index": d_.anchor_index}
        for d_ in res.detections
    }
    (d / "detections.json").write_text(json.dumps(dets, indent=2, sort_keys=True) + "\n")
    (d / "meta.json").write_text(json.dumps({"pixel_spacing_mm": spacing, "id": res.image_id}, indent=2) + "\n")
    return d


def load_prediction(d) -> CascadeResult:
    """Read a prediction directory; a plain dataset item reads as a score-1 prediction."""
    d = Path(d)
    meta_path = d / "meta.json"
    image_id = d.name
    if meta_path.is_file():
        image_id = json.loads(meta_path.read_text()).get("id", image_id)
    masks = {}
    mask_dir = d / "masks"
    if mask_dir.is_dir():
        for p in sorted(mask_dir.glob("*.png")):
            try:
                label = RibLabel.parse(p.stem)
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{image_id}: unexpected mask file {p.name}") from exc
            with Image.open(p) as im:
                masks[label] = np.array(im) > 0
    det_path = d / "detections.json"
    raw = json.loads(det_path.read_text()) if det_path.is_file() else {}
    detections = []
    for label in sorted(set(masks) | {RibLabel.parse(k) for k in raw}, key=lambda l: (l.index, l.side)):
        entry = raw.get(label.stem)
        if entry is not None:
            box = PixelBox(*entry["box"])
            score = float(entry["score"])
            idx = int(entry.get("anchor_index", -1))
        elif masks[label].any():
            box, score, idx = box_from_mask(masks[label]), 1.0, -1
        else:
            continue
        detections.append(Detection(label, box, score, None, idx))
    return CascadeResult(image_id, detections, masks)
