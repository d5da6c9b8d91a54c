"""Dedicated anchor boxes from Mean Shift modes of normalized ground-truth boxes."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import RibCascadeError, ValidationError
from .geometry import NormalizedBox, box_from_mask, normalize_box

log = logging.getLogger(__name__)

DEFAULT_ANCHOR_COUNT = 30
BANDWIDTH_RANGE = (1e-3, 2.0)
CONVERGENCE_TOL = 1e-7
MAX_ITER = 500
MAX_BISECTIONS = 60


@dataclass
class MeanShiftResult:
    modes: np.ndarray  # (n_modes, 4)
    labels: np.ndarray  # (n_points,) mode index of every input point
    basin_sizes: np.ndarray  # (n_modes,)


@dataclass
class AnchorSet:
    boxes: list[NormalizedBox]
    bandwidth: float
    dataset_hash: str
    expected_count: int = DEFAULT_ANCHOR_COUNT
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_anchor_boxes(self.boxes, self.expected_count)

    def __len__(self):
        return len(self.boxes)

    def as_array(self) -> np.ndarray:
        """Corner coordinates, shape (n, 4)."""
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)

    def points(self) -> np.ndarray:
        """(cx, cy, w, h) coordinates, shape (n, 4)."""
        return np.array([b.to_cxcywh() for b in self.boxes], dtype=np.float64)

    def content_hash(self) -> str:
        return hashlib.sha256(self.as_array().tobytes()).hexdigest()


def validate_anchor_boxes(boxes: Sequence[NormalizedBox], expected_count: int):
    if len(boxes) != expected_count:
        raise ValidationError(f"expected {expected_count} anchor boxes, got {len(boxes)}")
    pts = np.array([b.to_cxcywh() for b in boxes])
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if np.max(np.abs(pts[i] - pts[j])) <= 1e-6:
                raise ValidationError(f"anchor boxes {i} and {j} coincide")


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValidationError("mean shift needs at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("non-finite point coordinates")
    return pts


def mean_shift_step(seeds: np.ndarray, points: np.ndarray, bandwidth: float) -> np.ndarray:
    """One flat-kernel step: every seed moves to the mean of the points in its ball.

    A seed with no point within ``bandwidth`` stays where it is.
    """
    d2 = (
        np.sum(seeds**2, axis=1)[:, None]
        - 2.0 * seeds @ points.T
        + np.sum(points**2, axis=1)[None, :]
    )
    inside = (d2 <= bandwidth**2).astype(np.float64)
    counts = inside.sum(axis=1)
    moved = inside @ points
    out = seeds.copy()
    has = counts > 0
    out[has] = moved[has] / counts[has, None]
    return out


def _converge(seeds: np.ndarray, points: np.ndarray, bandwidth: float) -> np.ndarray:
    current = seeds.copy()
    active = np.arange(len(current))
    for _ in range(MAX_ITER):
        if active.size == 0:
            break
        nxt = mean_shift_step(current[active], points, bandwidth)
        step = np.max(np.abs(nxt - current[active]), axis=1)
        current[active] = nxt
        active = active[step >= CONVERGENCE_TOL]
    return current


def mean_shift(points, bandwidth: float) -> MeanShiftResult:
    """Flat-kernel Mean Shift in box space, every point used as a seed.

    Converged seeds closer than ``bandwidth / 2`` are merged into their
    basin-size weighted mean, which is then re-converged so that every
    returned mode is a fixed point. Merging repeats until stable.
    """
    pts = _check_points(points)
    if not bandwidth > 0:
        raise ValidationError(f"bandwidth must be positive, got {bandwidth}")
    ends = _converge(pts, pts, bandwidth)

    # initial modes: greedy grouping of converged seeds
    modes, weights, labels = _merge(ends, np.ones(len(ends)), bandwidth / 2)
    while True:
        modes = _converge(modes, pts, bandwidth)
        new_modes, new_weights, relabel = _merge(modes, weights, bandwidth / 2)
        labels = relabel[labels]
        if len(new_modes) == len(modes):
            break
        modes, weights = new_modes, new_weights

    # canonical order for reproducibility: by basin size desc, then coordinates
    order = np.lexsort(tuple(modes[:, k] for k in range(modes.shape[1] - 1, -1, -1)) + (-weights,))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return MeanShiftResult(modes[order], rank[labels], weights[order])


def _merge(candidates: np.ndarray, weights: np.ndarray, radius: float):
    """Greedy merge of candidates within ``radius`` of a heavier representative."""
    order = np.lexsort(tuple(candidates[:, k] for k in range(candidates.shape[1] - 1, -1, -1)) + (-weights,))
    reps = np.empty((0, candidates.shape[1]))
    owner = np.full(len(candidates), -1)
    for idx in order:
        if len(reps):
            dist = np.linalg.norm(reps - candidates[idx], axis=1)
            close = np.flatnonzero(dist < radius)
            if close.size:
                owner[idx] = close[0]
                continue
        owner[idx] = len(reps)
        reps = np.vstack([reps, candidates[idx]])
    merged = np.zeros((len(reps), candidates.shape[1]))
    merged_w = np.zeros(len(reps))
    np.add.at(merged, owner, candidates * weights[:, None])
    np.add.at(merged_w, owner, weights)
    return merged / merged_w[:, None], merged_w, owner


def box_points(dataset) -> np.ndarray:
    """Normalized (cx, cy, w, h) of every ground-truth box, pooled over labels."""
    pts = []
    for item in dataset:
        h, w = item.image.shape
        for label in sorted(item.annotations):
            nb = normalize_box(box_from_mask(item.annotations[label]), w, h)
            pts.append(nb.to_cxcywh())
    return np.array(pts, dtype=np.float64).reshape(-1, 4)


def dataset_hash(dataset) -> str:
    """Hash of image ids and normalized GT boxes, the inputs anchors depend on."""
    h = hashlib.sha256()
    for item in sorted(dataset, key=lambda d: d.id):
        h.update(item.id.encode())
        h.update(np.round(box_points([item]), 12).tobytes())
    return h.hexdigest()


def estimate_anchors(dataset, target_count: int = DEFAULT_ANCHOR_COUNT) -> AnchorSet:
    """Bisect the Mean Shift bandwidth until exactly ``target_count`` modes result."""
    pts = box_points(dataset)
    return anchors_from_points(pts, target_count, dataset_hash(dataset))


def anchors_from_points(pts, target_count: int = DEFAULT_ANCHOR_COUNT, data_hash: str = "") -> AnchorSet:
    pts = _check_points(pts)
    if len(pts) < target_count:
        raise ValidationError(f"{len(pts)} boxes cannot yield {target_count} anchors")
    lo, hi = BANDWIDTH_RANGE
    seen: dict[int, float] = {}

    def count(bw):
        res = mean_shift(pts, bw)
        seen[len(res.modes)] = bw
        return res

    res_lo = count(lo)
    res_hi = count(hi)
    found = None
    if len(res_lo.modes) == target_count:
        found = (lo, res_lo)
    elif len(res_hi.modes) == target_count:
        found = (hi, res_hi)
    elif len(res_lo.modes) < target_count or len(res_hi.modes) > target_count:
        raise RibCascadeError(
            f"cannot bracket {target_count} modes; achievable counts {sorted(seen)}"
        )
    else:
        for _ in range(MAX_BISECTIONS):
            mid = 0.5 * (lo + hi)
            res = count(mid)
            n = len(res.modes)
            if n == target_count:
                found = (mid, res)
                break
            if n > target_count:
                lo = mid
            else:
                hi = mid
    if found is None:
        raise RibCascadeError(
            f"bandwidth bisection did not reach {target_count} modes; "
            f"achievable counts {sorted(seen)}"
        )
    bw, res = _center_on_plateau(count, found, *BANDWIDTH_RANGE, target_count)
    log.info("mean shift bandwidth %.6g gives %d modes", bw, target_count)
    return _anchor_set(res.modes, bw, data_hash, target_count)


def _center_on_plateau(count, found, lo, hi, target, rel_tol=1e-3):
    """Move to the middle of the bandwidth interval that yields ``target`` modes.

    A bandwidth sitting at the edge of its plateau can owe its mode count to
    one split cluster balancing one merged pair; the plateau center does not.
    ``lo`` gives more and ``hi`` fewer modes than ``target`` (when not equal).
    """
    bw, res = found
    a, b = lo, bw
    while b - a > rel_tol * b:
        mid = 0.5 * (a + b)
        if len(count(mid).modes) == target:
            b = mid
        else:
            a = mid
    lower = b
    a, b = bw, hi
    while b - a > rel_tol * b:
        mid = 0.5 * (a + b)
        if len(count(mid).modes) == target:
            a = mid
        else:
            b = mid
    upper = a
    center = 0.5 * (lower + upper)
    res_c = count(center)
    if len(res_c.modes) == target:
        return center, res_c
    return bw, res


def _anchor_set(modes: np.ndarray, bandwidth: float, data_hash: str, count: int) -> AnchorSet:
    order = np.lexsort((modes[:, 0], modes[:, 1]))
    boxes = []
    for cx, cy, w, h in modes[order]:
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
        boxes.append(NormalizedBox(x0, y0, x1, y1))
    return AnchorSet(boxes, float(bandwidth), data_hash, expected_count=count)


def save_anchors(anchors: AnchorSet, path):
    doc = {
        "count": len(anchors.boxes),
        "bandwidth": anchors.bandwidth,
        "boxes": [list(b.as_tuple()) for b in anchors.boxes],
        "dataset_hash": anchors.dataset_hash,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_anchors(path, expected_count: int | None = None) -> AnchorSet:
    """Load and validate an anchor file.

    ``expected_count`` defaults to the file's own ``count`` field, which must
    match the number of boxes.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: cannot read anchor file: {exc}") from exc
    if not isinstance(doc, dict) or "boxes" not in doc:
        raise ValidationError(f"{path}: missing 'boxes'")
    count = expected_count if expected_count is not None else doc.get("count", DEFAULT_ANCHOR_COUNT)
    raw = doc["boxes"]
    if len(raw) != count:
        raise ValidationError(f"{path}: expected {count} boxes, found {len(raw)}")
    boxes = []
    for i, entry in enumerate(raw):
        try:
            if len(entry) != 4:
                raise ValidationError("needs 4 coordinates")
            boxes.append(NormalizedBox(*(float(v) for v in entry)))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: invalid box at entry {i}: {exc}") from exc
    try:
        bandwidth = float(doc.get("bandwidth", float("nan")))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad bandwidth") from exc
    return AnchorSet(boxes, bandwidth, str(doc.get("dataset_hash", "")), expected_count=count)
