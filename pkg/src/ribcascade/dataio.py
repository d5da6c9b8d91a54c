"""Dataset types, resampling, affine augmentation, fold splitting and storage.

Dataset directory layout::

    <root>/<image_id>/image.png              16-bit grayscale
    <root>/<image_id>/masks/{left|right}_{i}.png   8-bit, 0/255
    <root>/<image_id>/meta.json              {"pixel_spacing_mm": float, "id": str}
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ValidationError

SIDES = ("left", "right")
RIB_INDICES = tuple(range(1, 10))
MIN_DIM = 64
MAX_ADJACENT_OVERLAP = 0.2
_MASK_NAME = re.compile(r"^(left|right)_(\d+)\.png$")


@dataclass(frozen=True, order=True)
class RibLabel:
    """Anatomical identity of a rib. ``side`` is the patient side."""

    side: str
    index: int

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValidationError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.index not in RIB_INDICES:
            raise ValidationError(f"rib index must be in 1..9, got {self.index}")

    @property
    def short(self) -> str:
        return f"{self.side[0].upper()}{self.index}"

    @property
    def stem(self) -> str:
        return f"{self.side}_{self.index}"

    @classmethod
    def parse(cls, text: str) -> "RibLabel":
        side, _, idx = text.partition("_")
        return cls(side, int(idx))


ALL_LABELS = tuple(RibLabel(s, i) for i in RIB_INDICES for s in SIDES)


@dataclass
class GrayImage:
    pixels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValidationError(f"image must be 2D, got shape {self.pixels.shape}")
        if min(self.pixels.shape) < MIN_DIM:
            raise ValidationError(f"image dims must be >= {MIN_DIM}, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError("image contains non-finite values")
        if not self.spacing > 0:
            raise ValidationError(f"pixel spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class AnnotatedImage:
    image: GrayImage
    annotations: dict[RibLabel, np.ndarray]
    id: str

    def __post_init__(self):
        self.annotations = {k: np.asarray(v, dtype=bool) for k, v in self.annotations.items()}

    def validate(self):
        """Raise ValidationError naming the image when an invariant is broken."""
        shape = self.image.shape
        for label, mask in self.annotations.items():
            if mask.shape != shape:
                raise ValidationError(f"{self.id}: mask {label.stem} has shape {mask.shape}, image {shape}")
            if not mask.any():
                raise ValidationError(f"{self.id}: mask {label.stem} is empty")
        for side in SIDES:
            for i in RIB_INDICES[:-1]:
                a = self.annotations.get(RibLabel(side, i))
                b = self.annotations.get(RibLabel(side, i + 1))
                if a is None or b is None:
                    continue
                inter = np.logical_and(a, b).sum()
                if inter > MAX_ADJACENT_OVERLAP * min(a.sum(), b.sum()):
                    raise ValidationError(f"{self.id}: ribs {side} {i} and {i + 1} overlap too much")
        return self

    def labels(self) -> list[RibLabel]:
        return sorted(self.annotations, key=lambda l: (l.index, l.side))


# ---------------------------------------------------------------- resampling


def _resample_array(arr: np.ndarray, out_shape: tuple[int, int], order: int) -> np.ndarray:
    """Pixel-center aligned resampling onto ``out_shape``."""
    sy = arr.shape[0] / out_shape[0]
    sx = arr.shape[1] / out_shape[1]
    rows = (np.arange(out_shape[0]) + 0.5) * sy - 0.5
    cols = (np.arange(out_shape[1]) + 0.5) * sx - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(arr.astype(np.float64), [rr, cc], order=order, mode="nearest")


def resample_to_spacing(item: AnnotatedImage, target_spacing: float = 1.0) -> AnnotatedImage:
    """Resample image (bilinear) and masks (nearest) to ``target_spacing`` mm."""
    spacing = item.image.spacing
    if math.isclose(spacing, target_spacing, rel_tol=1e-9):
        return item
    factor = spacing / target_spacing
    out_shape = tuple(int(round(d * factor)) for d in item.image.shape)
    if min(out_shape) < MIN_DIM:
        raise ValidationError(f"{item.id}: resampled size {out_shape} below {MIN_DIM} px")
    pixels = _resample_array(item.image.pixels, out_shape, order=1)
    masks = {}
    for label, mask in item.annotations.items():
        m = _resample_array(mask, out_shape, order=0) > 0.5
        if m.any():
            masks[label] = m
        else:
            warnings.warn(f"{item.id}: mask {label.stem} vanished on resampling; dropped")
    return AnnotatedImage(GrayImage(pixels, target_spacing), masks, item.id)


# -------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0  # pixels, +x = right
    ty: float = 0.0  # pixels, +y = down

    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.scale == 1.0 and self.tx == 0.0 and self.ty == 0.0


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_translation: float = 0.05  # fraction of each dimension


def sample_affine(rng: np.random.Generator, shape, cfg: AugmentConfig = AugmentConfig()) -> AffineParams:
    h, w = shape
    return AffineParams(
        rotation_deg=float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
        scale=float(rng.uniform(*cfg.scale_range)),
        tx=float(rng.uniform(-cfg.max_translation, cfg.max_translation) * w),
        ty=float(rng.uniform(-cfg.max_translation, cfg.max_translation) * h),
    )


def _inverse_map(params: AffineParams, shape):
    """Matrix and offset mapping output (row, col) to input (row, col)."""
    theta = math.radians(params.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    m = np.array([[c, -s], [s, c]]) / params.scale
    center = np.array([(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0])
    shift = np.array([params.ty, params.tx])
    offset = center - m @ (center + shift)
    return m, offset


def forward_point(params: AffineParams, shape, x: float, y: float) -> tuple[float, float]:
    """Where the continuous image point (x, y) lands under ``params``."""
    m, offset = _inverse_map(params, shape)
    # image point (x, y) lies at index coordinate (y - 0.5, x - 0.5)
    r, col = np.linalg.solve(m, np.array([y - 0.5, x - 0.5]) - offset)
    return float(col + 0.5), float(r + 0.5)


def warp_array(arr: np.ndarray, params: AffineParams, order: int) -> np.ndarray:
    if params.is_identity():
        return arr.copy()
    m, offset = _inverse_map(params, arr.shape)
    if order == 0:
        out = ndimage.affine_transform(arr.astype(np.float64), m, offset, order=0, mode="constant", cval=0.0)
        return out > 0.5
    return ndimage.affine_transform(arr, m, offset, order=order, mode="nearest")


def apply_affine(item: AnnotatedImage, params: AffineParams, extra: Mapping[str, np.ndarray] | None = None):
    """Warp image (bilinear) and masks (nearest) with one affine map.

    Masks emptied by the warp are dropped with a warning. When ``extra`` masks
    are given they are warped the same way and returned alongside.
    """
    pixels = warp_array(item.image.pixels, params, order=1)
    masks = {}
    for label, mask in item.annotations.items():
        m = warp_array(mask, params, order=0)
        if m.any():
            masks[label] = m
        else:
            warnings.warn(f"{item.id}: mask {label.stem} left the image under augmentation; dropped")
    out = AnnotatedImage(GrayImage(pixels, item.image.spacing), masks, item.id)
    if extra is None:
        return out
    return out, {k: warp_array(v, params, order=0) for k, v in extra.items()}


def augment_affine(item: AnnotatedImage, rng_seed, cfg: AugmentConfig = AugmentConfig()) -> AnnotatedImage:
    rng = np.random.default_rng(rng_seed)
    return apply_affine(item, sample_affine(rng, item.image.shape, cfg))


# ------------------------------------------------------------------- folds


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]


def split_folds(ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle followed by round-robin fold assignment."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("image ids must be unique")
    if k < 1 or len(ids) < k:
        raise ValidationError(f"cannot split {len(ids)} images into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(k, {ids[j]: pos % k for pos, j in enumerate(perm)})


# ----------------------------------------------------------------- storage


def _encode_image(pixels: np.ndarray) -> Image.Image:
    q = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    return Image.fromarray(q)


def save_item(item: AnnotatedImage, root) -> Path:
    d = Path(root) / item.id
    (d / "masks").mkdir(parents=True, exist_ok=True)
    _encode_image(item.image.pixels).save(d / "image.png")
    for label, mask in sorted(item.annotations.items()):
        Image.fromarray(mask.astype(np.uint8) * 255).save(d / "masks" / f"{label.stem}.png")
    meta = {"pixel_spacing_mm": item.image.spacing, "id": item.id}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return d


def save_dataset(dataset: Iterable[AnnotatedImage], root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for item in dataset:
        save_item(item, root)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def load_item(d, validate: bool = True) -> AnnotatedImage:
    d = Path(d)
    image_id = d.name
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise ValidationError(f"{image_id}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        spacing = float(meta["pixel_spacing_mm"])
        image_id = str(meta.get("id", image_id))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{image_id}: bad metadata in {meta_path}: {exc}") from exc
    img_path = d / "image.png"
    if not img_path.is_file():
        raise ValidationError(f"{image_id}: missing {img_path}")
    raw = _read_png(img_path)
    if raw.ndim != 2:
        raise ValidationError(f"{image_id}: {img_path} is not single-channel")
    scale = 65535.0 if raw.dtype == np.uint16 or raw.max() > 255 else 255.0
    image = GrayImage(raw.astype(np.float64) / scale, spacing)
    masks = {}
    mask_dir = d / "masks"
    if mask_dir.is_dir():
        for p in sorted(mask_dir.iterdir()):
            match = _MASK_NAME.match(p.name)
            if not match:
                continue
            try:
                label = RibLabel(match.group(1), int(match.group(2)))
            except ValidationError as exc:
                raise ValidationError(f"{image_id}: {p}: {exc}") from exc
            arr = _read_png(p)
            values = set(np.unique(arr).tolist())
            if not values <= {0, 1, 255}:
                raise ValidationError(f"{image_id}: {p} is not binary (values {sorted(values)[:5]})")
            if arr.shape != image.shape:
                raise ValidationError(f"{image_id}: {p} shape {arr.shape} does not match image {image.shape}")
            masks[label] = arr > 0
    item = AnnotatedImage(image, masks, image_id)
    return item.validate() if validate else item


def list_items(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir())


def load_dataset(root, validate: bool = True) -> list[AnnotatedImage]:
    return [load_item(d, validate) for d in list_items(root)]
