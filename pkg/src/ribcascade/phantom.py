"""Synthetic frontal chest phantoms with exact per-rib masks.

The phantom is deliberately crude: a torso intensity gradient, two darker
lung fields, a spine and nine rib bands per side drawn as parametric arcs.
Patient right is displayed on the image left, as on a PA radiograph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .dataio import AnnotatedImage, GrayImage, RibLabel
from .errors import ValidationError


@dataclass
class PhantomConfig:
    size: int = 256
    ribs_per_side: int = 9
    noise_sigma: float = 0.02
    seed_range: tuple[int, int] = (0, 200)
    pixel_spacing_mm: float = 1.0
    thickness_range: tuple[float, float] = (4.0, 9.0)
    # vertical distance between consecutive rib centerlines, at size 256
    spacing_range: tuple[float, float] = (17.0, 21.0)
    rib_contrast: float = 0.22

    def validate(self):
        if self.size < 64:
            raise ValidationError(f"phantom size must be >= 64, got {self.size}")
        if not 1 <= self.ribs_per_side <= 9:
            raise ValidationError(f"ribs_per_side must be in 1..9, got {self.ribs_per_side}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        lo_t, hi_t = self.thickness_range
        lo_s, hi_s = self.spacing_range
        if not (0 < lo_t <= hi_t and 0 < lo_s <= hi_s):
            raise ValidationError("thickness and spacing ranges must be positive and ordered")
        # the arcs are tilted, so the perpendicular gap is below the vertical one
        if lo_s * 0.8 - hi_t < 1.0:
            raise ValidationError(
                f"rib spacing {lo_s} too small for thickness up to {hi_t}: bands would overlap"
            )
        return self

    @classmethod
    def from_json(cls, path) -> "PhantomConfig":
        doc = json.loads(Path(path).read_text())
        for key in ("seed_range", "thickness_range", "spacing_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def _centerline(t, x_start, direction, length, y0, rise, drop):
    """Points of a rib centerline; ``t`` runs medial (0) to lateral (1)."""
    x = x_start + direction * length * t
    y = y0 - rise * np.sin(np.pi * t * 0.8) + drop * t**2
    return x, y


def generate_phantom(seed: int, config: PhantomConfig | None = None) -> AnnotatedImage:
    cfg = (config or PhantomConfig()).validate()
    rng = np.random.default_rng(seed)
    n = cfg.size
    k = n / 256.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    spine_x = n * rng.uniform(0.46, 0.54)
    top = n * rng.uniform(0.10, 0.15)
    spacing = k * rng.uniform(*cfg.spacing_range)
    growth = rng.uniform(0.0, 0.04)
    rise = k * rng.uniform(3.0, 9.0)
    drop = k * rng.uniform(10.0, 22.0)
    lung_w = n * rng.uniform(0.30, 0.36)

    # torso and lungs
    body = np.exp(-(((xx - spine_x) / (0.48 * n)) ** 6))
    img = 0.25 + 0.25 * body + 0.15 * (yy / n)
    lung_cy = top + 4.5 * spacing
    for direction in (-1, 1):
        lcx = spine_x + direction * (0.06 * n + 0.5 * lung_w)
        lung = ((xx - lcx) / (0.5 * lung_w)) ** 2 + ((yy - lung_cy) / (5.0 * spacing)) ** 2
        img -= 0.18 * ndimage.gaussian_filter((lung < 1).astype(float), 3.0 * k)
    spine = np.exp(-(((xx - spine_x) / (0.035 * n)) ** 2))
    img += 0.2 * spine

    masks: dict[RibLabel, np.ndarray] = {}
    bands = np.zeros((n, n))
    t = np.linspace(0.0, 1.0, 400)
    for side, direction in (("right", -1), ("left", 1)):
        side_offset = k * rng.uniform(-3.0, 3.0)
        owner = np.full((n, n), -1)
        best = np.full((n, n), np.inf)
        half = {}
        for i in range(1, cfg.ribs_per_side + 1):
            y0 = top + side_offset + (i - 1) * spacing * (1 + growth * (i - 1) / 8)
            length = lung_w * (0.55 + 0.45 * np.sin(np.pi * min(i, 7) / 14)) * rng.uniform(0.92, 1.05)
            x_start = spine_x + direction * 0.03 * n
            cx, cy = _centerline(t, x_start, direction, length, y0, rise * (0.6 + 0.08 * i), drop)
            thickness = k * rng.uniform(*cfg.thickness_range)
            half[i] = thickness / 2
            # distance from every pixel to the polyline, via its dense samples
            lo_x, hi_x = int(max(min(cx.min(), cx.max()) - thickness, 0)), int(min(max(cx.min(), cx.max()) + thickness + 1, n))
            lo_y, hi_y = int(max(cy.min() - thickness, 0)), int(min(cy.max() + thickness + 1, n))
            sub_x = xx[lo_y:hi_y, lo_x:hi_x]
            sub_y = yy[lo_y:hi_y, lo_x:hi_x]
            d, _ = cKDTree(np.column_stack([cx, cy])).query(np.column_stack([sub_x.ravel(), sub_y.ravel()]))
            d = d.reshape(sub_x.shape)
            region = best[lo_y:hi_y, lo_x:hi_x]
            inside = (d <= half[i]) & (d < region)
            region[inside] = d[inside]
            owner[lo_y:hi_y, lo_x:hi_x][inside] = i
        for i in range(1, cfg.ribs_per_side + 1):
            m = owner == i
            masks[RibLabel(side, i)] = m
            bands += m
    # slight blur so band edges are not pixel-sharp
    rib_layer = ndimage.gaussian_filter(bands, 0.8 * k)
    img += cfg.rib_contrast * rib_layer
    img += rng.normal(0.0, cfg.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 65535.0) / 65535.0
    return AnnotatedImage(GrayImage(img, cfg.pixel_spacing_mm), masks, f"phantom_{seed:05d}")


def generate_phantoms(seeds, config: PhantomConfig | None = None) -> list[AnnotatedImage]:
    return [generate_phantom(s, config) for s in seeds]
