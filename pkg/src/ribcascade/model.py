"""Per-rib detection and segmentation network.

Each :class:`RibNetwork` is bound to one rib index and serves both sides. It
sees a 3-channel stack (gray, gray, upper-neighbor mask), regresses a shift
and two side scores for every dedicated anchor, keeps the best-scoring
shifted anchor per side (no non-maximum suppression) and predicts a soft
mask inside it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .anchors import AnchorSet
from .dataio import SIDES, GrayImage, RibLabel
from .errors import RibCascadeError, ValidationError
from .geometry import SOFT_MASK_SIZE, NormalizedBox, PixelBox, box_from_mask, clip_box, normalize_box

SHIFT_CLAMP = 4.0
BACKBONES = ("tiny", "resnet50")
# det RoIs are the anchor box grown by these factors, for upper/lower context
CONTEXT_SCALE = (1.3, 2.0)


# ------------------------------------------------------------------- input


def build_input(img, upper_mask=None) -> np.ndarray:
    """Stack (gray, gray, upper-rib mask) into a float32 (3, H, W) array.

    Rib 1 has no upper neighbor; its third channel is all zeros.
    """
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    out = np.empty((3,) + pixels.shape, dtype=np.float32)
    out[0] = pixels
    out[1] = pixels
    if upper_mask is None:
        out[2] = 0.0
    else:
        upper = np.asarray(upper_mask)
        if upper.shape != pixels.shape:
            raise ValidationError(f"upper mask shape {upper.shape} does not match image {pixels.shape}")
        out[2] = upper.astype(bool)
    return out


# ------------------------------------------------------------- shift codec


def decode_shift(anchor: NormalizedBox, shift, image_shape) -> PixelBox:
    """Apply ``(dx, dy, dw, dh)`` to ``anchor`` and return the pixel box, clipped."""
    dx, dy, dw, dh = (float(v) for v in shift)
    if not all(math.isfinite(v) for v in (dx, dy, dw, dh)):
        raise ValidationError(f"non-finite shift {shift}")
    dw = min(max(dw, -SHIFT_CLAMP), SHIFT_CLAMP)
    dh = min(max(dh, -SHIFT_CLAMP), SHIFT_CLAMP)
    cx, cy, w, h = anchor.to_cxcywh()
    ncx, ncy = cx + dx * w, cy + dy * h
    nw, nh = w * math.exp(dw), h * math.exp(dh)
    height, width = image_shape
    raw = PixelBox((ncx - nw / 2) * width, (ncy - nh / 2) * height, (ncx + nw / 2) * width, (ncy + nh / 2) * height)
    clipped = clip_box(raw, image_shape)
    if clipped is None:
        # shifted completely off the image: keep a one-pixel box at the nearest border
        x = min(max(raw.x_min, 0.0), width - 1.0)
        y = min(max(raw.y_min, 0.0), height - 1.0)
        clipped = PixelBox(x, y, x + 1.0, y + 1.0)
    return clipped


def encode_shift(anchor: NormalizedBox, target: NormalizedBox) -> tuple[float, float, float, float]:
    cx, cy, w, h = anchor.to_cxcywh()
    tcx, tcy, tw, th = target.to_cxcywh()
    if tw <= 0 or th <= 0:
        raise ValidationError(f"degenerate target box {target.as_tuple()}")
    return ((tcx - cx) / w, (tcy - cy) / h, math.log(tw / w), math.log(th / h))


def encode_shift_tensor(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Vectorized :func:`encode_shift` on corner-format tensors (..., 4)."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    tw = targets[..., 2] - targets[..., 0]
    th = targets[..., 3] - targets[..., 1]
    dx = ((targets[..., 0] + targets[..., 2]) - (anchors[..., 0] + anchors[..., 2])) / (2 * aw)
    dy = ((targets[..., 1] + targets[..., 3]) - (anchors[..., 1] + anchors[..., 3])) / (2 * ah)
    return torch.stack([dx, dy, torch.log(tw / aw), torch.log(th / ah)], dim=-1)


# --------------------------------------------------------------- backbones


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(4, cout), nn.ReLU(inplace=True))


def standardize(x: torch.Tensor) -> torch.Tensor:
    """Zero-mean, unit-variance intensity channels per image; channel 2 is left as is."""
    img = x[:, :2]
    mean = img.mean(dim=(1, 2, 3), keepdim=True)
    std = img.std(dim=(1, 2, 3), keepdim=True).clamp_min(1e-3)
    return torch.cat([(img - mean) / std, x[:, 2:]], 1)


class TinyBackbone(nn.Module):
    """Four stride-2 conv stages with top-down pyramid fusion."""

    def __init__(self, width: int = 16, fpn_channels: int = 32):
        super().__init__()
        c = [width, 2 * width, 3 * width, 4 * width]
        self.stages = nn.ModuleList(
            [
                _conv(3, c[0], 2),
                nn.Sequential(_conv(c[0], c[1], 2), _conv(c[1], c[1])),
                nn.Sequential(_conv(c[1], c[2], 2), _conv(c[2], c[2])),
                nn.Sequential(_conv(c[2], c[3], 2), _conv(c[3], c[3])),
            ]
        )
        self.lateral = nn.ModuleList([nn.Conv2d(ci, fpn_channels, 1) for ci in c[1:]])
        self.smooth = nn.Conv2d(fpn_channels, fpn_channels, 3, 1, 1)
        self.det_channels = fpn_channels
        self.det_scale = 1 / 4
        self.mask_channels = c[0] + fpn_channels
        self.global_channels = fpn_channels

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        c1, c2, c3, c4 = feats
        p4 = self.lateral[2](c4)
        p3 = self.lateral[1](c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        p2 = self.lateral[0](c2) + F.interpolate(p3, size=c2.shape[-2:], mode="nearest")
        p2 = F.relu(self.smooth(p2))
        return {"det": p2, "mask": [(c1, 1 / 2), (p2, 1 / 4)], "global": p4}


class ResNet50FPN(nn.Module):
    """50-layer residual network with a feature pyramid, same interface as TinyBackbone."""

    def __init__(self, fpn_channels: int = 256):
        super().__init__()
        from torchvision.models import resnet50
        from torchvision.ops import FeaturePyramidNetwork

        body = resnet50(weights=None)
        cache = os.environ.get("RIBCASCADE_CACHE")
        if cache and (Path(cache) / "resnet50.pth").is_file():
            body.load_state_dict(torch.load(Path(cache) / "resnet50.pth", map_location="cpu"), strict=False)
        self.stem = nn.Sequential(body.conv1, body.bn1, body.relu, body.maxpool)
        self.layers = nn.ModuleList([body.layer1, body.layer2, body.layer3, body.layer4])
        self.fpn = FeaturePyramidNetwork([256, 512, 1024, 2048], fpn_channels)
        self.det_channels = fpn_channels
        self.det_scale = 1 / 4
        self.mask_channels = fpn_channels
        self.global_channels = fpn_channels

    def forward(self, x):
        x = self.stem(x)
        feats = {}
        for i, layer in enumerate(self.layers):
            x = layer(x)
            feats[str(i)] = x
        p = self.fpn(feats)
        return {"det": p["0"], "mask": [(p["0"], 1 / 4)], "global": p["3"]}


def make_backbone(name: str) -> nn.Module:
    if name == "tiny":
        return TinyBackbone()
    if name == "resnet50":
        return ResNet50FPN()
    raise ValidationError(f"unknown backbone {name!r}; choose from {BACKBONES}")


# ----------------------------------------------------------------- network


class MaskHead(nn.Module):
    """Small encoder-decoder on RoI-aligned features, with RoI coordinate channels."""

    def __init__(self, cin: int, width: int = 32):
        super().__init__()
        self.enc1 = nn.Sequential(_conv(cin + 2, width), _conv(width, width))
        self.enc2 = _conv(width, 48)
        self.enc3 = _conv(48, 64)
        self.dec2 = _conv(64 + 48, 48)
        self.dec1 = _conv(48 + width, width)
        self.out = nn.Conv2d(width, 1, 1)

    def forward(self, x):
        n, _, s, _ = x.shape
        ramp = torch.linspace(-1.0, 1.0, s, dtype=x.dtype, device=x.device)
        coords = torch.stack(torch.meshgrid(ramp, ramp, indexing="ij")).expand(n, 2, s, s)
        e1 = self.enc1(torch.cat([x, coords], 1))
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="nearest"), e1], 1))
        return self.out(d1)[:, 0]


class RibNetwork(nn.Module):
    def __init__(self, rib_index: int, backbone: str = "tiny", anchor_count: int = 30, mask_size: int = SOFT_MASK_SIZE):
        super().__init__()
        if rib_index not in range(1, 10):
            raise ValidationError(f"rib index must be in 1..9, got {rib_index}")
        self.rib_index = rib_index
        self.backbone_name = backbone
        self.anchor_count = anchor_count
        self.mask_size = mask_size
        self.pool = 7
        self.backbone = make_backbone(backbone)
        det_in = self.backbone.det_channels * self.pool**2 + self.backbone.global_channels * 16 + anchor_count
        self.det_head = nn.Sequential(
            nn.LayerNorm(det_in),
            nn.Linear(det_in, 256), nn.LeakyReLU(0.1), nn.Linear(256, 128), nn.LeakyReLU(0.1)
        )
        # the anchor one-hot also feeds the outputs directly: a per-anchor prior
        self.shift_out = nn.Linear(128 + anchor_count, 4)
        self.score_out = nn.Linear(128 + anchor_count, 2)
        self.mask_head = MaskHead(3 + self.backbone.mask_channels)

    def zero_heads(self):
        """Make every shift, score and mask output identically zero (logit 0)."""
        for layer in (self.shift_out, self.score_out, self.mask_head.out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    @staticmethod
    def _rois(boxes: torch.Tensor) -> torch.Tensor:
        """(B, K, 4) boxes to roi_align's (B*K, 5) format."""
        b, k, _ = boxes.shape
        idx = torch.arange(b, dtype=boxes.dtype, device=boxes.device).repeat_interleave(k)
        return torch.cat([idx[:, None], boxes.reshape(-1, 4)], 1)

    def forward(self, x: torch.Tensor, anchors: torch.Tensor, mask_boxes: torch.Tensor | None = None):
        """Run the detection heads for all anchors and, optionally, the mask head.

        Args:
            x: (B, 3, H, W) input stacks.
            anchors: (A, 4) normalized corner boxes.
            mask_boxes: (B, K, 4) pixel boxes to predict masks in.

        Returns:
            dict with ``shift`` (B, A, 4), ``score_logits`` (B, A, 2), the
            backbone ``features`` and, when ``mask_boxes`` is given,
            ``mask_logits`` (B, K, S, S).
        """
        if x.shape[1] != 3:
            raise ValidationError(f"network input must have 3 channels, got {x.shape[1]}")
        if anchors.shape[0] != self.anchor_count:
            raise ValidationError(f"expected {self.anchor_count} anchors, got {anchors.shape[0]}")
        b, _, h, w = x.shape
        x = standardize(x)
        feats = self.backbone(x)
        scale = x.new_tensor([w, h, w, h])
        cx = 0.5 * (anchors[:, 0] + anchors[:, 2])
        cy = 0.5 * (anchors[:, 1] + anchors[:, 3])
        hw = 0.5 * (anchors[:, 2] - anchors[:, 0]) * CONTEXT_SCALE[0]
        hh = 0.5 * (anchors[:, 3] - anchors[:, 1]) * CONTEXT_SCALE[1]
        ctx = torch.stack([cx - hw, cy - hh, cx + hw, cy + hh], 1) * scale
        a = anchors.shape[0]
        rois = self._rois(ctx.expand(b, a, 4))
        pooled = roi_align(feats["det"], rois, self.pool, spatial_scale=self.backbone.det_scale, sampling_ratio=2, aligned=True)
        glob = F.adaptive_avg_pool2d(feats["global"], 4).flatten(1)
        onehot = torch.eye(a, dtype=x.dtype, device=x.device)
        z = torch.cat(
            [pooled.flatten(1), glob.repeat_interleave(a, 0), onehot.repeat(b, 1)], 1
        )
        z = torch.cat([self.det_head(z), onehot.repeat(b, 1)], 1)
        out = {
            "shift": self.shift_out(z).view(b, a, 4),
            "score_logits": self.score_out(z).view(b, a, 2),
            "features": feats,
            "input": x,
        }
        if mask_boxes is not None:
            out["mask_logits"] = self.predict_masks(out, mask_boxes)
        return out

    def predict_masks(self, out: dict, boxes: torch.Tensor) -> torch.Tensor:
        b, k, _ = boxes.shape
        rois = self._rois(boxes)
        s = self.mask_size
        levels = [(out["input"], 1.0)] + out["features"]["mask"]
        pooled = [roi_align(f, rois, s, spatial_scale=sc, sampling_ratio=2, aligned=True) for f, sc in levels]
        return self.mask_head(torch.cat(pooled, 1)).view(b, k, s, s)


# --------------------------------------------------------------- inference


@dataclass
class Detection:
    label: RibLabel
    box: PixelBox
    score: float
    soft_mask: np.ndarray
    anchor_index: int = -1


def anchors_tensor(anchors: AnchorSet, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(anchors.as_array(), dtype=dtype)


@torch.no_grad()
def forward(net: RibNetwork, stack, anchors: AnchorSet) -> tuple[Detection, Detection]:
    """Best shifted anchor per side plus its soft mask: (left, right) detections."""
    if len(anchors) != net.anchor_count:
        raise ValidationError(f"expected {net.anchor_count} anchors, got {len(anchors)}")
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(stack), dtype=dtype)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValidationError(f"input stack must be (3, H, W), got {tuple(x.shape)}")
    was_training = net.training
    net.eval()
    try:
        out = net(x[None], anchors_tensor(anchors, dtype))
        shift = out["shift"][0]
        scores = torch.sigmoid(out["score_logits"][0])
        if not (torch.isfinite(shift).all() and torch.isfinite(scores).all()):
            raise RibCascadeError(f"rib {net.rib_index}: non-finite network output")
        shape = tuple(x.shape[-2:])
        picks, boxes = [], []
        for s in range(len(SIDES)):
            j = int(torch.argmax(scores[:, s]))
            box = decode_shift(anchors.boxes[j], shift[j].tolist(), shape)
            picks.append(j)
            boxes.append(box.as_tuple())
        masks = torch.sigmoid(net.predict_masks(out, torch.tensor([boxes], dtype=dtype)))[0]
        if not torch.isfinite(masks).all():
            raise RibCascadeError(f"rib {net.rib_index}: non-finite mask output")
    finally:
        net.train(was_training)
    return tuple(
        Detection(
            label=RibLabel(side, net.rib_index),
            box=PixelBox(*boxes[s]),
            score=float(scores[picks[s], s]),
            soft_mask=masks[s].numpy().astype(np.float64),
            anchor_index=picks[s],
        )
        for s, side in enumerate(SIDES)
    )


# ------------------------------------------------------------------- loss


@dataclass
class RibTargets:
    """Training targets for one image, sides ordered as :data:`SIDES`."""

    present: torch.Tensor  # (2,) bool
    positive: torch.Tensor  # (2,) long, positive anchor per side
    shift: torch.Tensor  # (2, 4)
    mask_boxes: torch.Tensor  # (2, 4) pixel boxes the mask targets are cropped to
    mask: torch.Tensor  # (2, S, S) binary


def _pairwise_box_dice(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    h = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return 2 * w * h / (area_a[:, None] + area_b[None, :])


def make_targets(masks: dict, image_shape, anchors: AnchorSet, mask_size: int = SOFT_MASK_SIZE, jitter: float = 0.0, rng=None) -> RibTargets:
    """Targets for one image from the GT masks of one rib index, keyed by side.

    The positive anchor of a side is the anchor with the highest box Dice
    against the GT box. ``jitter`` perturbs the mask RoI by that fraction of
    the box size so the mask head tolerates imperfect boxes.
    """
    h, w = image_shape
    present = torch.zeros(2, dtype=torch.bool)
    positive = torch.zeros(2, dtype=torch.long)
    shift = torch.zeros(2, 4, dtype=torch.float64)
    mask_boxes = torch.tensor([[0.0, 0.0, w, h]] * 2, dtype=torch.float64)
    mask_t = torch.zeros(2, mask_size, mask_size)
    anchor_px = anchors.as_array() * np.array([w, h, w, h])
    for s, side in enumerate(SIDES):
        m = masks.get(side)
        if m is None or not np.any(m):
            continue
        box = box_from_mask(m)
        gt = np.array(box.as_tuple())
        j = int(np.argmax(_pairwise_box_dice(gt[None], anchor_px)[0]))
        present[s] = True
        positive[s] = j
        shift[s] = torch.tensor(encode_shift(anchors.boxes[j], normalize_box(box, w, h)))
        roi = gt.copy()
        if jitter > 0:
            size = np.array([box.width, box.height, box.width, box.height])
            roi = roi + rng.uniform(-jitter, jitter, 4) * size
            roi[2] = max(roi[2], roi[0] + 1.0)
            roi[3] = max(roi[3], roi[1] + 1.0)
        mask_boxes[s] = torch.tensor(roi)
        crop = roi_align(
            torch.as_tensor(np.asarray(m, dtype=np.float32))[None, None],
            [torch.from_numpy(roi[None].astype(np.float32))],
            mask_size,
            spatial_scale=1.0,
            sampling_ratio=2,
            aligned=True,
        )[0, 0]
        mask_t[s] = (crop >= 0.5).float()
    return RibTargets(present, positive, shift, mask_boxes, mask_t)


@dataclass
class LossWeights:
    score: float = 1.0
    shift: float = 1.0
    mask: float = 1.0


def smooth_l1(x: torch.Tensor, beta: float = 1.0 / 9) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax**2 / beta, ax - 0.5 * beta)


def loss(out: dict, targets: list[RibTargets], weights: LossWeights = LossWeights()):
    """Score BCE + positive-anchor smooth-L1 shift loss + mask BCE.

    Components are averaged over the batch. The score term is the mean BCE
    over every (anchor, side) entry; the shift and mask terms average over the
    sides present in the GT. Returns ``(total, components)``.
    """
    score_logits = out["score_logits"]
    shift = out["shift"]
    mask_logits = out.get("mask_logits")
    b, a, _ = score_logits.shape
    dtype = score_logits.dtype
    score_terms, shift_terms, mask_terms = [], [], []
    for i, t in enumerate(targets):
        labels = torch.zeros(a, 2, dtype=dtype)
        for s in range(2):
            if t.present[s]:
                labels[t.positive[s], s] = 1.0
        score_terms.append(F.binary_cross_entropy_with_logits(score_logits[i], labels))
        sides = [s for s in range(2) if t.present[s]]
        if sides:
            diffs = torch.stack([shift[i, t.positive[s]] - t.shift[s].to(dtype) for s in sides])
            shift_terms.append(smooth_l1(diffs).sum(1).mean())
            if mask_logits is not None:
                per_side = [
                    F.binary_cross_entropy_with_logits(mask_logits[i, s], t.mask[s].to(dtype)) for s in sides
                ]
                mask_terms.append(torch.stack(per_side).mean())
    zero = score_logits.sum() * 0.0
    comp = {
        "score": torch.stack(score_terms).mean(),
        "shift": torch.stack(shift_terms).sum() / b if shift_terms else zero,
        "mask": torch.stack(mask_terms).sum() / b if mask_terms else zero,
    }
    total = weights.score * comp["score"] + weights.shift * comp["shift"] + weights.mask * comp["mask"]
    return total, comp


# ------------------------------------------------------------- checkpoints


def save_checkpoint(net: RibNetwork, directory, sidecar: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"rib_{net.rib_index}.ckpt"
    torch.save({k: v.detach().cpu() for k, v in net.state_dict().items()}, path)
    meta = {"rib_index": net.rib_index, "backbone": net.backbone_name, "anchor_count": net.anchor_count, "mask_size": net.mask_size}
    meta.update(sidecar)
    (d / f"rib_{net.rib_index}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory, rib_index: int) -> tuple[RibNetwork, dict]:
    d = Path(directory)
    ckpt = d / f"rib_{rib_index}.ckpt"
    side = d / f"rib_{rib_index}.json"
    if not ckpt.is_file() or not side.is_file():
        raise ValidationError(f"missing checkpoint for rib {rib_index} in {d}")
    meta = json.loads(side.read_text())
    net = RibNetwork(rib_index, meta.get("backbone", "tiny"), meta.get("anchor_count", 30), meta.get("mask_size", SOFT_MASK_SIZE))
    net.load_state_dict(torch.load(ckpt, map_location="cpu"))
    net.eval()
    return net, meta
