"""Fully-convolutional face detection over the packed image pyramid.

The score network downsamples by 8 (three stride-2 stages) and emits one
logit per 8x8 cell. Every cell above threshold becomes a fixed-size
candidate box at the cell center, mapped back through the level scale and
the user upscale factor, then de-duplicated with greedy NMS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops import bilinear_resize
from .nn import BatchNorm2d, Conv2d, ReLUTensorNorm, Sequential
from .pyramid import build_pyramid

SCORE_STRIDE = 8


@dataclass
class Detection:
    bbox: tuple[float, float, float, float]  # x, y, w, h in original frame pixels
    score: float
    level: int = 0

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return x + w / 2.0, y + h / 2.0


@dataclass
class DetectorConfig:
    score_threshold: float = 0.0
    nms_iou_threshold: float = 0.4
    upscale_factor: float = 1.0
    window_size: float = 40.0

    def __post_init__(self) -> None:
        if self.upscale_factor < 1.0:
            raise ValueError(f"upscale factor must be >= 1, got {self.upscale_factor}")
        if not 0.0 < self.nms_iou_threshold < 1.0:
            raise ValueError(
                f"nms iou threshold must be in (0, 1), got {self.nms_iou_threshold}")


def build_detector_net(rng: np.random.Generator | None = None) -> Sequential:
    """Score network: three downscaling conv stages, three same-size stages,
    then a single-depth 7x7 scoring conv."""
    rng = rng or np.random.default_rng(0)
    return Sequential([
        Conv2d(3, 8, 5, stride=2, rng=rng), BatchNorm2d(8), ReLUTensorNorm(),
        Conv2d(8, 8, 3, stride=2, rng=rng), BatchNorm2d(8), ReLUTensorNorm(),
        Conv2d(8, 8, 3, stride=2, rng=rng), BatchNorm2d(8), ReLUTensorNorm(),
        Conv2d(8, 16, 5, stride=1, rng=rng), BatchNorm2d(16), ReLUTensorNorm(),
        Conv2d(16, 16, 3, stride=1, rng=rng), BatchNorm2d(16), ReLUTensorNorm(),
        Conv2d(16, 16, 3, stride=1, rng=rng), BatchNorm2d(16), ReLUTensorNorm(),
        Conv2d(16, 1, 7, stride=1, rng=rng),
    ])


def iou(a: tuple[float, float, float, float],
        b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy by descending score; survivors have pairwise IoU < threshold."""
    ordered = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep: list[Detection] = []
    for i in ordered:
        if all(iou(dets[i].bbox, k.bbox) < iou_threshold for k in keep):
            keep.append(dets[i])
    return keep


def score_map_cells_to_boxes(scores: np.ndarray, level_scale: tuple[float, float],
                             upscale: float, window_size: float, threshold: float,
                             level_index: int) -> list[Detection]:
    """Turn one level's (Hc, Wc) logit map into original-frame candidate boxes.

    Cell (cx, cy) maps to center ((cx+0.5)*8, (cy+0.5)*8) in level pixels;
    the box edge is `window_size` at level scale. Division by the level
    scale and then the upscale factor returns to original coordinates.
    """
    sx, sy = level_scale
    ys, xs = np.nonzero(scores > threshold)
    out = []
    for cy, cx in zip(ys, xs):
        center_x = (cx + 0.5) * SCORE_STRIDE
        center_y = (cy + 0.5) * SCORE_STRIDE
        ox = (center_x / sx - window_size / sx / 2.0) / upscale
        oy = (center_y / sy - window_size / sy / 2.0) / upscale
        ow = window_size / sx / upscale
        oh = window_size / sy / upscale
        out.append(Detection(bbox=(ox, oy, ow, oh),
                             score=float(scores[cy, cx]),
                             level=level_index))
    return out


class FaceDetector:
    """Pyramid + score network + NMS, honoring the configured upscale factor."""

    def __init__(self, net: Sequential | None = None, config: DetectorConfig | None = None):
        self.net = net
        self.config = config or DetectorConfig()

    def score_level(self, tile: np.ndarray) -> np.ndarray:
        """(H, W, 3) float [0,1] tile -> (Hc, Wc) logits at stride 8."""
        x = tile.transpose(2, 0, 1)[None].astype(np.float32)
        return self.net.forward(x, training=False)[0, 0]

    def detect(self, frame: np.ndarray, config: DetectorConfig | None = None) -> list[Detection]:
        """All face boxes in an (H, W, 3) uint8 or float [0,1] frame, original coords."""
        cfg = config or self.config
        if self.net is None:
            raise RuntimeError("detector has no weights loaded")
        img = frame.astype(np.float32)
        if frame.dtype == np.uint8:
            img /= 255.0
        h, w = img.shape[:2]
        u = cfg.upscale_factor
        if u != 1.0:
            img = bilinear_resize(img, int(round(h * u)), int(round(w * u)))
        plan = build_pyramid(img)
        candidates: list[Detection] = []
        for i, level in enumerate(plan.levels):
            scores = self.score_level(plan.level_image(i))
            candidates.extend(score_map_cells_to_boxes(
                scores, (level.scale_x, level.scale_y), u,
                cfg.window_size, cfg.score_threshold, i))
        kept = nms(candidates, cfg.nms_iou_threshold)
        return [d for d in kept if _intersects_frame(d.bbox, w, h)]


def _intersects_frame(bbox: tuple[float, float, float, float], w: int, h: int) -> bool:
    x, y, bw, bh = bbox
    return x < w and y < h and x + bw > 0 and y + bh > 0
