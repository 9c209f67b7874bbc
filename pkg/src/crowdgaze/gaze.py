"""Face crops, fixed-size padded batches, and the 7-output gaze network.

The network sees grayscale 100x100 crops and returns, per face: a gaze
start point (2), a start confidence (1), a 3D gaze direction (3) and a
direction confidence (1). Unused batch slots are filled with black images
so the tensor shape, and with it the inference cost, never depends on how
many faces are present.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops import bilinear_resize, rgb_to_luma
from .nn import (
    Conv2d,
    FullyConnected,
    LeakyMaxBlock,
    MaxPool2x2,
    ReLU,
    ReLUTensorNorm,
    Sequential,
)

CROP_SIZE = 100
DEFAULT_BATCH_SIZE = 40
GAZE_NET_WIDTHS = (32, 64, 128, 256)


@dataclass
class FaceCrop:
    pixels: np.ndarray  # (100, 100) float32 in [0, 1]
    source_bbox: tuple[float, float, float, float]
    person_slot: int = -1


@dataclass
class GazeSample:
    start: tuple[float, float]          # crop-normalized [0,1]^2
    start_conf: float
    vec: tuple[float, float, float]     # unit length
    vec_conf: float
    valid: bool = True
    person_id: int = -1
    frame_index: int = -1

    def features_frame(self, bbox: tuple[float, float, float, float],
                       frame_w: int, frame_h: int) -> tuple[float, ...]:
        """(sx, sy, gx, gy, gz) with the start in frame-normalized coords."""
        x, y, w, h = bbox
        sx = (x + self.start[0] * w) / frame_w
        sy = (y + self.start[1] * h) / frame_h
        return (sx, sy, *self.vec)


@dataclass
class BatchConfig:
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


def build_gaze_net(widths: tuple[int, int, int, int] = GAZE_NET_WIDTHS,
                   rng: np.random.Generator | None = None) -> Sequential:
    """Stem conv + pool, three stages of three leaky-max blocks, two FC heads."""
    rng = rng or np.random.default_rng(0)
    w0, w1, w2, w3 = widths
    layers = [
        Conv2d(1, w0, 5, stride=1, rng=rng), ReLUTensorNorm(), MaxPool2x2(),
        LeakyMaxBlock(w0, w1, stride=2, rng=rng),
        LeakyMaxBlock(w1, w1, stride=1, rng=rng),
        LeakyMaxBlock(w1, w1, stride=1, rng=rng),
        ReLUTensorNorm(),
        LeakyMaxBlock(w1, w2, stride=2, rng=rng),
        LeakyMaxBlock(w2, w2, stride=1, rng=rng),
        LeakyMaxBlock(w2, w2, stride=1, rng=rng),
        ReLUTensorNorm(),
        LeakyMaxBlock(w2, w3, stride=2, rng=rng),
        LeakyMaxBlock(w3, w3, stride=1, rng=rng),
        LeakyMaxBlock(w3, w3, stride=1, rng=rng),
        ReLUTensorNorm(),
        FullyConnected(w3 * 7 * 7, 512, rng=rng), ReLU(),
        FullyConnected(512, 7, rng=rng),
    ]
    return Sequential(layers)


def extract_crop(frame: np.ndarray, bbox: tuple[float, float, float, float]) -> FaceCrop:
    """Clamp bbox to the frame, resample to 100x100, luma-convert, scale to [0,1]."""
    h, w = frame.shape[:2]
    x, y, bw, bh = bbox
    x0 = max(0.0, x)
    y0 = max(0.0, y)
    x1 = min(float(w), x + bw)
    y1 = min(float(h), y + bh)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise ValueError(f"bbox {bbox} does not intersect the {w}x{h} frame")
    region = bilinear_resize(frame, CROP_SIZE, CROP_SIZE, box=(x0, y0, x1 - x0, y1 - y0))
    if region.ndim == 3:
        gray = rgb_to_luma(region)
    else:
        gray = region
    if frame.dtype == np.uint8:
        gray = gray / 255.0
    return FaceCrop(pixels=gray.astype(np.float32), source_bbox=(x0, y0, x1 - x0, y1 - y0))


def make_batch(crops: list[FaceCrop], batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(B,1,100,100) tensor plus boolean occupancy mask; padding slots stay black."""
    if len(crops) > batch_size:
        raise ValueError(
            f"{len(crops)} crops exceed batch size {batch_size}; chunk upstream")
    batch = np.zeros((batch_size, 1, CROP_SIZE, CROP_SIZE), dtype=np.float32)
    mask = np.zeros(batch_size, dtype=bool)
    for i, crop in enumerate(crops):
        batch[i, 0] = crop.pixels
        mask[i] = True
        crop.person_slot = i
    return batch, mask


def _logistic(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


def parse_outputs(raw: np.ndarray) -> GazeSample:
    """One 7-vector -> GazeSample; zero or non-finite raw vectors are flagged."""
    if not np.isfinite(raw).all():
        return GazeSample(start=(0.0, 0.0), start_conf=0.0,
                          vec=(0.0, 0.0, -1.0), vec_conf=0.0, valid=False)
    sx, sy, sc, gx, gy, gz, vc = (float(v) for v in raw)
    norm = float(np.sqrt(gx * gx + gy * gy + gz * gz))
    if norm < 1e-12:
        return GazeSample(start=(sx, sy), start_conf=_logistic(sc),
                          vec=(0.0, 0.0, -1.0), vec_conf=0.0, valid=False)
    return GazeSample(start=(sx, sy), start_conf=_logistic(sc),
                      vec=(gx / norm, gy / norm, gz / norm),
                      vec_conf=_logistic(vc), valid=True)


class GazeEstimator:
    """Runs the gaze network on fixed-size padded batches."""

    def __init__(self, net: Sequential | None = None,
                 batch: BatchConfig | None = None):
        self.net = net
        self.batch_config = batch or BatchConfig()

    def estimate(self, batch: np.ndarray, mask: np.ndarray) -> list[GazeSample]:
        """Samples for occupied slots, in slot order; padded slots are dropped."""
        if self.net is None:
            raise RuntimeError("gaze estimator has no weights loaded")
        raw = self.net.forward(batch, training=False)
        return [parse_outputs(raw[i]) for i in range(len(mask)) if mask[i]]

    def estimate_crops(self, crops: list[FaceCrop]) -> list[GazeSample]:
        batch, mask = make_batch(crops, self.batch_config.batch_size)
        return self.estimate(batch, mask)
