"""Six-stage image pyramid packed into one canvas, with exact inverse mapping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imageops import bilinear_resize

PYRAMID_LEVELS = 6
PYRAMID_RATIO_NUM = 5
PYRAMID_RATIO_DEN = 6
MIN_LEVEL_SIDE = 16


@dataclass
class PyramidLevel:
    width: int
    height: int
    scale_x: float  # level width / original width
    scale_y: float
    offset_y: int   # tile origin row inside the packed canvas

    def to_original(self, x: float, y: float) -> tuple[float, float]:
        return x / self.scale_x, y / self.scale_y

    def from_original(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale_x, y * self.scale_y


@dataclass
class PyramidPlan:
    levels: list[PyramidLevel]
    canvas: np.ndarray  # (H, W, C) float32, levels stacked top to bottom
    truncated: bool = False
    tiles: list[np.ndarray] = field(default_factory=list)

    def level_image(self, i: int) -> np.ndarray:
        return self.tiles[i]


def build_pyramid(frame: np.ndarray, levels: int = PYRAMID_LEVELS,
                  min_side: int = MIN_LEVEL_SIDE) -> PyramidPlan:
    """Downscale `frame` by recursive floor(n * 5/6) into a packed plan.

    Level 0 is always emitted; deeper levels stop (and the plan is flagged
    truncated) once a side would drop under `min_side`.
    """
    if frame.size == 0:
        raise ValueError("empty frame")
    if frame.ndim == 2:
        frame = frame[:, :, None]
    h0, w0 = frame.shape[:2]
    frame_f = frame.astype(np.float32, copy=False)

    sizes = [(w0, h0)]
    truncated = False
    for _ in range(1, levels):
        pw, ph = sizes[-1]
        nw = (pw * PYRAMID_RATIO_NUM) // PYRAMID_RATIO_DEN
        nh = (ph * PYRAMID_RATIO_NUM) // PYRAMID_RATIO_DEN
        if nw < min_side or nh < min_side:
            truncated = True
            break
        sizes.append((nw, nh))

    tiles = [frame_f]
    for w, h in sizes[1:]:
        tiles.append(bilinear_resize(frame_f, h, w))

    total_h = sum(h for _, h in sizes)
    canvas = np.zeros((total_h, w0, frame.shape[2]), dtype=np.float32)
    level_meta = []
    y = 0
    for (w, h), tile in zip(sizes, tiles):
        canvas[y:y + h, :w] = tile
        level_meta.append(PyramidLevel(
            width=w, height=h,
            scale_x=w / w0, scale_y=h / h0,
            offset_y=y,
        ))
        y += h
    return PyramidPlan(levels=level_meta, canvas=canvas,
                       truncated=truncated, tiles=tiles)
