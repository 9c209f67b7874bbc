"""Pixel-level helpers shared by the pyramid and the face-crop path."""
from __future__ import annotations

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int,
                    box: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping.

    `box` = (x0, y0, w, h) samples that sub-rectangle of the source instead
    of the whole image; equal-size sampling of an integer-aligned box is an
    exact passthrough.
    """
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    else:
        squeeze = False
    src_h, src_w = img.shape[:2]
    if box is None:
        box = (0.0, 0.0, float(src_w), float(src_h))
    x0, y0, bw, bh = box

    xs = x0 + (np.arange(out_w, dtype=np.float64) + 0.5) * (bw / out_w) - 0.5
    ys = y0 + (np.arange(out_h, dtype=np.float64) + 0.5) * (bh / out_h) - 0.5
    xs = np.clip(xs, 0, src_w - 1)
    ys = np.clip(ys, 0, src_h - 1)

    xi = np.floor(xs).astype(np.int64)
    yi = np.floor(ys).astype(np.int64)
    xi1 = np.minimum(xi + 1, src_w - 1)
    yi1 = np.minimum(yi + 1, src_h - 1)
    fx = (xs - xi).astype(np.float32)[None, :, None]
    fy = (ys - yi).astype(np.float32)[:, None, None]

    img_f = img.astype(np.float32, copy=False)
    top = img_f[yi[:, None], xi[None, :]] * (1 - fx) + img_f[yi[:, None], xi1[None, :]] * fx
    bot = img_f[yi1[:, None], xi[None, :]] * (1 - fx) + img_f[yi1[:, None], xi1[None, :]] * fx
    out = top * (1 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """Fixed-weight luma; input (H,W,3) float, output (H,W) float."""
    r, g, b = LUMA_WEIGHTS
    return rgb[:, :, 0] * r + rgb[:, :, 1] * g + rgb[:, :, 2] * b
