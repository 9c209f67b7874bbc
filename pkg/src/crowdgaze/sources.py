"""Frame producers: camera, video file, or the synthetic world.

Every source yields monotonically timestamped RGB frames. File and
synthetic sources are deterministic; synthetic frames also carry the
ground truth used by the oracle pipeline stand-ins.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .synth import FrameTruth, SyntheticScene, render_frame


@dataclass
class Frame:
    index: int
    ts_ms: float
    rgb: np.ndarray  # (H, W, 3) uint8
    truth: FrameTruth | None = None


class SyntheticSource:
    """Replays a synthetic scene at a fixed logical frame rate."""

    def __init__(self, scene: SyntheticScene, fps: float = 30.0,
                 n_frames: int | None = None):
        self.scene = scene
        self.fps = fps
        self.n_frames = n_frames

    def frames(self):
        t = 0
        while self.n_frames is None or t < self.n_frames:
            gray, truth = render_frame(self.scene, t)
            rgb = np.repeat(gray[:, :, None], 3, axis=2)
            yield Frame(index=t, ts_ms=t * 1000.0 / self.fps, rgb=rgb, truth=truth)
            t += 1


class VideoFileSource:
    """Reads a video file; timestamps follow the container frame rate."""

    def __init__(self, path: str):
        self.path = path

    def frames(self):
        import cv2

        cap = cv2.VideoCapture(self.path)
        if not cap.isOpened():
            raise IOError(f"cannot open video file {self.path!r}")
        fps = cap.get(cv2.CAP_PROP_FPS) or 30.0
        index = 0
        try:
            while True:
                ok, bgr = cap.read()
                if not ok:
                    break
                yield Frame(index=index, ts_ms=index * 1000.0 / fps,
                            rgb=bgr[:, :, ::-1].copy())
                index += 1
        finally:
            cap.release()


class CameraSource:
    """Live capture from a local camera device."""

    def __init__(self, camera_index: int = 0):
        self.camera_index = camera_index

    def frames(self):
        import cv2

        cap = cv2.VideoCapture(self.camera_index)
        if not cap.isOpened():
            raise IOError(f"cannot open camera {self.camera_index}")
        index = 0
        t0 = time.monotonic()
        try:
            while True:
                ok, bgr = cap.read()
                if not ok:
                    break
                yield Frame(index=index, ts_ms=(time.monotonic() - t0) * 1000.0,
                            rgb=bgr[:, :, ::-1].copy())
                index += 1
        finally:
            cap.release()
