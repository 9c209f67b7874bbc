"""Deterministic synthetic scenes with exact face and gaze ground truth.

Faces are bright anti-aliased ellipses with two eye disks; the pupil
offset inside each eye is a fixed linear code of the true gaze direction,
so the mapping from image to gaze is exact and recomputable. Per-person
affine parameters turn an on-screen target into that person's gaze
vector, which is what individual calibration later has to undo.

Rendering is a pure function of (scene, t): the per-frame noise stream is
seeded from (scene.seed, t), so identical seeds reproduce identical bytes.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .gaze import CROP_SIZE, extract_crop

BACKGROUND = 0.10
FACE_SHADE = 0.72
SCLERA_SHADE = 0.95
PUPIL_SHADE = 0.06
MOUTH_SHADE = 0.25

EYE_OFFSET_X = 0.42   # of face radius
EYE_OFFSET_Y = -0.35
SCLERA_RADIUS = 0.28
PUPIL_RADIUS = 0.11
PUPIL_GAIN = 0.30     # pupil offset in face radii per unit gaze component
FACE_ASPECT = 1.2     # ellipse vertical semi-axis / radius


@dataclass
class PersonSpec:
    base: tuple[float, float]
    radius: float
    gaze_gain: tuple[float, float] = (0.9, 0.9)
    gaze_bias: tuple[float, float] = (0.0, 0.0)
    move_amp: tuple[float, float] = (0.0, 0.0)
    move_freq: tuple[float, float] = (0.011, 0.007)
    move_phase: tuple[float, float] = (0.0, 0.0)

    def center_at(self, t: int) -> tuple[float, float]:
        ax, ay = self.move_amp
        fx, fy = self.move_freq
        px, py = self.move_phase
        return (self.base[0] + ax * math.sin(2 * math.pi * fx * t + px),
                self.base[1] + ay * math.sin(2 * math.pi * fy * t + py))

    def gaze_vector(self, target_uv: tuple[float, float]) -> tuple[float, float, float]:
        """Unit gaze for looking at screen point (u, v); z points away from the screen."""
        u, v = target_uv
        gx = self.gaze_gain[0] * (u - 0.5) + self.gaze_bias[0]
        gy = self.gaze_gain[1] * (v - 0.5) + self.gaze_bias[1]
        sq = 1.0 - gx * gx - gy * gy
        if sq <= 0:
            raise ValueError(f"gaze code leaves the unit sphere for target {target_uv}")
        return (gx, gy, -math.sqrt(sq))


@dataclass
class FaceTruth:
    bbox: tuple[float, float, float, float]
    center: tuple[float, float]
    eye_mid: tuple[float, float]
    radius: float
    target_uv: tuple[float, float]
    vec: tuple[float, float, float]
    overlapped: bool = False


@dataclass
class FrameTruth:
    faces: list[FaceTruth] = field(default_factory=list)
    # off-scale unlabeled faces drawn as hard negatives: (cx, cy, radius)
    hard_faces: list[tuple[float, float, float]] = field(default_factory=list)


@dataclass
class SyntheticScene:
    seed: int
    width: int = 160
    height: int = 120
    persons: list[PersonSpec] = field(default_factory=list)
    pixel_noise: float = 2.5 / 255.0
    click_schedule: list[tuple[float, float]] = field(default_factory=list)
    hold_frames: int = 4

    def group_target(self, t: int) -> tuple[float, float]:
        """Shared gaze target: the click schedule first, then a smooth sweep."""
        idx = t // self.hold_frames if self.hold_frames else len(self.click_schedule)
        if idx < len(self.click_schedule):
            return self.click_schedule[idx]
        u = 0.5 + 0.38 * math.sin(2 * math.pi * t / 97.0 + 0.7)
        v = 0.5 + 0.38 * math.sin(2 * math.pi * t / 61.0 + 2.1)
        return (u, v)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _blend_disk(canvas, yy, xx, cx, cy, rad, shade) -> None:
    dist = np.hypot(xx - cx, yy - cy)
    alpha = np.clip(rad - dist + 0.5, 0.0, 1.0)
    np.copyto(canvas, canvas * (1 - alpha) + shade * alpha)


def _blend_ellipse(canvas, yy, xx, cx, cy, rx, ry, shade) -> None:
    rho = np.hypot((xx - cx) / rx, (yy - cy) / ry)
    alpha = np.clip((1.0 - rho) * min(rx, ry) + 0.5, 0.0, 1.0)
    np.copyto(canvas, canvas * (1 - alpha) + shade * alpha)


def _blend_bar(canvas, yy, xx, cx, cy, half_w, half_h, shade) -> None:
    inside_x = np.clip(half_w - np.abs(xx - cx) + 0.5, 0.0, 1.0)
    inside_y = np.clip(half_h - np.abs(yy - cy) + 0.5, 0.0, 1.0)
    alpha = inside_x * inside_y
    np.copyto(canvas, canvas * (1 - alpha) + shade * alpha)


def draw_face(canvas, yy, xx, cx: float, cy: float, r: float,
              vec: tuple[float, float, float]) -> None:
    """One face: ellipse, mouth, two eyes with gaze-coded pupil offsets."""
    _blend_ellipse(canvas, yy, xx, cx, cy, r, r * FACE_ASPECT, FACE_SHADE)
    _blend_bar(canvas, yy, xx, cx, cy + 0.55 * r, 0.35 * r, 0.08 * r, MOUTH_SHADE)
    px = vec[0] * PUPIL_GAIN * r
    py = vec[1] * PUPIL_GAIN * r
    for side in (-1.0, 1.0):
        ex = cx + side * EYE_OFFSET_X * r
        ey = cy + EYE_OFFSET_Y * r
        _blend_disk(canvas, yy, xx, ex, ey, SCLERA_RADIUS * r, SCLERA_SHADE)
        _blend_disk(canvas, yy, xx, ex + px, ey + py, PUPIL_RADIUS * r, PUPIL_SHADE)


def face_bbox(cx: float, cy: float, r: float) -> tuple[float, float, float, float]:
    return (cx - r, cy - FACE_ASPECT * r, 2 * r, 2 * FACE_ASPECT * r)


def eye_mid(cx: float, cy: float, r: float) -> tuple[float, float]:
    return (cx, cy + EYE_OFFSET_Y * r)


def _draw_distractor(canvas, yy, xx, rng: np.random.Generator, w: int, h: int) -> None:
    kind = rng.integers(0, 3)
    cx = float(rng.uniform(10, w - 10))
    cy = float(rng.uniform(10, h - 10))
    size = float(rng.uniform(8, 22))
    shade = float(rng.uniform(0.5, 0.9))
    if kind == 0:
        _blend_ellipse(canvas, yy, xx, cx, cy, size, size * rng.uniform(0.7, 1.4), shade)
    elif kind == 1:
        _blend_bar(canvas, yy, xx, cx, cy, size, size * rng.uniform(0.4, 1.0), shade)
    else:
        _blend_bar(canvas, yy, xx, cx, cy, size, 0.15 * size, shade)
        _blend_bar(canvas, yy, xx, cx, cy, 0.15 * size, size, shade)


def render_frame(scene: SyntheticScene, t: int) -> tuple[np.ndarray, FrameTruth]:
    """Grayscale uint8 frame plus exact per-face ground truth at time t."""
    if t < 0:
        raise ValueError("t must be >= 0")
    rng = np.random.default_rng([scene.seed, t])
    canvas = np.full((scene.height, scene.width), BACKGROUND, dtype=np.float64)
    yy, xx = _grid(scene.height, scene.width)

    target = scene.group_target(t)
    truth = FrameTruth()
    for person in scene.persons:
        cx, cy = person.center_at(t)
        vec = person.gaze_vector(target)
        draw_face(canvas, yy, xx, cx, cy, person.radius, vec)
        truth.faces.append(FaceTruth(
            bbox=face_bbox(cx, cy, person.radius),
            center=(cx, cy),
            eye_mid=eye_mid(cx, cy, person.radius),
            radius=person.radius,
            target_uv=target,
            vec=vec,
        ))
    _flag_overlaps(truth)
    if scene.pixel_noise > 0:
        canvas = canvas + rng.normal(0.0, scene.pixel_noise, canvas.shape)
    return np.clip(canvas * 255.0, 0, 255).astype(np.uint8), truth


def _flag_overlaps(truth: FrameTruth) -> None:
    from .detector import iou

    for i, a in enumerate(truth.faces):
        for b in truth.faces[i + 1:]:
            if iou(a.bbox, b.bbox) > 0:
                a.overlapped = True
                b.overlapped = True


def make_scene(seed: int, n_persons: int = 2, width: int = 160, height: int = 120,
               motion: float = 2.0, pixel_noise: float = 2.5 / 255.0,
               click_schedule: list[tuple[float, float]] | None = None,
               hold_frames: int = 4) -> SyntheticScene:
    """Evenly spaced persons with randomized radii and gaze codes."""
    rng = np.random.default_rng([seed, 7919])
    persons = []
    for k in range(n_persons):
        x = width * (k + 1) / (n_persons + 1)
        y = height * 0.5 + rng.uniform(-6, 6)
        persons.append(PersonSpec(
            base=(float(x), float(y)),
            radius=float(rng.uniform(17, 22)),
            gaze_gain=(float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.8, 1.0))),
            gaze_bias=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
            move_amp=(float(rng.uniform(0.3, 1.0) * motion),
                      float(rng.uniform(0.3, 1.0) * motion)),
            move_phase=(float(rng.uniform(0, 6.28)), float(rng.uniform(0, 6.28))),
        ))
    return SyntheticScene(seed=seed, width=width, height=height, persons=persons,
                          pixel_noise=pixel_noise,
                          click_schedule=click_schedule or [], hold_frames=hold_frames)


# --------------------------------------------------------------------------
# Corpora


@dataclass
class DetectionCorpus:
    frames: list[np.ndarray]
    truths: list[FrameTruth]
    train_idx: list[int]
    test_idx: list[int]


def gen_detection_corpus(n_frames: int, faces_per_frame: tuple[int, int],
                         seed: int, width: int = 160, height: int = 120,
                         noise: float = 3.0 / 255.0,
                         hard_negatives: bool = True) -> DetectionCorpus:
    """Random single-frame layouts with exact boxes; 80/20 split by frame.

    Training frames optionally carry unlabeled off-scale faces (too small
    or too large for the detector window) as hard negatives; held-out test
    frames never do, so precision/recall stay well-defined.
    """
    lo, hi = faces_per_frame
    order = list(np.random.default_rng([seed, 15485863]).permutation(n_frames))
    cut = int(round(n_frames * 0.8))
    test_set = {int(i) for i in order[cut:]}

    frames: list[np.ndarray] = []
    truths: list[FrameTruth] = []
    for i in range(n_frames):
        rng = np.random.default_rng([seed, 104729, i])
        canvas = np.full((height, width), BACKGROUND, dtype=np.float64)
        yy, xx = _grid(height, width)
        for _ in range(int(rng.integers(0, 3))):
            _draw_distractor(canvas, yy, xx, rng, width, height)
        truth = FrameTruth()
        centers: list[tuple[float, float, float]] = []
        k = int(rng.integers(lo, hi + 1))
        for _ in range(k):
            r = float(rng.uniform(16, 24))
            cx = float(rng.uniform(r + 2, width - r - 2))
            cy = float(rng.uniform(FACE_ASPECT * r + 2, height - FACE_ASPECT * r - 2))
            target = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
            person = PersonSpec(base=(cx, cy), radius=r,
                                gaze_gain=(float(rng.uniform(0.8, 1.0)),
                                           float(rng.uniform(0.8, 1.0))))
            vec = person.gaze_vector(target)
            draw_face(canvas, yy, xx, cx, cy, r, vec)
            centers.append((cx, cy, r))
            truth.faces.append(FaceTruth(
                bbox=face_bbox(cx, cy, r), center=(cx, cy),
                eye_mid=eye_mid(cx, cy, r), radius=r,
                target_uv=target, vec=vec))
        if hard_negatives and i not in test_set:
            truth.hard_faces = _draw_offscale_faces(
                canvas, yy, xx, rng, width, height, centers)
        _flag_overlaps(truth)
        canvas = canvas + rng.normal(0.0, noise, canvas.shape)
        frames.append(np.clip(canvas * 255.0, 0, 255).astype(np.uint8))
        truths.append(truth)

    return DetectionCorpus(frames=frames, truths=truths,
                           train_idx=sorted(int(i) for i in order[:cut]),
                           test_idx=sorted(test_set))


def _draw_offscale_faces(canvas, yy, xx, rng: np.random.Generator,
                         width: int, height: int,
                         centers: list[tuple[float, float, float]]
                         ) -> list[tuple[float, float, float]]:
    """Unlabeled faces outside the detector's size band (hard negatives)."""
    specs = []
    if rng.random() < 0.5:
        specs.append(float(rng.uniform(7, 12)))     # sub-window face
    if rng.random() < 0.4:
        specs.append(float(rng.uniform(32, 44)))    # over-window face
    drawn = []
    for r in specs:
        for _ in range(8):
            cx = float(rng.uniform(r + 2, width - r - 2))
            cy = float(rng.uniform(FACE_ASPECT * r + 2, height - FACE_ASPECT * r - 2))
            if all(np.hypot(cx - fx, cy - fy) > (r + fr) * 1.3
                   for fx, fy, fr in centers):
                person = PersonSpec(base=(cx, cy), radius=r)
                target = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
                draw_face(canvas, yy, xx, cx, cy, r, person.gaze_vector(target))
                centers.append((cx, cy, r))
                drawn.append((cx, cy, r))
                break
    return drawn


@dataclass
class GazeCorpus:
    crops: np.ndarray   # (N, 100, 100) float32 in [0, 1]
    starts: np.ndarray  # (N, 2) crop-normalized
    vecs: np.ndarray    # (N, 3) unit vectors


def gen_gaze_corpus(n_crops: int, seed: int, noise: float = 2.0 / 255.0) -> GazeCorpus:
    """Single-face crops extracted the way the pipeline would crop detections.

    The crop window is a square of 0.85-1.35x the face width with center
    jitter, mimicking the quantized boxes the detector produces.
    """
    crops = np.zeros((n_crops, CROP_SIZE, CROP_SIZE), dtype=np.float32)
    starts = np.zeros((n_crops, 2), dtype=np.float64)
    vecs = np.zeros((n_crops, 3), dtype=np.float64)
    size = 140
    for i in range(n_crops):
        rng = np.random.default_rng([seed, 32452843, i])
        canvas = np.full((size, size), BACKGROUND, dtype=np.float64)
        yy, xx = _grid(size, size)
        r = float(rng.uniform(16, 26))
        cx = size / 2 + float(rng.uniform(-4, 4))
        cy = size / 2 + float(rng.uniform(-4, 4))
        person = PersonSpec(base=(cx, cy), radius=r)
        target = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        vec = person.gaze_vector(target)
        draw_face(canvas, yy, xx, cx, cy, r, vec)
        canvas = canvas + rng.normal(0.0, noise, canvas.shape)
        frame = np.clip(canvas * 255.0, 0, 255).astype(np.uint8)

        edge = 2 * r * float(rng.uniform(0.85, 1.35))
        jx = float(rng.uniform(-0.08, 0.08)) * edge
        jy = float(rng.uniform(-0.08, 0.08)) * edge
        box = (cx - edge / 2 + jx, cy - edge / 2 + jy, edge, edge)
        crop = extract_crop(frame, box)
        bx, by, bw, bh = crop.source_bbox
        ex, ey = eye_mid(cx, cy, r)
        crops[i] = crop.pixels
        starts[i] = ((ex - bx) / bw, (ey - by) / bh)
        vecs[i] = vec
    return GazeCorpus(crops=crops, starts=starts, vecs=vecs)


# --------------------------------------------------------------------------
# Disk form: lossless grayscale images plus a label CSV


def save_detection_corpus(corpus: DetectionCorpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["file", "split", "face", "bb_x", "bb_y", "bb_w", "bb_h"])
        test = set(corpus.test_idx)
        for i, (frame, truth) in enumerate(zip(corpus.frames, corpus.truths)):
            name = f"frame_{i:05d}.png"
            Image.fromarray(frame, mode="L").save(os.path.join(out_dir, name))
            split = "test" if i in test else "train"
            if not truth.faces:
                writer.writerow([name, split, -1, "", "", "", ""])
            for j, face in enumerate(truth.faces):
                writer.writerow([name, split, j, *(repr(v) for v in face.bbox)])


def load_detection_corpus(out_dir: str) -> DetectionCorpus:
    by_file: dict[str, list] = {}
    splits: dict[str, str] = {}
    with open(os.path.join(out_dir, "labels.csv"), newline="") as f:
        for row in csv.DictReader(f):
            entries = by_file.setdefault(row["file"], [])
            if row["face"] != "-1":
                entries.append((float(row["bb_x"]), float(row["bb_y"]),
                                float(row["bb_w"]), float(row["bb_h"])))
            splits[row["file"]] = row["split"]
    frames, truths, train_idx, test_idx = [], [], [], []
    for i, name in enumerate(sorted(by_file)):
        frames.append(np.asarray(Image.open(os.path.join(out_dir, name)), dtype=np.uint8))
        truth = FrameTruth()
        for bbox in by_file[name]:
            x, y, w, h = bbox
            truth.faces.append(FaceTruth(
                bbox=bbox, center=(x + w / 2, y + h / 2),
                eye_mid=(0.0, 0.0), radius=w / 2, target_uv=(0.0, 0.0),
                vec=(0.0, 0.0, -1.0)))
        truths.append(truth)
        (test_idx if splits[name] == "test" else train_idx).append(i)
    return DetectionCorpus(frames=frames, truths=truths,
                           train_idx=train_idx, test_idx=test_idx)


def save_gaze_corpus(corpus: GazeCorpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["file", "sx", "sy", "gx", "gy", "gz"])
        for i in range(len(corpus.crops)):
            name = f"crop_{i:05d}.png"
            img = np.clip(corpus.crops[i] * 255.0, 0, 255).round().astype(np.uint8)
            Image.fromarray(img, mode="L").save(os.path.join(out_dir, name))
            writer.writerow([name, *(repr(float(v)) for v in corpus.starts[i]),
                             *(repr(float(v)) for v in corpus.vecs[i])])


# --------------------------------------------------------------------------
# Ground-truth-backed pipeline stand-ins (testing hooks)


class OracleFaceDetector:
    """Emits the rendered ground-truth boxes instead of running a network.

    `current_truth` must be set to the FrameTruth of the frame about to be
    processed; synthetic sources carry it alongside each frame.
    """

    def __init__(self) -> None:
        self.current_truth: FrameTruth | None = None

    def detect(self, frame, config=None):
        from .detector import Detection

        if self.current_truth is None:
            return []
        return [Detection(bbox=f.bbox, score=10.0) for f in self.current_truth.faces]


class OracleGazeEstimator:
    """Inverts the pupil code straight from the crop pixels.

    Eye centers are the bright-disk centroids of each crop half, pupils the
    dark centroids; their offset divided by the code gain recovers the gaze
    vector up to resampling error. Confidences are reported as certain.
    """

    def __init__(self, batch=None) -> None:
        from .gaze import BatchConfig

        self.batch_config = batch or BatchConfig()

    def estimate(self, batch: np.ndarray, mask: np.ndarray):
        out = []
        for i in range(len(mask)):
            if not mask[i]:
                continue
            out.append(self._decode(batch[i, 0]))
        return out

    def _decode(self, crop: np.ndarray):
        from .gaze import GazeSample

        h, w = crop.shape
        upper = crop[: int(h * 0.62)]
        eyes = []
        pupils = []
        for off in (0, w // 2):
            half = upper[:, off:off + w // 2]
            bright = np.argwhere(half > 0.85)
            dark = np.argwhere(half < 0.30)
            if len(bright) == 0 or len(dark) == 0:
                return GazeSample(start=(0.5, 0.5), start_conf=0.0,
                                  vec=(0.0, 0.0, -1.0), vec_conf=0.0, valid=False)
            # weight pupil pixels by darkness, eye pixels by brightness
            bw_ = half[bright[:, 0], bright[:, 1]]
            dw_ = 0.30 - half[dark[:, 0], dark[:, 1]]
            eyes.append(((bright[:, 1] * bw_).sum() / bw_.sum() + off,
                         (bright[:, 0] * bw_).sum() / bw_.sum()))
            pupils.append(((dark[:, 1] * dw_).sum() / dw_.sum() + off,
                           (dark[:, 0] * dw_).sum() / dw_.sum()))
        (elx, ely), (erx, ery) = eyes
        eye_dist = math.hypot(erx - elx, ery - ely)
        if eye_dist < 1e-6:
            return GazeSample(start=(0.5, 0.5), start_conf=0.0,
                              vec=(0.0, 0.0, -1.0), vec_conf=0.0, valid=False)
        r_crop = eye_dist / (2 * EYE_OFFSET_X)
        dx = ((pupils[0][0] - elx) + (pupils[1][0] - erx)) / 2.0
        dy = ((pupils[0][1] - ely) + (pupils[1][1] - ery)) / 2.0
        gx = dx / (PUPIL_GAIN * r_crop)
        gy = dy / (PUPIL_GAIN * r_crop)
        sq = max(1e-9, 1.0 - gx * gx - gy * gy)
        gz = -math.sqrt(sq)
        norm = math.sqrt(gx * gx + gy * gy + gz * gz)
        start = (((elx + erx) / 2.0) / w, ((ely + ery) / 2.0) / h)
        return GazeSample(start=start, start_conf=0.999,
                          vec=(gx / norm, gy / norm, gz / norm),
                          vec_conf=0.999, valid=True)


def load_gaze_corpus(out_dir: str) -> GazeCorpus:
    rows = []
    with open(os.path.join(out_dir, "labels.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    n = len(rows)
    crops = np.zeros((n, CROP_SIZE, CROP_SIZE), dtype=np.float32)
    starts = np.zeros((n, 2), dtype=np.float64)
    vecs = np.zeros((n, 3), dtype=np.float64)
    for i, row in enumerate(sorted(rows, key=lambda r: r["file"])):
        img = Image.open(os.path.join(out_dir, row["file"]))
        crops[i] = np.asarray(img, dtype=np.float32) / 255.0
        starts[i] = (float(row["sx"]), float(row["sy"]))
        vecs[i] = (float(row["gx"]), float(row["gy"]), float(row["gz"]))
    return GazeCorpus(crops=crops, starts=starts, vecs=vecs)
