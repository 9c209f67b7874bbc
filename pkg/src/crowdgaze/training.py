"""Desk-scale training for the detector and gaze networks on synthetic data.

Training is CPU-sized: reduced layer widths for the gaze net (the
architecture itself is unchanged), momentum SGD with gradient
centralization on conv banks, cosine learning-rate decay, fixed seeds
throughout.

The detector learns per-cell face-center classification on the stride-8
score map. Frames include unlabeled too-small and too-large faces as hard
negatives so each pyramid level only answers for window-sized faces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import DetectorConfig, FaceDetector, build_detector_net, iou
from .gaze import build_gaze_net, parse_outputs
from .nn import MomentumTrainer, Sequential, centralize_weights
from .synth import DetectionCorpus, GazeCorpus

SCORE_STRIDE = 8
DESK_GAZE_WIDTHS = (8, 12, 16, 24)

START_ERR_SCALE = 0.08   # crop units; confidence target exp(-err/scale)
VEC_ERR_SCALE = 0.15

# faces whose radius (at the input scale) sits in this band are positives;
# just outside it they are ignored, further out they are negatives
POSITIVE_BAND = (14.0, 26.0)
IGNORE_MARGIN = 2.5
LEVEL_PROBS = (0.40, 0.25, 0.20, 0.15)  # training pyramid level sampling


def _cosine_lr(step: int, total: int, lr0: float, warmup: int = 100,
               floor: float = 0.05) -> float:
    if step < warmup:
        return lr0 * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return lr0 * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def _init_centralized(net: Sequential) -> None:
    for _, layer, name, arr in net.named_params():
        if name.endswith("weight") and arr.ndim == 4:
            arr[...] = centralize_weights(arr)


# --------------------------------------------------------------------------
# Detector


def score_targets(face_lists, height: int, width: int, scale: float = 1.0
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell labels and loss weights for a batch of face lists.

    `face_lists` holds per-frame (cx, cy, radius) tuples in original frame
    coordinates; `scale` is the downscale factor applied to the images. A
    face whose scaled radius is inside POSITIVE_BAND makes the cell holding
    its scaled center positive (8 neighbors ignored); radii within
    IGNORE_MARGIN of the band are ignored entirely; anything further
    off-scale stays a negative.
    """
    hc = -(-height // SCORE_STRIDE)
    wc = -(-width // SCORE_STRIDE)
    n = len(face_lists)
    targets = np.zeros((n, 1, hc, wc), dtype=np.float32)
    weights = np.ones((n, 1, hc, wc), dtype=np.float32)
    lo, hi = POSITIVE_BAND
    for i, faces in enumerate(face_lists):
        for (cx, cy, radius) in faces:
            rs = radius * scale
            if rs < lo - IGNORE_MARGIN or rs > hi + IGNORE_MARGIN:
                continue
            jx, jy = int(cx * scale // SCORE_STRIDE), int(cy * scale // SCORE_STRIDE)
            if not (0 <= jx < wc and 0 <= jy < hc):
                continue
            y0, y1 = max(0, jy - 1), min(hc, jy + 2)
            x0, x1 = max(0, jx - 1), min(wc, jx + 2)
            weights[i, 0, y0:y1, x0:x1] = 0.0
            if lo <= rs <= hi:
                targets[i, 0, jy, jx] = 1.0
                weights[i, 0, jy, jx] = 25.0
    return targets, weights


def _all_faces(truth) -> list[tuple[float, float, float]]:
    faces = [(f.center[0], f.center[1], f.radius) for f in truth.faces]
    faces.extend(truth.hard_faces)
    return faces


def _bce_with_logits(logits, targets, weights):
    """Weighted mean BCE and its gradient wrt the logits."""
    z = logits
    loss = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    wsum = weights.sum()
    sig = 1.0 / (1.0 + np.exp(-z))
    grad = weights * (sig - targets) / wsum
    return float((weights * loss).sum() / wsum), grad.astype(np.float32)


@dataclass
class DetectorTrainResult:
    net: Sequential
    losses: list[float]


def train_detector(corpus: DetectionCorpus, seed: int = 0, epochs: int = 24,
                   batch_size: int = 8, lr: float = 0.05) -> DetectorTrainResult:
    rng = np.random.default_rng([seed, 555557])
    net = build_detector_net(rng=np.random.default_rng([seed, 3]))
    _init_centralized(net)
    trainer = MomentumTrainer(net, lr=lr, momentum=0.9, gc_enabled=True)

    idx = list(corpus.train_idx)
    height, width = corpus.frames[idx[0]].shape[:2]
    steps_per_epoch = max(1, len(idx) // batch_size)
    total = epochs * steps_per_epoch
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(idx))
        for b in range(steps_per_epoch):
            chosen = [idx[int(j)] for j in order[b * batch_size:(b + 1) * batch_size]]
            frames = np.stack([corpus.frames[j] for j in chosen]).astype(np.float32) / 255.0
            x = np.repeat(frames[:, None, :, :], 3, axis=1)
            targets, weights = score_targets([corpus.truths[j] for j in chosen],
                                             height, width)
            logits = net.forward(x, training=True)
            loss, dout = _bce_with_logits(logits, targets, weights)
            net.backward(dout)
            trainer.step(lr=_cosine_lr(step, total, lr))
            losses.append(loss)
            step += 1
    return DetectorTrainResult(net=net, losses=losses)


def evaluate_detector(net: Sequential, corpus: DetectionCorpus,
                      config: DetectorConfig | None = None,
                      iou_match: float = 0.5) -> dict:
    """Greedy IoU matching of detections to truth on the held-out frames."""
    detector = FaceDetector(net, config or DetectorConfig())
    tp = fp = fn = 0
    for j in corpus.test_idx:
        frame = np.repeat(corpus.frames[j][:, :, None], 3, axis=2)
        dets = detector.detect(frame)
        truths = [f.bbox for f in corpus.truths[j].faces]
        taken = [False] * len(truths)
        for det in sorted(dets, key=lambda d: -d.score):
            best, best_iou = -1, 0.0
            for k, tb in enumerate(truths):
                if taken[k]:
                    continue
                v = iou(det.bbox, tb)
                if v > best_iou:
                    best, best_iou = k, v
            if best >= 0 and best_iou >= iou_match:
                taken[best] = True
                tp += 1
            else:
                fp += 1
        fn += taken.count(False)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {"tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall}


# --------------------------------------------------------------------------
# Gaze


def gaze_loss_grad(out: np.ndarray, starts: np.ndarray, vecs: np.ndarray):
    """MSE on start and raw vector, confidence regressed onto an accuracy
    score exp(-err/scale) of its own (detached) prediction error."""
    n = out.shape[0]
    grad = np.zeros_like(out)

    d_start = out[:, 0:2] - starts
    grad[:, 0:2] = 2.0 * 2.0 * d_start / n
    loss = 2.0 * float((d_start ** 2).mean() * 2)

    d_vec = out[:, 3:6] - vecs
    grad[:, 3:6] = 4.0 * 2.0 * d_vec / n
    loss += 4.0 * float((d_vec ** 2).mean() * 3)

    start_err = np.sqrt((d_start ** 2).sum(axis=1))
    vec_err = np.sqrt((d_vec ** 2).sum(axis=1))
    for col, err, scale in ((2, start_err, START_ERR_SCALE),
                            (6, vec_err, VEC_ERR_SCALE)):
        target = np.exp(-err / scale)
        sig = 1.0 / (1.0 + np.exp(-out[:, col]))
        grad[:, col] = 2.0 * (sig - target) * sig * (1 - sig) / n
        loss += float(((sig - target) ** 2).mean())
    return loss, grad.astype(out.dtype)


@dataclass
class GazeTrainResult:
    net: Sequential
    losses: list[float]


def train_gaze(corpus: GazeCorpus, seed: int = 0, steps: int = 2400,
               batch_size: int = 32, lr: float = 0.02,
               widths: tuple[int, int, int, int] = DESK_GAZE_WIDTHS,
               holdout: int = 200) -> GazeTrainResult:
    rng = np.random.default_rng([seed, 999983])
    net = build_gaze_net(widths, rng=np.random.default_rng([seed, 17]))
    _init_centralized(net)
    trainer = MomentumTrainer(net, lr=lr, momentum=0.9, gc_enabled=True)

    n_train = len(corpus.crops) - holdout
    losses = []
    for step in range(steps):
        pick = rng.integers(0, n_train, size=batch_size)
        x = corpus.crops[pick][:, None, :, :]
        out = net.forward(x, training=True)
        loss, dout = gaze_loss_grad(out, corpus.starts[pick].astype(np.float32),
                                    corpus.vecs[pick].astype(np.float32))
        net.backward(dout)
        trainer.step(lr=_cosine_lr(step, steps, lr))
        losses.append(loss)
    return GazeTrainResult(net=net, losses=losses)


def evaluate_gaze(net: Sequential, corpus: GazeCorpus, holdout: int = 200,
                  batch_size: int = 50) -> dict:
    """Held-out angular error (degrees) and start error (crop units)."""
    n = len(corpus.crops)
    test = range(n - holdout, n)
    ang_errs = []
    start_errs = []
    confs = []
    for i0 in range(test.start, n, batch_size):
        take = list(range(i0, min(i0 + batch_size, n)))
        x = corpus.crops[take][:, None, :, :]
        out = net.forward(x, training=False)
        for row, i in zip(out, take):
            sample = parse_outputs(row)
            dot = float(np.clip(np.dot(sample.vec, corpus.vecs[i]), -1.0, 1.0))
            ang_errs.append(math.degrees(math.acos(dot)))
            start_errs.append(float(np.hypot(sample.start[0] - corpus.starts[i, 0],
                                             sample.start[1] - corpus.starts[i, 1])))
            confs.append((sample.start_conf, sample.vec_conf))
    confs = np.asarray(confs)
    return {
        "mean_angular_deg": float(np.mean(ang_errs)),
        "median_angular_deg": float(np.median(ang_errs)),
        "mean_start_err": float(np.mean(start_errs)),
        "mean_start_conf": float(confs[:, 0].mean()),
        "mean_vec_conf": float(confs[:, 1].mean()),
    }
