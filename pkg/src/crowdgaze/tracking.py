"""Identity tracking by nearest-center assignment inside the previous box.

A detection may only continue a track if its center lies inside that
track's last bounding box. Among admissible pairs the tracker picks the
injective matching that first maximizes the number of matches and then
minimizes the total Euclidean center distance — exact via dynamic
programming over detection subsets up to EXACT_LIMIT tracks/detections,
greedy nearest-first beyond. Ties break toward lower track id, then lower
detection index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import Detection

EXACT_LIMIT = 12
MAX_MISSES = 30


@dataclass
class PersonTrack:
    id: int
    last_bbox: tuple[float, float, float, float]
    last_center: tuple[float, float]
    misses: int = 0


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]            # (track list index, detection index)
    unmatched_tracks: list[int]
    unmatched_detections: list[int]
    total_cost: float


def _center(det: Detection) -> tuple[float, float]:
    return det.center


def _inside(point: tuple[float, float], bbox: tuple[float, float, float, float]) -> bool:
    x, y, w, h = bbox
    return x <= point[0] <= x + w and y <= point[1] <= y + h


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def assign(tracks: list[PersonTrack], detections: list[Detection]) -> Assignment:
    """Admissibility-constrained minimum-total-distance injective matching."""
    tracks = sorted(tracks, key=lambda t: t.id)
    n, m = len(tracks), len(detections)
    admissible = [[_inside(_center(d), t.last_bbox) for d in detections] for t in tracks]
    cost = [[_distance(t.last_center, _center(d)) for d in detections] for t in tracks]

    if max(n, m, 1) <= EXACT_LIMIT:
        pairs = _assign_exact(admissible, cost, n, m)
    else:
        pairs = _assign_greedy(admissible, cost, n, m)

    matched_t = {i for i, _ in pairs}
    matched_d = {j for _, j in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_tracks=[i for i in range(n) if i not in matched_t],
        unmatched_detections=[j for j in range(m) if j not in matched_d],
        total_cost=sum(cost[i][j] for i, j in pairs),
    )


def _assign_exact(admissible, cost, n: int, m: int) -> list[tuple[int, int]]:
    """DP over detection bitmasks: maximize matches, then minimize cost.

    Options at each track are enumerated detection-index ascending with
    "leave unmatched" last, and strictly-better-wins comparison keeps the
    first optimum, which realizes the documented tie-breaking.
    """
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def best(i: int, used: int) -> tuple[int, float, tuple]:
        if i == n:
            return (0, 0.0, ())
        options = []
        for j in range(m):
            if admissible[i][j] and not (used >> j) & 1:
                cnt, c, rest = best(i + 1, used | (1 << j))
                options.append((cnt + 1, c + cost[i][j], ((i, j),) + rest))
        cnt, c, rest = best(i + 1, used)
        options.append((cnt, c, rest))
        out = options[0]
        for cand in options[1:]:
            if (-cand[0], cand[1]) < (-out[0], out[1]):
                out = cand
        return out

    _, _, pairs = best(0, 0)
    best.cache_clear()
    return list(pairs)


def _assign_greedy(admissible, cost, n: int, m: int) -> list[tuple[int, int]]:
    """Nearest admissible pair first; ties by track order then detection index."""
    ranked = sorted(
        ((cost[i][j], i, j) for i in range(n) for j in range(m) if admissible[i][j]),
        key=lambda t: (t[0], t[1], t[2]))
    used_t: set[int] = set()
    used_d: set[int] = set()
    pairs = []
    for _, i, j in ranked:
        if i not in used_t and j not in used_d:
            pairs.append((i, j))
            used_t.add(i)
            used_d.add(j)
    return pairs


@dataclass
class Tracker:
    """Track lifecycle around assign(): spawn, refresh, age out."""

    max_misses: int = MAX_MISSES
    tracks: list[PersonTrack] = field(default_factory=list)
    _next_id: int = 0
    dropped_ids: list[int] = field(default_factory=list)

    def update(self, detections: list[Detection]) -> list[tuple[PersonTrack, Detection]]:
        """Advance one frame; returns (track, detection) pairs matched this frame.

        Ids dropped this frame are collected in `dropped_ids` so calibration
        state tied to them can be released.
        """
        ordered = sorted(self.tracks, key=lambda t: t.id)
        result = assign(ordered, detections)
        self.dropped_ids = []

        matched: list[tuple[PersonTrack, Detection]] = []
        for ti, dj in result.pairs:
            track = ordered[ti]
            det = detections[dj]
            track.last_bbox = tuple(det.bbox)
            track.last_center = det.center
            track.misses = 0
            matched.append((track, det))

        survivors = list(ordered)
        for ti in result.unmatched_tracks:
            track = ordered[ti]
            track.misses += 1
            if track.misses >= self.max_misses:
                survivors.remove(track)
                self.dropped_ids.append(track.id)

        for dj in result.unmatched_detections:
            det = detections[dj]
            track = PersonTrack(id=self._next_id, last_bbox=tuple(det.bbox),
                                last_center=det.center)
            self._next_id += 1
            survivors.append(track)
            matched.append((track, det))

        self.tracks = sorted(survivors, key=lambda t: t.id)
        matched.sort(key=lambda pair: pair[0].id)
        return matched
