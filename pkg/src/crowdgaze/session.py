"""Per-frame orchestration: detect, track, crop, batch, estimate, map, record.

Each processed frame yields a GroupGazeState holding one entry per tracked
person (bounding box, gaze sample, mapped projection point or the reason
there is none) plus the group mean over the validly mapped points. States
stream to the CSV recorder and to any connected clients.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationStore, MappedPoint, ValidityConfig
from .detector import DetectorConfig, FaceDetector
from .gaze import BatchConfig, FaceCrop, GazeEstimator, GazeSample, extract_crop, make_batch
from .tracking import Tracker

STATUS_OK = "OK"
STATUS_INVALID = "INVALID"
STATUS_UNCAL = "UNCAL"
STATUS_EMPTY = "EMPTY"

CSV_HEADER = ("frame,ts_ms,person_id,bb_x,bb_y,bb_w,bb_h,sx,sy,start_conf,"
              "gx,gy,gz,vec_conf,map_u,map_v,status")


@dataclass
class SessionConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    validity: ValidityConfig = field(default_factory=ValidityConfig)
    degree: int = 2
    record_path: str | None = None
    target_fps: float = 30.0


@dataclass
class PersonEntry:
    person_id: int
    bbox: tuple[float, float, float, float]
    sample: GazeSample | None
    features: tuple[float, ...] | None
    mapped: MappedPoint | None
    status: str


@dataclass
class GroupGazeState:
    frame_index: int
    ts_ms: float
    entries: list[PersonEntry] = field(default_factory=list)
    group_mean: tuple[float, float] | None = None

    def to_jsonable(self) -> dict:
        people = []
        for e in self.entries:
            person = {
                "person_id": e.person_id,
                "bbox": [round(v, 3) for v in e.bbox],
                "status": e.status,
            }
            if e.sample is not None:
                person["sample"] = {
                    "start": [e.sample.start[0], e.sample.start[1]],
                    "start_conf": e.sample.start_conf,
                    "vec": list(e.sample.vec),
                    "vec_conf": e.sample.vec_conf,
                }
            if e.mapped is not None:
                person["map"] = {"u": e.mapped.u, "v": e.mapped.v,
                                 "on_screen": e.mapped.on_screen}
            people.append(person)
        out = {"frame": self.frame_index, "ts_ms": self.ts_ms, "persons": people}
        if self.group_mean is not None:
            out["group_mean"] = {"u": self.group_mean[0], "v": self.group_mean[1]}
        return out


def group_average(entries: list[PersonEntry]) -> tuple[float, float] | None:
    """Mean over calibrated-and-valid mapped points; None when there are none."""
    points = [(e.mapped.u, e.mapped.v) for e in entries if e.status == STATUS_OK]
    if not points:
        return None
    return (sum(p[0] for p in points) / len(points),
            sum(p[1] for p in points) / len(points))


class Session:
    """Owns one pipeline instance; processes frames strictly in order."""

    def __init__(self, detector: FaceDetector, estimator: GazeEstimator,
                 config: SessionConfig | None = None,
                 calibration: CalibrationStore | None = None):
        self.config = config or SessionConfig()
        self.detector = detector
        self.estimator = estimator
        self.tracker = Tracker()
        self.calibration = calibration or CalibrationStore(validity=self.config.validity)
        self.latest_state: GroupGazeState | None = None
        self._frame_index = 0

    def process_frame(self, frame: np.ndarray, ts_ms: float) -> GroupGazeState:
        detections = self.detector.detect(frame, self.config.detector)
        matched = self.tracker.update(detections)
        for pid in self.tracker.dropped_ids:
            self.calibration.drop_person(pid)

        crops: list[FaceCrop] = []
        people: list = []
        for track, det in matched:
            try:
                crop = extract_crop(frame, det.bbox)
            except ValueError:
                continue
            crops.append(crop)
            people.append((track.id, crop.source_bbox))

        samples = self._estimate_chunked(crops)

        h, w = frame.shape[:2]
        entries: list[PersonEntry] = []
        for (pid, bbox), sample in zip(people, samples):
            entry = self._entry_for(pid, bbox, sample, w, h)
            entries.append(entry)

        state = GroupGazeState(frame_index=self._frame_index, ts_ms=ts_ms,
                               entries=entries,
                               group_mean=None)
        state.group_mean = group_average(entries)
        self._frame_index += 1
        self.latest_state = state
        return state

    def _estimate_chunked(self, crops: list[FaceCrop]) -> list[GazeSample | None]:
        """ceil(N/B) fixed-size batches; a failing chunk invalidates only its crops."""
        b = self.config.batch.batch_size
        samples: list[GazeSample | None] = []
        for i in range(0, len(crops), b):
            chunk = crops[i:i + b]
            try:
                samples.extend(self.estimator.estimate(*make_batch(chunk, b)))
            except Exception:
                samples.extend([None] * len(chunk))
        return samples

    def _entry_for(self, pid: int, bbox, sample: GazeSample | None,
                   frame_w: int, frame_h: int) -> PersonEntry:
        if sample is None or not sample.valid:
            if sample is not None:
                sample.person_id = pid
            return PersonEntry(person_id=pid, bbox=bbox, sample=sample,
                               features=None, mapped=None, status=STATUS_INVALID)
        sample.person_id = pid
        sample.frame_index = self._frame_index
        features = sample.features_frame(bbox, frame_w, frame_h)
        mapped = self.calibration.map_sample(pid, features)
        if mapped is None:
            return PersonEntry(person_id=pid, bbox=bbox, sample=sample,
                               features=features, mapped=None, status=STATUS_UNCAL)
        return PersonEntry(person_id=pid, bbox=bbox, sample=sample,
                           features=features, mapped=mapped, status=STATUS_OK)

    def click_payload(self) -> dict[int, tuple]:
        """Freshest per-person (features, start_conf, vec_conf, valid) for add_click."""
        if self.latest_state is None:
            return {}
        out = {}
        for e in self.latest_state.entries:
            if e.sample is None or e.features is None:
                continue
            out[e.person_id] = (e.features, e.sample.start_conf,
                                e.sample.vec_conf, e.sample.valid)
        return out

    def add_click(self, u: float, v: float, click_ts_ms: float) -> dict:
        if self.latest_state is None:
            return {"stored": 0, "skipped": 0, "reason": "no-state"}
        return self.calibration.add_click(
            (u, v), click_ts_ms, self.click_payload(), self.latest_state.ts_ms)

    def fit_all(self, degree: int | None = None) -> list[dict]:
        """Fit every tracked person; per-person report rows for the wire."""
        from .calibration import UnderDeterminedError, monomial_count

        degree = self.config.degree if degree is None else degree
        reports = []
        for pid in self.calibration.person_ids():
            samples = self.calibration.sample_count(pid)
            try:
                poly = self.calibration.fit(pid, degree)
                reports.append({"person_id": pid, "rmse_u": poly.fit_rmse[0],
                                "rmse_v": poly.fit_rmse[1], "samples": samples,
                                "needed": 0})
            except UnderDeterminedError as e:
                reports.append({"person_id": pid, "rmse_u": None, "rmse_v": None,
                                "samples": samples, "needed": e.deficit})
        return reports

    def save_calibration(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.calibration.to_jsonable(), f, indent=2)


# --------------------------------------------------------------------------
# CSV recording and replay


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


class SessionRecorder:
    """Appends one row per person per frame plus a group row; flushes per frame.

    The group row's mean is recomputed from the 6-decimal person values it
    just wrote, so replaying the person rows reproduces the group rows
    exactly.
    """

    def __init__(self, path: str):
        self._file = open(path, "w", newline="")
        self._file.write(CSV_HEADER + "\n")
        self._file.flush()

    def write_state(self, state: GroupGazeState) -> None:
        frame = state.frame_index
        ts = int(round(state.ts_ms))
        rounded_points = []
        for e in state.entries:
            s = e.sample
            sample_fields = (
                [_fmt(s.start[0]), _fmt(s.start[1]), _fmt(s.start_conf),
                 _fmt(s.vec[0]), _fmt(s.vec[1]), _fmt(s.vec[2]), _fmt(s.vec_conf)]
                if s is not None else [""] * 7)
            if e.status == STATUS_OK and e.mapped is not None:
                mu, mv = _fmt(e.mapped.u), _fmt(e.mapped.v)
                rounded_points.append((float(mu), float(mv)))
            else:
                mu = mv = ""
            row = [str(frame), str(ts), str(e.person_id),
                   _fmt(e.bbox[0]), _fmt(e.bbox[1]), _fmt(e.bbox[2]), _fmt(e.bbox[3]),
                   *sample_fields, mu, mv, e.status]
            self._file.write(",".join(row) + "\n")
        if rounded_points:
            mean_u = sum(p[0] for p in rounded_points) / len(rounded_points)
            mean_v = sum(p[1] for p in rounded_points) / len(rounded_points)
            group = [str(frame), str(ts), "GROUP", *[""] * 11,
                     _fmt(mean_u), _fmt(mean_v), STATUS_OK]
        else:
            group = [str(frame), str(ts), "GROUP", *[""] * 11, "", "", STATUS_EMPTY]
        self._file.write(",".join(group) + "\n")
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.flush()
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def replay(path: str) -> tuple[list[GroupGazeState], int]:
    """Rebuild the state sequence from a session log.

    Malformed rows are skipped; the count of skipped rows is returned
    alongside the states.
    """
    states: dict[int, GroupGazeState] = {}
    skipped = 0
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER.split(","):
            skipped += 1 if header is not None else 0
        for row in reader:
            if len(row) != 17:
                skipped += 1
                continue
            try:
                state = _parse_row(row, states)
            except (ValueError, IndexError):
                skipped += 1
                continue
    ordered = [states[k] for k in sorted(states)]
    return ordered, skipped


def _parse_row(row: list[str], states: dict[int, GroupGazeState]) -> GroupGazeState:
    frame = int(row[0])
    ts = float(row[1])
    state = states.get(frame)
    if state is None:
        state = GroupGazeState(frame_index=frame, ts_ms=ts)
        states[frame] = state
    if row[2] == "GROUP":
        if row[16] == STATUS_OK:
            state.group_mean = (float(row[14]), float(row[15]))
        elif row[16] == STATUS_EMPTY:
            state.group_mean = None
        else:
            raise ValueError(f"bad group status {row[16]!r}")
        return state
    pid = int(row[2])
    bbox = (float(row[3]), float(row[4]), float(row[5]), float(row[6]))
    status = row[16]
    if status not in (STATUS_OK, STATUS_INVALID, STATUS_UNCAL):
        raise ValueError(f"bad person status {status!r}")
    sample = None
    if row[7] != "":
        sample = GazeSample(
            start=(float(row[7]), float(row[8])), start_conf=float(row[9]),
            vec=(float(row[10]), float(row[11]), float(row[12])),
            vec_conf=float(row[13]), valid=status != STATUS_INVALID,
            person_id=pid, frame_index=frame)
    mapped = None
    if status == STATUS_OK:
        mapped = MappedPoint(u=float(row[14]), v=float(row[15]), on_screen=True)
    state.entries.append(PersonEntry(
        person_id=pid, bbox=bbox, sample=sample, features=None,
        mapped=mapped, status=status))
    return state
