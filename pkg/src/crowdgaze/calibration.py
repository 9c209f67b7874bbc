"""Per-person polynomial mapping from gaze features to projection coordinates.

Features are (sx, sy, gx, gy, gz): the frame-normalized gaze start plus the
unit gaze vector. Clicking a known target stores one sample per person that
passes the confidence filter; fitting solves a ridge least-squares problem
over all multivariate monomials up to the chosen total degree, one solve
per output axis. Fits are refused outright when under-determined.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

N_FEATURES = 5
DEFAULT_DEGREE = 2
DEFAULT_RIDGE = 1e-6
STALENESS_MS = 200.0
MAP_CLAMP = (-0.25, 1.25)
CONDITION_WARN = 1e8


class CalibrationError(ValueError):
    pass


class UnderDeterminedError(CalibrationError):
    """Fewer samples than monomials; carries how many more clicks are needed."""

    def __init__(self, person_id: int, samples: int, required: int):
        self.person_id = person_id
        self.samples = samples
        self.required = required
        self.deficit = required - samples
        super().__init__(
            f"person {person_id}: {samples} samples but degree needs {required} "
            f"({self.deficit} more clicks required)")


def monomial_exponents(degree: int, n_vars: int = N_FEATURES) -> list[tuple[int, ...]]:
    """All exponent tuples with total degree <= degree, graded-lexicographic."""
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    out: list[tuple[int, ...]] = []
    for total in range(degree + 1):
        grade = [e for e in itertools.product(range(total + 1), repeat=n_vars)
                 if sum(e) == total]
        grade.sort(reverse=True)
        out.extend(tuple(e) for e in grade)
    return out


def monomial_count(degree: int, n_vars: int = N_FEATURES) -> int:
    return math.comb(n_vars + degree, degree)


def design_matrix(features: np.ndarray, exponents: list[tuple[int, ...]]) -> np.ndarray:
    """(N, n_vars) features -> (N, M) monomial matrix, float64."""
    f = np.asarray(features, dtype=np.float64)
    cols = [np.prod(f ** np.asarray(e, dtype=np.float64), axis=1) for e in exponents]
    return np.stack(cols, axis=1)


@dataclass
class ValidityConfig:
    min_start_conf: float = 0.5
    min_vec_conf: float = 0.5

    def accepts(self, start_conf: float, vec_conf: float) -> bool:
        return start_conf >= self.min_start_conf and vec_conf >= self.min_vec_conf


@dataclass
class CalibrationSample:
    features: tuple[float, float, float, float, float]
    target: tuple[float, float]
    person_id: int
    timestamp_ms: float


@dataclass
class PolynomialMap:
    degree: int
    exponents: list[tuple[int, ...]]
    coefficients: np.ndarray  # (2, M) for outputs (u, v)
    fit_rmse: tuple[float, float]
    sample_count: int

    def to_jsonable(self) -> dict:
        return {
            "degree": self.degree,
            "exponents": [list(e) for e in self.exponents],
            "coefficients": self.coefficients.tolist(),
            "rmse": list(self.fit_rmse),
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "PolynomialMap":
        return cls(
            degree=int(obj["degree"]),
            exponents=[tuple(e) for e in obj["exponents"]],
            coefficients=np.asarray(obj["coefficients"], dtype=np.float64),
            fit_rmse=(float(obj["rmse"][0]), float(obj["rmse"][1])),
            sample_count=int(obj["sample_count"]),
        )


@dataclass
class MappedPoint:
    u: float
    v: float
    on_screen: bool


def fit_polynomial(features: np.ndarray, targets: np.ndarray, degree: int,
                   ridge: float = DEFAULT_RIDGE, person_id: int = -1) -> PolynomialMap:
    """min ||Phi c - t||^2 + ridge ||c||^2, each target axis independently."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    exponents = monomial_exponents(degree)
    m = len(exponents)
    n = features.shape[0]
    if n < m:
        raise UnderDeterminedError(person_id, n, m)
    phi = design_matrix(features, exponents)

    if ridge > 0:
        a = np.vstack([phi, np.sqrt(ridge) * np.eye(m)])
        b = np.vstack([targets, np.zeros((m, 2))])
    else:
        a, b = phi, targets
    coef, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
    svals = np.linalg.svd(phi, compute_uv=False)
    if svals[-1] == 0 or svals[0] / max(svals[-1], 1e-300) > CONDITION_WARN:
        warnings.warn(
            f"person {person_id}: rank-deficient calibration design "
            f"(condition > {CONDITION_WARN:.0e}); consider more spread-out clicks",
            stacklevel=2)
    residual = phi @ coef - targets
    rmse = np.sqrt(np.mean(residual ** 2, axis=0))
    return PolynomialMap(degree=degree, exponents=exponents,
                         coefficients=coef.T.copy(),
                         fit_rmse=(float(rmse[0]), float(rmse[1])),
                         sample_count=n)


def evaluate_map(poly: PolynomialMap, features) -> MappedPoint:
    """Evaluate both output polynomials; clamp slightly beyond the screen."""
    phi = design_matrix(np.asarray(features, dtype=np.float64)[None, :], poly.exponents)
    uv = phi @ poly.coefficients.T
    u, v = float(uv[0, 0]), float(uv[0, 1])
    lo, hi = MAP_CLAMP
    cu, cv = min(max(u, lo), hi), min(max(v, lo), hi)
    on_screen = 0.0 <= u <= 1.0 and 0.0 <= v <= 1.0
    return MappedPoint(u=cu, v=cv, on_screen=on_screen)


@dataclass
class _PersonCalibration:
    samples: list[CalibrationSample] = field(default_factory=list)
    poly: PolynomialMap | None = None


class CalibrationStore:
    """Per-person samples and fitted maps; persons never share state."""

    def __init__(self, validity: ValidityConfig | None = None,
                 staleness_ms: float = STALENESS_MS):
        self.validity = validity or ValidityConfig()
        self.staleness_ms = staleness_ms
        self._people: dict[int, _PersonCalibration] = {}

    def _person(self, person_id: int) -> _PersonCalibration:
        return self._people.setdefault(person_id, _PersonCalibration())

    def add_click(self, click_uv: tuple[float, float], click_ts_ms: float,
                  samples_by_person: dict[int, tuple], state_ts_ms: float) -> dict:
        """Store one sample per person passing the validity filter.

        `samples_by_person` maps person_id -> (features, start_conf, vec_conf,
        valid). A click against a state older than the staleness window is a
        no-op tallied as stale.
        """
        if abs(click_ts_ms - state_ts_ms) > self.staleness_ms:
            return {"stored": 0, "skipped": len(samples_by_person), "reason": "stale"}
        if not samples_by_person:
            return {"stored": 0, "skipped": 0, "reason": "no-samples"}
        stored = 0
        skipped = 0
        per_person = {}
        for pid, (features, start_conf, vec_conf, valid) in sorted(samples_by_person.items()):
            if valid and self.validity.accepts(start_conf, vec_conf):
                self._person(pid).samples.append(CalibrationSample(
                    features=tuple(features), target=tuple(click_uv),
                    person_id=pid, timestamp_ms=click_ts_ms))
                stored += 1
                per_person[pid] = "stored"
            else:
                skipped += 1
                per_person[pid] = "skipped"
        return {"stored": stored, "skipped": skipped, "per_person": per_person}

    def sample_count(self, person_id: int) -> int:
        person = self._people.get(person_id)
        return len(person.samples) if person else 0

    def fit(self, person_id: int, degree: int = DEFAULT_DEGREE,
            ridge: float = DEFAULT_RIDGE) -> PolynomialMap:
        person = self._people.get(person_id)
        samples = person.samples if person else []
        if len(samples) < monomial_count(degree):
            raise UnderDeterminedError(person_id, len(samples), monomial_count(degree))
        features = np.array([s.features for s in samples], dtype=np.float64)
        targets = np.array([s.target for s in samples], dtype=np.float64)
        poly = fit_polynomial(features, targets, degree, ridge, person_id)
        self._person(person_id).poly = poly
        return poly

    def map_sample(self, person_id: int, features) -> MappedPoint | None:
        """None when the person has no fitted map (reported uncalibrated)."""
        person = self._people.get(person_id)
        if person is None or person.poly is None:
            return None
        return evaluate_map(person.poly, features)

    def poly(self, person_id: int) -> PolynomialMap | None:
        person = self._people.get(person_id)
        return person.poly if person else None

    def drop_person(self, person_id: int) -> None:
        self._people.pop(person_id, None)

    def person_ids(self) -> list[int]:
        return sorted(self._people)

    def to_jsonable(self) -> dict:
        return {
            str(pid): {
                "sample_count": len(p.samples),
                "map": p.poly.to_jsonable() if p.poly else None,
            }
            for pid, p in sorted(self._people.items())
        }
