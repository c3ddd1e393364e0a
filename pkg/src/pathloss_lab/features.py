"""Design matrix for the multi-wall, environment-aware path loss model.

Model, in dB::

    PL = beta + 10 n log10(d / d0) + 20 log10(f) + sum_k W_k L_k
         + sum_j theta_j E_j + k_snr SNR + eps

With one carrier frequency the ``20 log10(f)`` term is constant, so it is
subtracted from the response instead of entering as a regressor (it would be
collinear with the intercept). ``f`` is in MHz; another unit would only
shift the fitted intercept.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import RadioConfig, compute_path_loss

logger = logging.getLogger(__name__)

ENVIRONMENTAL_TERMS = ("co2", "humidity", "pm25", "pressure", "temperature")

# Canonical column order; coefficient labels use these names too.
COLUMN_ORDER = (
    "intercept",
    "log_distance",
    "brick_walls",
    "wood_walls",
    *ENVIRONMENTAL_TERMS,
    "snr",
)

# Symbol of the model coefficient each column estimates.
COEFFICIENT_SYMBOLS = {
    "intercept": "beta",
    "log_distance": "n",
    "brick_walls": "L_brick",
    "wood_walls": "L_wood",
    "co2": "theta_C",
    "humidity": "theta_RH",
    "pm25": "theta_P",
    "pressure": "theta_BP",
    "temperature": "theta_T",
    "snr": "k_SNR",
}


def frequency_offset(frequency_mhz):
    """Friis frequency term ``20 log10(f)`` in dB."""
    return 20.0 * math.log10(frequency_mhz)


@dataclass(frozen=True)
class ModelSpec:
    include_environment: bool = True
    include_snr: bool = True
    environmental_terms: tuple = ENVIRONMENTAL_TERMS
    d0: float = 1.0
    frequency: float = 868.0

    def __post_init__(self):
        terms = tuple(self.environmental_terms) if self.include_environment else ()
        unknown = [t for t in terms if t not in ENVIRONMENTAL_TERMS]
        if unknown:
            raise ValueError(f"unknown environmental term(s): {unknown}")
        if len(set(terms)) != len(terms):
            raise ValueError("environmental_terms contains duplicates")
        if self.include_environment and not terms:
            raise ValueError("include_environment requires at least one environmental term")
        object.__setattr__(self, "environmental_terms", terms)
        if not self.d0 > 0:
            raise ValueError(f"d0 must be > 0, got {self.d0}")
        if not self.frequency > 0:
            raise ValueError(f"frequency must be > 0, got {self.frequency}")

    @property
    def columns(self):
        cols = ["intercept", "log_distance", "brick_walls", "wood_walls"]
        cols += [t for t in ENVIRONMENTAL_TERMS if t in self.environmental_terms]
        if self.include_snr:
            cols.append("snr")
        return tuple(cols)

    def baseline(self):
        """Same spec without environmental regressors."""
        return ModelSpec(
            include_environment=False,
            include_snr=self.include_snr,
            environmental_terms=(),
            d0=self.d0,
            frequency=self.frequency,
        )

    def to_json(self):
        return {
            "include_environment": self.include_environment,
            "include_snr": self.include_snr,
            "environmental_terms": list(self.environmental_terms),
            "d0_m": self.d0,
            "frequency_mhz": self.frequency,
        }

    @classmethod
    def from_json(cls, obj):
        include_env = bool(obj.get("include_environment", True))
        terms = obj.get("environmental_terms", ENVIRONMENTAL_TERMS if include_env else ())
        return cls(
            include_environment=include_env,
            include_snr=bool(obj.get("include_snr", True)),
            environmental_terms=tuple(terms),
            d0=float(obj.get("d0_m", 1.0)),
            frequency=float(obj.get("frequency_mhz", 868.0)),
        )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class DesignMatrix:
    columns: tuple
    X: np.ndarray
    y: np.ndarray
    frequency: float = 868.0
    spec: ModelSpec = field(default_factory=ModelSpec)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def offset(self):
        return frequency_offset(self.frequency)

    def take(self, rows):
        rows = np.asarray(rows)
        return DesignMatrix(self.columns, self.X[rows], self.y[rows], self.frequency, self.spec)

    def drop(self, labels):
        keep = [i for i, c in enumerate(self.columns) if c not in set(labels)]
        return DesignMatrix(
            tuple(self.columns[i] for i in keep),
            self.X[:, keep],
            self.y,
            self.frequency,
            self.spec,
        )

    def with_column(self, label, values):
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        return DesignMatrix(
            self.columns + (label,),
            np.hstack([self.X, values]),
            self.y,
            self.frequency,
            self.spec,
        )


def feature_row(spec, distance, brick_walls=0, wood_walls=0, environment=None, snr=0.0):
    """Regressor vector for one link, in ``spec.columns`` order."""
    environment = environment or {}
    values = {
        "intercept": 1.0,
        "log_distance": 10.0 * math.log10(distance / spec.d0),
        "brick_walls": float(brick_walls),
        "wood_walls": float(wood_walls),
        "snr": float(snr),
    }
    for term in spec.environmental_terms:
        values[term] = float(environment.get(term, 0.0))
    return np.array([values[c] for c in spec.columns])


def build_design_matrix(samples, spec=ModelSpec(), radio=RadioConfig()):
    """Regressors and response for linked samples.

    The response is path loss minus ``20 log10(f)``, so the fitted intercept
    is the model's beta directly.
    """
    cols = spec.columns
    n = len(samples)
    X = np.empty((n, len(cols)))
    y = np.empty(n)
    offset = frequency_offset(spec.frequency)
    closer_than_d0 = 0
    for i, s in enumerate(samples):
        r, prof = s.record, s.profile
        d = prof.distance
        if not d > 0:
            raise ValueError(f"row {i}: distance must be > 0 (device {r.device_id})")
        if d < spec.d0:
            closer_than_d0 += 1
        row = {
            "intercept": 1.0,
            "log_distance": 10.0 * math.log10(d / spec.d0),
            "brick_walls": float(prof.brick_walls),
            "wood_walls": float(prof.wood_walls),
            "co2": r.co2,
            "humidity": r.humidity,
            "pm25": r.pm25,
            "pressure": r.pressure,
            "temperature": r.temperature,
            "snr": r.snr,
        }
        X[i] = [row[c] for c in cols]
        y[i] = compute_path_loss(r, radio) - offset
    if closer_than_d0:
        logger.warning("%d samples closer than the reference distance d0=%g m", closer_than_d0, spec.d0)
    bad = ~np.isfinite(X).all(axis=1) | ~np.isfinite(y)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"row {i}: non-finite feature or response")
    return DesignMatrix(cols, X, y, spec.frequency, spec)
