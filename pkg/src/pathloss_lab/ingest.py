"""Measurement ingestion: parsing, cleaning, outlier removal and link joining."""

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from datetime import datetime, timezone

import numpy as np
from scipy.special import digamma

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "timestamp",
    "device_id",
    "sf",
    "rssi",
    "snr",
    "temperature",
    "humidity",
    "pressure",
    "pm25",
    "co2",
)

# Features the outlier forest looks at unless told otherwise.
DEFAULT_OUTLIER_FEATURES = (
    "rssi",
    "snr",
    "temperature",
    "humidity",
    "pressure",
    "pm25",
    "co2",
)

_EULER_GAMMA = 0.5772156649015329


class SchemaError(ValueError):
    """The CSV header does not match the measurement schema."""


class RowError(ValueError):
    """A data row failed type or range validation."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


class JoinError(KeyError):
    """A record refers to a device without a link profile."""

    def __init__(self, device_id):
        super().__init__(device_id)
        self.device_id = device_id

    def __str__(self):
        return f"no link profile for device {self.device_id!r}"


@dataclass(frozen=True, slots=True)
class MeasurementRecord:
    timestamp: datetime
    device_id: str
    spreading_factor: int
    rssi: float
    snr: float
    temperature: float
    humidity: float
    pressure: float
    pm25: float
    co2: float

    def feature(self, name):
        if name == "sf":
            return float(self.spreading_factor)
        return float(getattr(self, name))


@dataclass(frozen=True, slots=True)
class LinkProfile:
    device_id: str
    distance: float
    brick_walls: int = 0
    wood_walls: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.distance) and self.distance > 0):
            raise ValueError(f"{self.device_id}: distance must be > 0, got {self.distance}")
        for name in ("brick_walls", "wood_walls"):
            count = getattr(self, name)
            if isinstance(count, bool) or int(count) != count or count < 0:
                raise ValueError(f"{self.device_id}: {name} must be a non-negative integer")
            object.__setattr__(self, name, int(count))

    def to_json(self):
        return {
            "device_id": self.device_id,
            "distance_m": self.distance,
            "brick_walls": self.brick_walls,
            "wood_walls": self.wood_walls,
        }


@dataclass(frozen=True, slots=True)
class RadioConfig:
    """Link-budget constants. Defaults: 14 dBm EU868, isotropic antennas, 1 m reference."""

    tx_power: float = 14.0
    tx_gain: float = 0.0
    rx_gain: float = 0.0
    frequency: float = 868.0
    d0: float = 1.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError(f"frequency must be > 0 MHz, got {self.frequency}")
        if not self.d0 > 0:
            raise ValueError(f"reference distance must be > 0 m, got {self.d0}")

    @property
    def eirp(self):
        return self.tx_power + self.tx_gain + self.rx_gain

    def to_json(self):
        return {
            "tx_power_dbm": self.tx_power,
            "tx_gain_dbi": self.tx_gain,
            "rx_gain_dbi": self.rx_gain,
            "frequency_mhz": self.frequency,
            "d0_m": self.d0,
        }

    @classmethod
    def from_json(cls, obj):
        defaults = cls()
        return cls(
            tx_power=float(obj.get("tx_power_dbm", defaults.tx_power)),
            tx_gain=float(obj.get("tx_gain_dbi", defaults.tx_gain)),
            rx_gain=float(obj.get("rx_gain_dbi", defaults.rx_gain)),
            frequency=float(obj.get("frequency_mhz", defaults.frequency)),
            d0=float(obj.get("d0_m", defaults.d0)),
        )


@dataclass(frozen=True, slots=True)
class LinkedSample:
    record: MeasurementRecord
    profile: LinkProfile


# ---------------------------------------------------------------------------
# parsing


def parse_timestamp(text):
    """Parse an ISO-8601 timestamp into an aware UTC datetime (whole seconds).

    Naive timestamps are taken to be UTC already.
    """
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts):
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _finite(row, name):
    raw = row[name]
    if raw is None or raw.strip() == "":
        raise ValueError(f"empty {name} field")
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"non-finite {name}: {raw!r}")
    return value


def _parse_row(row):
    device_id = (row["device_id"] or "").strip()
    if not device_id:
        raise ValueError("empty device_id")
    sf_raw = (row["sf"] or "").strip()
    try:
        sf = int(sf_raw)
    except ValueError:
        raise ValueError(f"sf is not an integer: {sf_raw!r}") from None
    if not 7 <= sf <= 12:
        raise ValueError(f"sf {sf} outside 7..12")
    try:
        ts = parse_timestamp(row["timestamp"] or "")
    except ValueError:
        raise ValueError(f"bad timestamp {row['timestamp']!r}") from None

    values = {name: _finite(row, name) for name in CSV_COLUMNS[3:]}
    if not 0.0 <= values["humidity"] <= 100.0:
        raise ValueError(f"humidity {values['humidity']} outside [0, 100]")
    for name in ("pm25", "co2"):
        if values[name] < 0:
            raise ValueError(f"{name} must be >= 0, got {values[name]}")
    return MeasurementRecord(timestamp=ts, device_id=device_id, spreading_factor=sf, **values)


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    return source


def parse_measurements(csv_source, strict=False, errors=None):
    """Parse a measurement CSV into records, in file order.

    ``csv_source`` is a path or an open text stream. Rows failing validation
    are logged and skipped; with ``strict=True`` the first one raises
    :class:`RowError` instead. If ``errors`` is a list, every skipped row's
    :class:`RowError` is appended to it.
    """
    stream = _open_text(csv_source)
    try:
        reader = csv.DictReader(stream)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")

        records = []
        skipped = 0
        for row in reader:
            line = reader.line_num
            try:
                records.append(_parse_row(row))
            except (ValueError, TypeError, AttributeError) as exc:
                err = RowError(line, str(exc))
                if strict:
                    raise err from None
                skipped += 1
                logger.warning("skipping row: %s", err)
                if errors is not None:
                    errors.append(err)
        if skipped:
            logger.info("parsed %d records, skipped %d invalid rows", len(records), skipped)
        return records
    finally:
        if stream is not csv_source:
            stream.close()


def _fmt(value):
    return repr(float(value))


def write_measurements(records, dest):
    """Write records in the CSV schema; floats are written round-trip exact."""
    own = isinstance(dest, (str, os.PathLike))
    stream = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    format_timestamp(r.timestamp),
                    r.device_id,
                    r.spreading_factor,
                    _fmt(r.rssi),
                    _fmt(r.snr),
                    _fmt(r.temperature),
                    _fmt(r.humidity),
                    _fmt(r.pressure),
                    _fmt(r.pm25),
                    _fmt(r.co2),
                ]
            )
    finally:
        if own:
            stream.close()


def measurements_to_csv(records):
    buf = io.StringIO()
    write_measurements(records, buf)
    return buf.getvalue()


def load_link_profiles(path):
    with open(path, encoding="utf-8") as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise ValueError("link profile file must hold a JSON array")
    profiles = {}
    for obj in items:
        try:
            profile = LinkProfile(
                device_id=str(obj["device_id"]),
                distance=float(obj["distance_m"]),
                brick_walls=obj.get("brick_walls", 0),
                wood_walls=obj.get("wood_walls", 0),
            )
        except KeyError as exc:
            raise ValueError(f"link profile missing field {exc}") from None
        profiles[profile.device_id] = profile
    return profiles


def load_radio_config(path):
    with open(path, encoding="utf-8") as fh:
        return RadioConfig.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# cleaning


def dedup_and_filter_sf(records, sf_low=7, sf_high=10):
    """Drop repeated (device_id, timestamp) keys and out-of-band spreading factors.

    The first occurrence of a key wins and the input order is preserved.
    """
    if sf_low > sf_high:
        raise ValueError(f"sf_low ({sf_low}) > sf_high ({sf_high})")
    seen = set()
    out = []
    for r in records:
        key = (r.device_id, r.timestamp)
        if key in seen:
            continue
        seen.add(key)
        if sf_low <= r.spreading_factor <= sf_high:
            out.append(r)
    return out


def average_path_length(n):
    """Expected path length of an unsuccessful BST search over ``n`` points."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    # H(n - 1) = digamma(n) + gamma, exact rather than the log approximation
    harmonic = digamma(n[big]) + _EULER_GAMMA
    out[big] = 2.0 * harmonic - 2.0 * (n[big] - 1.0) / n[big]
    return out


class _IsolationTree:
    """Array-backed isolation tree; leaves hold their training size."""

    def __init__(self, X, max_depth, rng):
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.size = []
        self._grow(X, 0, max_depth, rng)
        self.feature = np.asarray(self.feature, dtype=np.intp)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.intp)
        self.right = np.asarray(self.right, dtype=np.intp)
        self.size = np.asarray(self.size, dtype=float)

    def _new_node(self):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(0.0)
        return len(self.feature) - 1

    def _grow(self, X, depth, max_depth, rng):
        node = self._new_node()
        n = X.shape[0]
        self.size[node] = n
        if depth >= max_depth or n <= 1:
            return node
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            return node
        q = splittable[rng.integers(splittable.size)]
        split = rng.uniform(lo[q], hi[q])
        mask = X[:, q] < split
        self.feature[node] = q
        self.threshold[node] = split
        left = self._grow(X[mask], depth + 1, max_depth, rng)
        right = self._grow(X[~mask], depth + 1, max_depth, rng)
        self.left[node] = left
        self.right[node] = right
        return node

    def path_length(self, X):
        node = np.zeros(X.shape[0], dtype=np.intp)
        depth = np.zeros(X.shape[0])
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            idx = rows[active]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            depth[idx] += 1.0
            active = self.feature[node] >= 0
        return depth + average_path_length(self.size[node])


def isolation_forest_scores(X, trees=100, subsample=256, seed=42):
    """Anomaly scores in (0, 1]; larger means easier to isolate."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    n = X.shape[0]
    if trees < 1:
        raise ValueError("trees must be >= 1")
    if subsample < 2:
        raise ValueError("subsample must be >= 2")
    if n == 0:
        return np.zeros(0)
    psi = min(subsample, n)
    max_depth = int(math.ceil(math.log2(psi))) if psi > 1 else 0
    streams = np.random.SeedSequence(seed).spawn(trees)
    total = np.zeros(n)
    for stream in streams:
        rng = np.random.default_rng(stream)
        rows = rng.choice(n, size=psi, replace=False)
        tree = _IsolationTree(X[rows], max_depth, rng)
        total += tree.path_length(X)
    mean_depth = total / trees
    c = float(average_path_length(np.array([psi]))[0])
    if c == 0.0:
        return np.full(n, 0.5)
    return np.power(2.0, -mean_depth / c)


def isolation_forest_outliers(
    records,
    feature_set=DEFAULT_OUTLIER_FEATURES,
    contamination=0.01,
    trees=100,
    subsample=256,
    seed=42,
):
    """Split records into (kept, flagged) with an isolation forest.

    Exactly ``floor(contamination * n)`` records are flagged: the highest
    scores, ties going to the earlier record. Both lists keep input order.
    """
    if not 0.0 <= contamination < 0.5:
        raise ValueError(f"contamination must lie in [0, 0.5), got {contamination}")
    records = list(records)
    n = len(records)
    n_flag = int(math.floor(contamination * n))
    if n_flag == 0:
        return records, []
    X = np.array([[r.feature(f) for f in feature_set] for r in records], dtype=float)
    scores = isolation_forest_scores(X, trees=trees, subsample=subsample, seed=seed)
    order = np.argsort(-scores, kind="stable")
    flagged_idx = np.zeros(n, dtype=bool)
    flagged_idx[order[:n_flag]] = True
    kept = [r for r, f in zip(records, flagged_idx) if not f]
    flagged = [r for r, f in zip(records, flagged_idx) if f]
    return kept, flagged


# ---------------------------------------------------------------------------
# link budget


def compute_path_loss(record, radio=RadioConfig()):
    """Path loss in dB: EIRP plus receive gain minus RSSI."""
    rssi = record.rssi if isinstance(record, MeasurementRecord) else record
    return radio.tx_power + radio.tx_gain + radio.rx_gain - rssi


def join_links(records, profiles):
    """Pair each record with its device's link profile.

    ``profiles`` may be a mapping keyed by device id or an iterable of
    :class:`LinkProfile`.
    """
    if not isinstance(profiles, dict):
        profiles = {p.device_id: p for p in profiles}
    out = []
    for r in records:
        try:
            out.append(LinkedSample(r, profiles[r.device_id]))
        except KeyError:
            raise JoinError(r.device_id) from None
    return out


def record_to_json(record):
    d = asdict(record)
    d["timestamp"] = format_timestamp(record.timestamp)
    return d
