"""Per-prosumer energy signals: ingestion, synthesis, normalization, windowing.

Three signal kinds are handled: rooftop PV production (15-min), household
consumption (15-min) and EV charging load (1-min). All values are kilowatts.
Everything in this module is a pure function of its inputs; the synthetic
generator is a pure function of its config (identical config, identical bytes).
"""

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import rng_for

# Longest run of missing samples that ingestion will repair by linear
# interpolation. Anything longer is treated as a broken export.
MAX_INTERPOLATED_GAP = 3

CSV_HEADER = ["timestamp", "value"]


class SignalKind(Enum):
    PV = "pv"
    CONSUMPTION = "consumption"
    EV = "ev"


@dataclass(frozen=True)
class TimeSeries:
    """A gap-free, equally spaced kW signal.

    values are non-negative for every kind (production and charging loads
    cannot go below zero; consumption is metered as a non-negative draw).
    """

    signal_kind: SignalKind
    resolution_minutes: int
    start_timestamp: datetime
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("time series must be a non-empty 1-D sequence")
        if self.resolution_minutes <= 0:
            raise ValueError("resolution must be positive")
        if self.start_timestamp.tzinfo is None:
            raise ValueError("start_timestamp must be timezone-aware (UTC)")
        if np.any(vals < 0.0):
            raise ValueError(f"negative value in {self.signal_kind.value} series")

    def __len__(self) -> int:
        return int(self.values.size)

    def timestamp_at(self, index: int) -> datetime:
        return self.start_timestamp + timedelta(minutes=self.resolution_minutes * index)

    def index_at(self, ts: datetime) -> int:
        """Sample index of an aligned timestamp (raises if off-grid)."""
        delta = (ts - self.start_timestamp).total_seconds()
        step = self.resolution_minutes * 60.0
        idx = delta / step
        if abs(idx - round(idx)) > 1e-9:
            raise ValueError(f"timestamp {ts} is not aligned to the {self.resolution_minutes}-min grid")
        return int(round(idx))


@dataclass(frozen=True)
class NormalizationParams:
    """Min-max scaling bounds, fitted on training data only."""

    min_value: float
    max_value: float

    def __post_init__(self):
        if math.isnan(self.min_value) or math.isnan(self.max_value):
            raise ValueError("normalization bounds must be finite")
        if self.max_value < self.min_value:
            raise ValueError("max_value must be >= min_value")

    @property
    def is_constant(self) -> bool:
        return self.max_value == self.min_value


def fit_normalization(train_values: Sequence[float]) -> NormalizationParams:
    """Min/max of the training slice. A flat slice is flagged constant."""
    vals = np.asarray(train_values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot fit normalization on an empty sequence")
    return NormalizationParams(float(vals.min()), float(vals.max()))


def normalize(x, p: NormalizationParams):
    """Affine map to [0,1] on the fitted range; constant series pin at 0.5.

    Out-of-range x passes through the same affine map (values can exceed
    [0,1] on test data; that is expected).
    """
    if p.is_constant:
        return np.full_like(np.asarray(x, dtype=np.float64), 0.5) if np.ndim(x) else 0.5
    return (np.asarray(x, dtype=np.float64) - p.min_value) / (p.max_value - p.min_value)


def denormalize(x, p: NormalizationParams):
    """Inverse of normalize; for a constant series every input maps back to it."""
    if p.is_constant:
        return np.full_like(np.asarray(x, dtype=np.float64), p.min_value) if np.ndim(x) else p.min_value
    return np.asarray(x, dtype=np.float64) * (p.max_value - p.min_value) + p.min_value


@dataclass(frozen=True)
class WindowedDataset:
    """Supervised sliding windows over one normalized series.

    inputs[i] covers lookback consecutive samples; targets[i] is the
    immediately following horizon samples. Window i starts at source index i,
    so windows are chronological by construction.
    """

    lookback: int
    horizon: int
    inputs: np.ndarray   # (n, lookback), normalized
    targets: np.ndarray  # (n, horizon), normalized
    norm: NormalizationParams

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must pair up")
        if self.inputs.shape[1] != self.lookback or self.targets.shape[1] != self.horizon:
            raise ValueError("window shapes do not match lookback/horizon")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def make_windows(series: TimeSeries, lookback: int, horizon: int,
                 norm: NormalizationParams) -> WindowedDataset:
    """Slide a (lookback -> horizon) window over the series with stride 1."""
    if lookback <= 0 or horizon <= 0:
        raise ValueError("lookback and horizon must be positive")
    n = len(series) - lookback - horizon + 1
    if n <= 0:
        raise ValueError(
            f"series too short: need at least {lookback + horizon} samples, have {len(series)}")
    scaled = normalize(series.values, norm)
    windows = np.lib.stride_tricks.sliding_window_view(scaled, lookback + horizon)
    inputs = np.ascontiguousarray(windows[:n, :lookback])
    targets = np.ascontiguousarray(windows[:n, lookback:])
    return WindowedDataset(lookback, horizon, inputs, targets, norm)


def split_train_test(ds: WindowedDataset, train_fraction: float):
    """Chronological split: first floor(n*fraction) pairs train, rest test.

    Random splits would leak future samples into training, so the boundary
    is a hard cut in window order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(ds)
    n_train = int(math.floor(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split leaves an empty side ({n_train}/{n - n_train})")
    train = WindowedDataset(ds.lookback, ds.horizon,
                            ds.inputs[:n_train], ds.targets[:n_train], ds.norm)
    test = WindowedDataset(ds.lookback, ds.horizon,
                           ds.inputs[n_train:], ds.targets[n_train:], ds.norm)
    return train, test


def prepare_supervised(series: TimeSeries, lookback: int, horizon: int,
                       train_fraction: float):
    """Fit normalization on the training region only, window, then split.

    The normalization sees exactly the raw samples underlying the training
    windows (inputs and targets), never any sample that only test windows
    touch.

    Returns (train, test, norm).
    """
    n = len(series) - lookback - horizon + 1
    if n <= 1:
        raise ValueError("series too short to split")
    n_train = int(math.floor(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ValueError("train_fraction leaves an empty split")
    norm = fit_normalization(series.values[: n_train + lookback + horizon - 1])
    ds = make_windows(series, lookback, horizon, norm)
    return split_train_test(ds, train_fraction) + (norm,)


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

def _parse_timestamp(raw: str) -> datetime:
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def load_csv(path, signal_kind: SignalKind, resolution_minutes: int) -> TimeSeries:
    """Read a `timestamp,value` CSV into a gap-free TimeSeries.

    Gaps of up to MAX_INTERPOLATED_GAP consecutive missing samples are filled
    by linear interpolation; longer gaps abort the load. Timestamps must be
    ISO-8601, strictly ascending, and aligned to the resolution grid.
    """
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != CSV_HEADER:
            raise ValueError(f"{path}: expected header '{','.join(CSV_HEADER)}'")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                ts = _parse_timestamp(row[0])
                val = float(row[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if val < 0.0:
                raise ValueError(f"{path}:{lineno}: negative value for {signal_kind.value}")
            rows.append((ts, val))
    if not rows:
        raise ValueError(f"{path}: no data rows")

    step = timedelta(minutes=resolution_minutes)
    start = rows[0][0]
    values = [rows[0][1]]
    for (prev_ts, prev_val), (ts, val) in zip(rows, rows[1:]):
        delta = ts - prev_ts
        if delta <= timedelta(0):
            raise ValueError(f"{path}: timestamps not strictly ascending at {ts}")
        steps = delta / step
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"{path}: timestamp {ts} off the {resolution_minutes}-min grid")
        steps = int(round(steps))
        missing = steps - 1
        if missing > MAX_INTERPOLATED_GAP:
            raise ValueError(
                f"{path}: gap too long before {ts} ({missing} samples missing, "
                f"limit {MAX_INTERPOLATED_GAP})")
        for k in range(1, steps):
            values.append(prev_val + (val - prev_val) * k / steps)
        values.append(val)
    return TimeSeries(signal_kind, resolution_minutes, start, np.asarray(values))


def save_csv(path, series: TimeSeries) -> None:
    """Write a TimeSeries as `timestamp,value` with ISO-8601 UTC timestamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i, val in enumerate(series.values):
            writer.writerow([series.timestamp_at(i).isoformat(), repr(float(val))])


# ---------------------------------------------------------------------------
# Synthetic community generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProsumerDataset:
    """One community member's raw signals. Consumption is always metered;
    PV and EV exist only for prosumers that own the hardware."""

    prosumer_id: str
    consumption: TimeSeries
    pv: Optional[TimeSeries] = None
    ev: Optional[TimeSeries] = None


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic community. Same config => identical datasets."""

    n_prosumers: int = 18
    n_with_ev: int = 5
    days: int = 90
    pv_peak_kw: float = 5.0
    consumption_base_kw: float = 0.6
    noise_scale: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.n_prosumers <= 0 or self.days <= 0:
            raise ValueError("n_prosumers and days must be positive")
        if not 0 <= self.n_with_ev <= self.n_prosumers:
            raise ValueError("n_with_ev must be between 0 and n_prosumers")
        if self.pv_peak_kw <= 0 or self.consumption_base_kw <= 0:
            raise ValueError("peak/base levels must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


# Community timeline anchor. Generated hours-of-day are read directly off
# this clock, i.e. the generator's timestamps double as local time.
SYNTHETIC_START = datetime(2018, 5, 1, tzinfo=timezone.utc)

EV_DAYS = 14                       # EV meters only cover the final two weeks
EV_CHARGE_RATES_KW = (3.6, 7.2, 11.0)
PV_DAWN_HOUR = 6.0
PV_DUSK_HOUR = 20.0


def prosumer_id(index: int) -> str:
    return f"p{index:02d}"


def _pv_profile(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    hours = (np.arange(cfg.days * 96) % 96) / 4.0
    peak = cfg.pv_peak_kw * rng.uniform(0.6, 1.4)
    shift = rng.uniform(-1.5, 1.5)        # panel orientation
    cloud = rng.uniform(0.3, 1.0, size=cfg.days)
    cloud_per_sample = np.repeat(cloud, 96)
    h = hours - shift
    span = PV_DUSK_HOUR - PV_DAWN_HOUR
    daylight = (h >= PV_DAWN_HOUR) & (h < PV_DUSK_HOUR)
    bell = np.zeros_like(h)
    bell[daylight] = np.sin(np.pi * (h[daylight] - PV_DAWN_HOUR) / span) ** 2
    noise = rng.standard_normal(h.size)
    values = peak * cloud_per_sample * bell * (1.0 + cfg.noise_scale * noise)
    values[~daylight] = 0.0
    return np.maximum(values, 0.0)


def _consumption_profile(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    hours = (np.arange(cfg.days * 96) % 96) / 4.0
    base = cfg.consumption_base_kw * rng.uniform(0.7, 1.3)
    amp_morning = base * rng.uniform(1.0, 2.0)
    amp_evening = base * rng.uniform(1.5, 3.0)
    mu_morning = 7.5 + rng.uniform(-1.0, 1.0)
    mu_evening = 19.0 + rng.uniform(-1.5, 1.5)
    bump_m = np.exp(-0.5 * ((hours - mu_morning) / 1.2) ** 2)
    bump_e = np.exp(-0.5 * ((hours - mu_evening) / 1.8) ** 2)
    noise = rng.standard_normal(hours.size)
    values = base + amp_morning * bump_m + amp_evening * bump_e \
        + cfg.noise_scale * base * noise
    return np.maximum(values, 0.0)


def _ev_profile(rng: np.random.Generator, cfg: SyntheticConfig, n_days: int) -> np.ndarray:
    """Piecewise-constant charging sessions at a fixed per-prosumer rate.

    No noise term: a charger either draws its rate or is idle, so every
    sample is exactly 0 or charge_rate.
    """
    rate = float(rng.choice(EV_CHARGE_RATES_KW))
    values = np.zeros(n_days * 1440)
    for day in range(n_days):
        if rng.uniform() >= 0.75:
            continue  # car not plugged in today
        arrival = int(np.clip(round(rng.normal(19.5 * 60, 90)), 0, 1439))
        duration = int(rng.uniform(60, 240))
        start = day * 1440 + arrival
        values[start: start + duration] = rate
    return values[: n_days * 1440]


def generate_synthetic_pcg(cfg: SyntheticConfig) -> list[ProsumerDataset]:
    """Generate the whole community, deterministically per cfg.seed.

    PV and consumption run at 15-min resolution over cfg.days; the first
    cfg.n_with_ev prosumers also get a 1-min EV series over the final
    min(days, 14) days. Each (prosumer, signal) draws from its own derived
    RNG stream, so adding prosumers never perturbs existing ones.
    """
    datasets = []
    ev_days = min(cfg.days, EV_DAYS)
    ev_start = SYNTHETIC_START + timedelta(days=cfg.days - ev_days)
    for i in range(cfg.n_prosumers):
        pid = prosumer_id(i)
        pv = TimeSeries(SignalKind.PV, 15, SYNTHETIC_START,
                        _pv_profile(rng_for(cfg.seed, pid, "pv"), cfg))
        cons = TimeSeries(SignalKind.CONSUMPTION, 15, SYNTHETIC_START,
                          _consumption_profile(rng_for(cfg.seed, pid, "consumption"), cfg))
        ev = None
        if i < cfg.n_with_ev:
            ev = TimeSeries(SignalKind.EV, 1, ev_start,
                            _ev_profile(rng_for(cfg.seed, pid, "ev"), cfg, ev_days))
        datasets.append(ProsumerDataset(pid, cons, pv, ev))
    return datasets


def save_community(datasets: Sequence[ProsumerDataset], out_dir) -> None:
    """Export one CSV per (prosumer, signal) under out_dir/<id>/<signal>.csv."""
    out_dir = Path(out_dir)
    for ds in datasets:
        base = out_dir / ds.prosumer_id
        save_csv(base / "consumption.csv", ds.consumption)
        if ds.pv is not None:
            save_csv(base / "pv.csv", ds.pv)
        if ds.ev is not None:
            save_csv(base / "ev.csv", ds.ev)


def load_community(data_dir) -> list[ProsumerDataset]:
    """Read back a directory written by save_community (or a user's export)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    datasets = []
    for sub in sorted(p for p in data_dir.iterdir() if p.is_dir()):
        cons_path = sub / "consumption.csv"
        if not cons_path.exists():
            raise ValueError(f"{sub}: missing consumption.csv")
        cons = load_csv(cons_path, SignalKind.CONSUMPTION, 15)
        pv = ev = None
        if (sub / "pv.csv").exists():
            pv = load_csv(sub / "pv.csv", SignalKind.PV, 15)
        if (sub / "ev.csv").exists():
            ev = load_csv(sub / "ev.csv", SignalKind.EV, 1)
        datasets.append(ProsumerDataset(sub.name, cons, pv, ev))
    if not datasets:
        raise ValueError(f"no prosumer directories found under {data_dir}")
    return datasets
