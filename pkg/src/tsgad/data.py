"""Dataset ingestion, chronological splitting, min-max normalization, sliding
windows, and the synthetic benchmark generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .fileio import atomic_write_text

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}
SPLIT_IDS = {v: k for k, v in SPLIT_NAMES.items()}


class DataError(ValueError):
    """Malformed input data or an impossible pipeline request."""


@dataclass
class TimeSeriesDataset:
    """Rows are timestamps, columns are sensors.

    labels, when present, are 0/1 per row. split, when present, assigns each
    row to train/val/test and must be chronological (nondecreasing).
    """

    sensor_names: list[str]
    values: np.ndarray
    labels: np.ndarray | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("values must be a 2-D (time, sensor) array")
        if len(self.sensor_names) != self.values.shape[1]:
            raise DataError("sensor name count does not match the value columns")
        if self.n_sensors < 2:
            raise DataError("need at least 2 sensors")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_steps,):
                raise DataError("labels must align with rows")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must be 0 or 1")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.int64)
            if self.split.shape != (self.n_steps,):
                raise DataError("split markers must align with rows")
            if not np.isin(self.split, (TRAIN, VAL, TEST)).all():
                raise DataError("unknown split marker")
            if (np.diff(self.split) < 0).any():
                raise DataError("splits must be chronological: train, then val, then test")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]


def assign_splits(ds: TimeSeriesDataset, train_frac: float = 0.6, val_frac: float = 0.2) -> TimeSeriesDataset:
    """Chronological train/val/test assignment by row fractions."""
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise DataError("split fractions must be positive and leave room for test")
    t = ds.n_steps
    train_end = int(t * train_frac)
    val_end = int(t * (train_frac + val_frac))
    split = np.full(t, TEST, dtype=np.int64)
    split[:train_end] = TRAIN
    split[train_end:val_end] = VAL
    return replace(ds, split=split.copy())


def split_range(ds: TimeSeriesDataset, which: int) -> tuple[int, int] | None:
    """Inclusive (start, end) row range of one split, or None if empty."""
    if ds.split is None:
        raise DataError("dataset has no split assignment")
    idx = np.flatnonzero(ds.split == which)
    if idx.size == 0:
        return None
    return int(idx[0]), int(idx[-1])


@dataclass
class NormalizationStats:
    """Per-sensor min/max taken from the train split only."""

    vmin: np.ndarray
    vmax: np.ndarray


def normalize(ds: TimeSeriesDataset) -> tuple[TimeSeriesDataset, NormalizationStats]:
    """Min-max scale every sensor using train-split statistics.

    Values outside the train split are not clamped, so val/test rows may land
    outside [0, 1]. A sensor that is constant on train maps to all zeros.
    """
    rng = split_range(ds, TRAIN)
    if rng is None:
        raise DataError("cannot normalize: train split is empty")
    start, end = rng
    train_rows = ds.values[start : end + 1]
    stats = NormalizationStats(train_rows.min(axis=0), train_rows.max(axis=0))
    return apply_normalization(ds, stats), stats


def apply_normalization(ds: TimeSeriesDataset, stats: NormalizationStats) -> TimeSeriesDataset:
    span = stats.vmax - stats.vmin
    safe = np.where(span > 0, span, 1.0)
    scaled = (ds.values - stats.vmin) / safe
    scaled[:, span <= 0] = 0.0
    return replace(ds, values=scaled)


@dataclass
class WindowBatch:
    """Stride-1 windows of length d. Window m covers rows
    [target_time[m] - d, target_time[m] - 1] as an (n_sensors, d) slice and
    its forecast target is row target_time[m]."""

    x: np.ndarray            # (count, n_sensors, d)
    target: np.ndarray       # (count, n_sensors)
    target_time: np.ndarray  # (count,)

    def __len__(self) -> int:
        return self.x.shape[0]


def make_windows(ds: TimeSeriesDataset, d: int) -> dict[int, WindowBatch]:
    """Build per-split windows; windows and targets never cross a boundary."""
    if d < 1:
        raise DataError("window length must be >= 1")
    out: dict[int, WindowBatch] = {}
    for which in (TRAIN, VAL, TEST):
        rng = split_range(ds, which)
        if rng is None:
            continue
        start, end = rng
        length = end - start + 1
        if length <= d:
            raise DataError(
                f"{SPLIT_NAMES[which]} split has {length} rows, too short for window d={d}"
            )
        count = length - d
        x = np.empty((count, ds.n_sensors, d))
        times = np.arange(start + d, end + 1)
        for m, t in enumerate(times):
            x[m] = ds.values[t - d : t].T
        out[which] = WindowBatch(x=x, target=ds.values[times].copy(), target_time=times)
    return out


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------


def load_csv(path: str, label_column: str | None = None) -> TimeSeriesDataset:
    """Read a sensor CSV: header of names, one row per timestamp, '.' decimals.

    If label_column names a present column, it is parsed as 0/1 labels rather
    than as a sensor. A named but absent column simply means unlabeled data.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        label_idx = None
        if label_column is not None and label_column in header:
            label_idx = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != label_idx]
        if len(names) < 2:
            raise DataError(f"{path}: need at least 2 sensor columns")
        rows: list[list[float]] = []
        labels: list[int] = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            vals = []
            for i, cell in enumerate(row):
                if i == label_idx:
                    if cell not in ("0", "1"):
                        raise DataError(
                            f"{path}: row {r}, column '{header[i]}': label must be 0 or 1, got '{cell}'"
                        )
                    labels.append(int(cell))
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {r}, column '{header[i]}': could not parse '{cell}'"
                    ) from None
            rows.append(vals)
    values = np.asarray(rows, dtype=np.float64)
    if values.size == 0:
        raise DataError(f"{path}: no data rows")
    return TimeSeriesDataset(
        sensor_names=names,
        values=values,
        labels=np.asarray(labels, dtype=np.int64) if label_idx is not None else None,
    )


def save_csv(path: str, ds: TimeSeriesDataset, label_column: str = "label") -> None:
    """Write a dataset back out; floats use repr so a round trip is exact."""
    header = list(ds.sensor_names)
    if ds.labels is not None:
        header.append(label_column)
    lines = [",".join(header)]
    for t in range(ds.n_steps):
        cells = [repr(float(v)) for v in ds.values[t]]
        if ds.labels is not None:
            cells.append(str(int(ds.labels[t])))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


def synth_generate(
    n_sensors: int,
    n_steps: int,
    anomaly_rate: float,
    seed: int,
    train_frac: float = 0.6,
    val_frac: float = 0.2,
    noise_sigma: float = 0.05,
    period: float = 50.0,
) -> TimeSeriesDataset:
    """Phase-shifted coupled sinusoids with injected level-shift segments.

    Sensor 0 is a pure noisy sinusoid; each later sensor adds 0.4 times the
    previous sensor's value lagged one step, so the sensors share structure
    that both heads can learn and an injected shift can violate. Anomalies
    are contiguous segments (length 5..20, magnitude at least three noise
    sigmas drawn from [0.5, 1.5] of the sensor's amplitude, random sign) on
    one to three sensors each, placed in the trailing region of the series so
    the earlier (train/val) rows stay clean. Labels mark injected rows.
    Everything is reproducible from the seed.
    """
    if n_sensors < 2:
        raise DataError("need at least 2 sensors")
    if not 0 < anomaly_rate < 0.5:
        raise DataError("anomaly_rate must be in (0, 0.5)")
    rng = np.random.default_rng(seed)
    phases = 2.0 * np.pi * np.arange(n_sensors) / n_sensors
    t = np.arange(n_steps)
    values = np.empty((n_steps, n_sensors))
    noise = rng.normal(0.0, noise_sigma, (n_steps, n_sensors))
    values[:, 0] = np.sin(2.0 * np.pi * t / period + phases[0]) + noise[:, 0]
    for i in range(1, n_sensors):
        base = np.sin(2.0 * np.pi * t / period + phases[i]) + noise[:, i]
        coupled = np.empty(n_steps)
        coupled[0] = base[0]
        coupled[1:] = base[1:] + 0.4 * values[:-1, i - 1]
        values[:, i] = coupled
    amplitude = (values.max(axis=0) - values.min(axis=0)) / 2.0

    target = max(int(round(anomaly_rate * n_steps)), 5)
    lengths = []
    total = 0
    while total < target:
        seg = int(rng.integers(5, 21))
        lengths.append(seg)
        total += seg
    test_len = n_steps - int(n_steps * (train_frac + val_frac))
    region_len = max(test_len, total + 5 * (len(lengths) + 1))
    if region_len > int(0.9 * n_steps):
        raise DataError("anomaly_rate too high for this series length")
    region_start = n_steps - region_len

    labels = np.zeros(n_steps, dtype=np.int64)
    gaps = rng.multinomial(region_len - total, [1.0 / (len(lengths) + 1)] * (len(lengths) + 1))
    pos = region_start
    max_hit = min(3, n_sensors)
    for seg, gap in zip(lengths, gaps):
        pos += int(gap)
        hit = rng.choice(n_sensors, size=int(rng.integers(1, max_hit + 1)), replace=False)
        for s in hit:
            magnitude = max(3.0 * noise_sigma, rng.uniform(0.5, 1.5) * amplitude[s])
            sign = 1.0 if rng.random() < 0.5 else -1.0
            values[pos : pos + seg, s] += sign * magnitude
        labels[pos : pos + seg] = 1
        pos += seg

    ds = TimeSeriesDataset(
        sensor_names=[f"s{i}" for i in range(n_sensors)],
        values=values,
        labels=labels,
    )
    return assign_splits(ds, train_frac, val_frac)
