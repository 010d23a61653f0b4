"""Sensor CSV ingestion, cleaning, feature selection and windowing."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

VALID, MISSING, OUTLIER = 0, 1, 2
FLAG_NAMES = {VALID: "valid", MISSING: "missing", OUTLIER: "outlier"}

PAUTA_SIGMAS = 3.0
DEFAULT_THRESHOLD = 0.2
REDUNDANCY_THRESHOLD = 0.95
DEFAULT_SPLIT = (0.7, 0.15, 0.15)
DEFAULT_DOWNSAMPLE = 2


class DataError(ValueError):
    """Base class for data pipeline failures."""


class HeaderError(DataError):
    pass


class TimestampOrderError(DataError):
    pass


class EmptyColumnError(DataError):
    pass


class UndefinedCorrelationError(DataError):
    pass


class WindowError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass
class TimeSeriesFrame:
    timestamps: np.ndarray  # datetime64[s]
    columns: dict[str, np.ndarray]
    flags: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        n = len(self.timestamps)
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}
        for name, col in self.columns.items():
            if col.shape != (n,):
                raise DataError(f"column {name!r} has length {len(col)}, expected {n}")
            if name not in self.flags:
                self.flags[name] = np.where(np.isfinite(col), VALID, MISSING).astype(np.int8)
        bad = np.nonzero(np.diff(self.timestamps) <= np.timedelta64(0, "s"))[0]
        if bad.size:
            raise TimestampOrderError(
                f"timestamps must be strictly increasing (row {bad[0] + 1} is {self.timestamps[bad[0] + 1]})"
            )

    def __len__(self):
        return len(self.timestamps)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def values(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Stack columns into a ``[rows, len(names)]`` array."""
        names = self.names if names is None else list(names)
        return np.stack([self.columns[n] for n in names], axis=1)

    def select(self, names: Sequence[str]) -> "TimeSeriesFrame":
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise DataError(f"unknown columns: {missing}")
        return TimeSeriesFrame(
            self.timestamps.copy(),
            {n: self.columns[n].copy() for n in names},
            {n: self.flags[n].copy() for n in names},
        )

    def rows(self, index) -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            self.timestamps[index],
            {n: c[index] for n, c in self.columns.items()},
            {n: f[index] for n, f in self.flags.items()},
        )

    def is_clean(self) -> bool:
        return all(bool(np.all(f == VALID)) for f in self.flags.values())


def _parse_timestamp(text: str) -> np.datetime64:
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def load_csv(path, schema: Sequence[str] | None = None) -> TimeSeriesFrame:
    """Read a CSV whose first column is an ISO-8601 timestamp.

    Empty or non-numeric cells are kept as NaN and flagged missing. If
    ``schema`` is given the value columns must match it exactly, in order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise HeaderError(f"{path}: empty file") from None
        if len(header) < 2 or any(not h for h in header) or len(set(header)) != len(header):
            raise HeaderError(f"{path}: malformed header {header}")
        names = header[1:]
        if schema is not None and list(schema) != names:
            raise HeaderError(f"{path}: header {names} does not match schema {list(schema)}")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise HeaderError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = _parse_timestamp(row[0])
            except ValueError:
                raise TimestampOrderError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            if stamps and ts <= stamps[-1]:
                kind = "duplicated" if ts == stamps[-1] else "non-increasing"
                raise TimestampOrderError(f"{path}:{lineno}: {kind} timestamp {row[0]!r}")
            stamps.append(ts)
            vals = []
            for cell in row[1:]:
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                vals.append(v if math.isfinite(v) else math.nan)
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return TimeSeriesFrame(np.array(stamps, dtype="datetime64[s]"), {n: data[:, i] for i, n in enumerate(names)})


def write_csv(frame: TimeSeriesFrame, path, with_flags: bool = False) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        header = ["timestamp", *frame.names]
        if with_flags:
            header += [f"{n}_flag" for n in frame.names]
        w.writerow(header)
        for i, ts in enumerate(frame.timestamps):
            row = [str(ts)]
            for n in frame.names:
                v = frame.columns[n][i]
                row.append("" if not np.isfinite(v) else repr(float(v)))
            if with_flags:
                row += [FLAG_NAMES[int(frame.flags[n][i])] for n in frame.names]
            w.writerow(row)


# ---------------------------------------------------------------- cleaning

def flag_outliers_pauta(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Flag cells farther than three population standard deviations from the column mean."""
    flags = {}
    for name, col in frame.columns.items():
        f = frame.flags[name].copy()
        valid = f == VALID
        if valid.sum() < 2:
            raise EmptyColumnError(f"column {name!r} has fewer than 2 valid cells")
        vals = col[valid]
        mu = vals.mean()
        sigma = vals.std()
        f[valid & (np.abs(col - mu) > PAUTA_SIGMAS * sigma)] = OUTLIER
        flags[name] = f
    return TimeSeriesFrame(frame.timestamps.copy(), {n: c.copy() for n, c in frame.columns.items()}, flags)


def interpolate_linear(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Replace missing/outlier cells by piecewise-linear interpolation in time.

    Gaps before the first or after the last valid cell take that cell's value.
    """
    t = (frame.timestamps - frame.timestamps[0]).astype(np.float64)
    cols, flags = {}, {}
    for name, col in frame.columns.items():
        valid = frame.flags[name] == VALID
        if not valid.any():
            raise EmptyColumnError(f"column {name!r} has no valid cells")
        out = col.copy()
        gaps = ~valid
        if gaps.any():
            out[gaps] = np.interp(t[gaps], t[valid], col[valid])
        cols[name] = out
        flags[name] = np.zeros(len(col), dtype=np.int8)
    return TimeSeriesFrame(frame.timestamps.copy(), cols, flags)


def downsample(frame: TimeSeriesFrame, factor: int) -> TimeSeriesFrame:
    if int(factor) != factor or factor < 1:
        raise DataError(f"downsample factor must be a positive integer, got {factor}")
    return frame.rows(slice(0, None, int(factor)))


# ---------------------------------------------------------------- feature selection

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DataError(f"pearson needs equal-length 1-D inputs of length >= 2, got {x.shape} and {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.sqrt(np.sum(dx * dx))
    syy = np.sqrt(np.sum(dy * dy))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    r = float(np.sum(dx * dy) / (sxx * syy))
    return min(1.0, max(-1.0, r))


def select_features(
    frame: TimeSeriesFrame,
    target_column: str,
    threshold: float = DEFAULT_THRESHOLD,
    redundancy: float = REDUNDANCY_THRESHOLD,
) -> list[str]:
    """Columns whose |r| with the target exceeds ``threshold``, strongest first.

    The target is always first. A column nearly duplicating (|r| > ``redundancy``)
    one already kept is dropped.
    """
    if target_column not in frame.columns:
        raise DataError(f"target column {target_column!r} not in frame")
    if not 0 <= threshold < 1:
        raise DataError(f"threshold must lie in [0, 1), got {threshold}")
    y = frame.columns[target_column]
    scored = []
    for name, col in frame.columns.items():
        if name == target_column:
            continue
        try:
            r = pearson(col, y)
        except UndefinedCorrelationError:
            continue
        if abs(r) > threshold:
            scored.append((abs(r), name))
    scored.sort(key=lambda s: -s[0])
    kept = [target_column]
    for _, name in scored:
        if all(abs(pearson(frame.columns[name], frame.columns[k])) <= redundancy for k in kept):
            kept.append(name)
    return kept


def correlation_ranking(frame: TimeSeriesFrame, target_column: str) -> list[tuple[str, float]]:
    """Signed r of every non-constant column against the target, by descending |r|."""
    y = frame.columns[target_column]
    out = []
    for name, col in frame.columns.items():
        try:
            out.append((name, pearson(col, y)))
        except UndefinedCorrelationError:
            pass
    return sorted(out, key=lambda s: -abs(s[1]))


# ---------------------------------------------------------------- normalization

@dataclass
class NormalizationStats:
    minimum: dict[str, float]
    maximum: dict[str, float]

    def __post_init__(self):
        for k in self.minimum:
            if self.maximum[k] < self.minimum[k]:
                raise DataError(f"stats for {k!r}: max < min")

    def to_dict(self) -> dict:
        return {k: {"min": self.minimum[k], "max": self.maximum[k]} for k in self.minimum}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls({k: float(v["min"]) for k, v in d.items()}, {k: float(v["max"]) for k, v in d.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def inverse(self, column: str, values):
        lo, hi = self.minimum[column], self.maximum[column]
        return np.asarray(values) * (hi - lo) + lo


def minmax_fit_transform(
    frame: TimeSeriesFrame, stats: NormalizationStats | None = None
) -> tuple[TimeSeriesFrame, NormalizationStats]:
    if stats is None:
        stats = NormalizationStats(
            {n: float(np.nanmin(c)) for n, c in frame.columns.items()},
            {n: float(np.nanmax(c)) for n, c in frame.columns.items()},
        )
    cols = {}
    for name, col in frame.columns.items():
        lo, hi = stats.minimum[name], stats.maximum[name]
        cols[name] = np.zeros_like(col) if hi == lo else (col - lo) / (hi - lo)
    flags = {n: f.copy() for n, f in frame.flags.items()}
    return TimeSeriesFrame(frame.timestamps.copy(), cols, flags), stats


# ---------------------------------------------------------------- windows

@dataclass
class WindowedDataset:
    inputs: np.ndarray  # [count, input_len, n_features]
    targets: np.ndarray  # [count, horizon]
    input_len: int
    horizon: int
    starts: np.ndarray | None = None  # row index of each window's first input row

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise WindowError("inputs and targets differ in count")
        if self.starts is None:
            self.starts = np.arange(len(self.inputs))

    def __len__(self):
        return len(self.inputs)

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(
            self.inputs[index], self.targets[index], self.input_len, self.horizon, self.starts[index]
        )


def make_windows(
    frame: TimeSeriesFrame,
    target_column: str,
    input_len: int,
    horizon: int,
    features: Sequence[str] | None = None,
) -> WindowedDataset:
    if input_len < 1 or horizon < 1:
        raise WindowError("input_len and horizon must be positive")
    if target_column not in frame.columns:
        raise DataError(f"target column {target_column!r} not in frame")
    n = len(frame)
    need = input_len + horizon
    if n < need:
        raise WindowError(f"frame has {n} rows; at least {need} required for input {input_len} + horizon {horizon}")
    values = frame.values(features)
    target = frame.columns[target_column]
    count = n - need + 1
    inputs = sliding_window_view(values, input_len, axis=0)[:count].transpose(0, 2, 1).copy()
    targets = sliding_window_view(target[input_len:], horizon)[:count].copy()
    return WindowedDataset(inputs, targets, input_len, horizon, np.arange(count))


def chronological_split(
    dataset: WindowedDataset, fractions: Sequence[float] = DEFAULT_SPLIT
) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Split windows in time order: train and validation sizes are floored, test takes the rest."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise SplitError(f"split fractions must be three positive numbers, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    n_train = int(math.floor(n * fractions[0] + 1e-9))
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(f"{n} windows give an empty split ({n_train}/{n_val}/{n_test})")
    return (
        dataset.subset(slice(0, n_train)),
        dataset.subset(slice(n_train, n_train + n_val)),
        dataset.subset(slice(n_train + n_val, n)),
    )


def preprocess(
    frame: TimeSeriesFrame,
    target_column: str,
    threshold: float = DEFAULT_THRESHOLD,
    factor: int = DEFAULT_DOWNSAMPLE,
    train_fraction: float = DEFAULT_SPLIT[0],
) -> tuple[TimeSeriesFrame, NormalizationStats, list[str]]:
    """Clean, downsample, select features and min-max scale a raw frame.

    Feature selection and scaling statistics use only the leading
    ``train_fraction`` of rows, so later rows never inform preprocessing.
    """
    cleaned = downsample(interpolate_linear(flag_outliers_pauta(frame)), factor)
    n_fit = max(2, int(len(cleaned) * train_fraction))
    head = cleaned.rows(slice(0, n_fit))
    features = select_features(head, target_column, threshold)
    _, stats = minmax_fit_transform(head.select(features))
    normalized, _ = minmax_fit_transform(cleaned.select(features), stats)
    return normalized, stats, features
