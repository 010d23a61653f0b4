"""Forecast metrics, synthetic sensor data, and the ablation / horizon experiments."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    DEFAULT_SPLIT,
    NormalizationStats,
    TimeSeriesFrame,
    WindowedDataset,
    chronological_split,
    make_windows,
)
from .model import HORIZONS, ModelConfig, get_variant, predict, train

log = logging.getLogger(__name__)

MAPE_EPSILON = 1e-8
PARAMETER_NAMES = (
    "Chl", "Sal", "SpCond", "Temp", "DO", "PE", "Cond",
    "TDS", "DO_pct", "pH", "pH_mV", "Turb", "Chl_RFU", "PE_RFU",
)  # fmt: skip
# Row labels for the horizon sweep.
SWEEP_MODELS = ("AGTCNSD", "TCN")


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricTriple:
    mae: float
    rmse: float
    mape: float


def compute_metrics(y, y_hat, mape_epsilon: float = MAPE_EPSILON) -> MetricTriple:
    """MAE, RMSE and MAPE over flattened arrays.

    Sums accumulate strictly left to right so results match a scalar loop
    bit for bit. MAPE divides by ``max(|y|, mape_epsilon)``.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    n = y.size
    if n == 0:
        raise ValueError("cannot score an empty prediction set")
    err = y - y_hat
    abs_err = np.abs(err)
    mae = np.add.accumulate(abs_err)[-1] / n
    rmse = math.sqrt(np.add.accumulate(err * err)[-1] / n)
    mape = np.add.accumulate(abs_err / np.maximum(np.abs(y), mape_epsilon))[-1] / n
    return MetricTriple(float(mae), float(rmse), float(mape))


# ---------------------------------------------------------------- synthetic data

def generate_synthetic(
    n_steps: int,
    n_features: int,
    seed: int,
    coupling_strength: float,
    noise_std: float = 0.1,
    noise_ar: float = 0.9,
    missing_rate: float = 0.0,
    outlier_rate: float = 0.0,
    step_minutes: int = 30,
    start: str = "2021-01-01T00:00:00",
) -> TimeSeriesFrame:
    """Reproducible multivariate sensor-like series.

    Every feature is a linear ramp plus a slow sinusoid, two faster sinusoids
    and AR(1) Gaussian noise, rescaled to its own offset and spread. The first
    column (``Chl``) additionally receives ``coupling_strength`` times a signed
    mix of the other features' lagged values. Optional missing cells (NaN)
    and spike outliers are injected after the fact.
    """
    if n_steps < 200 or n_features < 2:
        raise ValueError(f"need n_steps >= 200 and n_features >= 2, got {n_steps}, {n_features}")
    if not 0 <= noise_ar < 1 or noise_std < 0:
        raise ValueError("noise_ar must lie in [0, 1) and noise_std must be nonnegative")
    if not (0 <= missing_rate < 1 and 0 <= outlier_rate < 1):
        raise ValueError("missing_rate and outlier_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    day = 24 * 60 / step_minutes
    names = [PARAMETER_NAMES[j] if j < len(PARAMETER_NAMES) else f"X{j}" for j in range(n_features)]

    # each feature's periods sit in their own slot so no two features share a frequency
    slot1 = rng.permutation(n_features)
    slot2 = rng.permutation(n_features)
    base = np.empty((n_features, n_steps))
    for j in range(n_features):
        slope = rng.uniform(-0.15, 0.15)
        slow_period = n_steps / rng.uniform(1.5, 4.0)
        p1 = day * (0.6 + 1.0 * (slot1[j] + rng.uniform(0.3, 0.7)) / n_features)
        p2 = day * (0.2 + 0.3 * (slot2[j] + rng.uniform(0.3, 0.7)) / n_features)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        amps = (rng.uniform(0.05, 0.15), rng.uniform(0.6, 1.0), rng.uniform(0.2, 0.5))
        shocks = rng.normal(0.0, 1.0, size=n_steps)
        noise = np.empty(n_steps)
        acc = 0.0
        for i in range(n_steps):
            acc = noise_ar * acc + noise_std * shocks[i]
            noise[i] = acc
        base[j] = (
            slope * t / n_steps
            + amps[0] * np.sin(2 * np.pi * t / slow_period + ph[0])
            + amps[1] * np.sin(2 * np.pi * t / p1 + ph[1])
            + amps[2] * np.sin(2 * np.pi * t / p2 + ph[2])
            + noise
        )

    signal = base.copy()
    lags = rng.integers(1, max(1, int(day // 8)) + 1, size=n_features)
    weights = rng.choice([-1.0, 1.0], size=n_features) / math.sqrt(n_features - 1)
    for j in range(1, n_features):
        lagged = np.concatenate([np.full(lags[j], base[j, 0]), base[j, : n_steps - lags[j]]])
        signal[0] += coupling_strength * weights[j] * lagged

    offsets = rng.uniform(5.0, 30.0, size=n_features)
    scales = rng.uniform(0.5, 3.0, size=n_features)
    values = offsets[:, None] + scales[:, None] * signal

    if outlier_rate > 0:
        spikes = rng.random(values.shape) < outlier_rate
        values = values + spikes * rng.choice([-1.0, 1.0], size=values.shape) * 12.0 * scales[:, None]
    if missing_rate > 0:
        values = np.where(rng.random(values.shape) < missing_rate, np.nan, values)

    step = np.timedelta64(step_minutes, "m")
    stamps = np.datetime64(start, "s") + np.arange(n_steps) * step
    return TimeSeriesFrame(stamps, {n: values[j] for j, n in enumerate(names)})


def benchmark_frame(seed: int = 0) -> TimeSeriesFrame:
    """Fixed clean dataset used by the comparative experiments (1 h sampling, 7 features)."""
    frame = generate_synthetic(3000, 7, seed=seed, coupling_strength=2.0, step_minutes=60)
    return frame


# ---------------------------------------------------------------- experiment grid

@dataclass
class CellResult:
    variant: str
    horizon: int
    seeds: list[int]
    runs: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    source: str = "computed"

    def _median(self, key: str) -> float:
        vals = [r[key] for r in self.runs]
        return float(np.median(vals)) if vals else math.nan

    @property
    def mae(self) -> float:
        return self._median("mae")

    @property
    def rmse(self) -> float:
        return self._median("rmse")

    @property
    def mape(self) -> float:
        return self._median("mape")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "horizon": self.horizon,
            "seed_aggregate": f"median of {len(self.runs)}" if self.source == "computed" else "external",
            "mae": _json_float(self.mae),
            "rmse": _json_float(self.rmse),
            "mape": _json_float(self.mape),
            "seeds": list(self.seeds),
            "runs": self.runs,
            "errors": self.errors,
            "source": self.source,
        }


def _json_float(v: float):
    return None if math.isnan(v) else v


@dataclass
class ExperimentReport:
    meta: dict
    cells: list[CellResult]

    def cell(self, variant: str, horizon: int) -> CellResult:
        for c in self.cells:
            if c.variant == variant and c.horizon == horizon:
                return c
        raise KeyError((variant, horizon))

    def to_json(self) -> dict:
        return {"meta": self.meta, "cells": [c.to_dict() for c in self.cells]}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "horizon", "seed_aggregate", "n_runs", "n_errors", "mae", "rmse", "mape"])
            for c in self.cells:
                d = c.to_dict()
                w.writerow([c.variant, c.horizon, d["seed_aggregate"], len(c.runs), len(c.errors), c.mae, c.rmse, c.mape])

    def save_table(self, path) -> None:
        """Models as rows, one MAE/RMSE/MAPE column group per horizon."""
        horizons = sorted({c.horizon for c in self.cells})
        variants = list(dict.fromkeys(c.variant for c in self.cells))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model"] + [f"{m}@{h}" for h in horizons for m in ("mae", "rmse", "mape")])
            for v in variants:
                row = [v]
                for h in horizons:
                    try:
                        c = self.cell(v, h)
                        row += [c.mae, c.rmse, c.mape]
                    except KeyError:
                        row += ["", "", ""]
                w.writerow(row)


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _fit_and_score(task: dict) -> dict:
    """Train one (variant, horizon, seed) cell and score it on the test split."""
    config = ModelConfig.from_dict(task["config"])
    train_set, val_set, test_set = task["splits"]
    params, history = train(train_set, val_set, config)
    pred = predict(params, config, test_set.inputs)
    y = test_set.targets
    if task["scale"] is not None:
        lo, hi = task["scale"]
        pred = pred * (hi - lo) + lo
        y = y * (hi - lo) + lo
    m = compute_metrics(y, pred, task["mape_epsilon"])
    return {"seed": config.seed, **asdict(m), "best_epoch": history.best_epoch}


def run_grid(
    frame: TimeSeriesFrame,
    target_column: str,
    config: ModelConfig,
    variants: Sequence[str],
    horizons: Sequence[int],
    seeds: Sequence[int],
    stats: NormalizationStats | None = None,
    raw_scale: bool = True,
    fractions: Sequence[float] = DEFAULT_SPLIT,
    mape_epsilon: float = MAPE_EPSILON,
    workers: int = 1,
    dataset_id: str = "",
    features: Sequence[str] | None = None,
) -> ExperimentReport:
    """Train every (variant, horizon, seed) on a normalized frame and report seed medians.

    Only the variant, horizon and seed differ from ``config`` between runs.
    A failing run is recorded in its cell and the sweep continues.
    """
    for v in variants:
        get_variant(v)
    if raw_scale and stats is None:
        raise ValueError("raw-scale metrics need the normalization stats")
    scale = (stats.minimum[target_column], stats.maximum[target_column]) if raw_scale else None
    features = list(features) if features is not None else frame.names
    tasks, cells = [], []
    for h in horizons:
        ds = make_windows(frame, target_column, config.input_len, h, features)
        splits = chronological_split(ds, fractions)
        for v in variants:
            cell = CellResult(v, int(h), [int(s) for s in seeds])
            cells.append(cell)
            for s in seeds:
                cfg = config.replace(variant=v, horizon=int(h), seed=int(s), n_nodes=len(features))
                tasks.append((cell, {"config": cfg.to_dict(), "splits": splits, "scale": scale, "mape_epsilon": mape_epsilon}))

    def record(cell: CellResult, seed: int, outcome):
        if isinstance(outcome, BaseException):
            log.warning("%s h=%d seed=%d failed: %s", cell.variant, cell.horizon, seed, outcome)
            cell.errors.append({"seed": seed, "error": f"{type(outcome).__name__}: {outcome}"})
        else:
            cell.runs.append(outcome)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(cell, t["config"]["seed"], pool.submit(_fit_and_score, t)) for cell, t in tasks]
            for cell, seed, fut in futures:
                try:
                    record(cell, seed, fut.result())
                except Exception as exc:  # noqa: BLE001 - failures are data here
                    record(cell, seed, exc)
    else:
        for cell, t in tasks:
            try:
                outcome = _fit_and_score(t)
            except Exception as exc:  # noqa: BLE001
                outcome = exc
            record(cell, t["config"]["seed"], outcome)

    meta = {
        "seeds": [int(s) for s in seeds],
        "dataset_id": dataset_id,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "target": target_column,
        "features": features,
        "scale": "raw" if raw_scale else "normalized",
        "split": list(fractions),
        "mape_epsilon": mape_epsilon,
    }
    return ExperimentReport(meta, cells)


def run_ablation(
    frame: TimeSeriesFrame,
    target_column: str,
    config: ModelConfig,
    horizons: Sequence[int] = (24,),
    variants: Sequence[str] = ("model1", "model2", "model3", "model4", "model5", "model6"),
    seeds: Sequence[int] = (0, 1, 2),
    **kwargs,
) -> ExperimentReport:
    return run_grid(frame, target_column, config, variants, horizons, seeds, **kwargs)


def horizon_sweep(
    frame: TimeSeriesFrame,
    target_column: str,
    config: ModelConfig,
    horizons: Sequence[int] = HORIZONS,
    models: Sequence[str] = SWEEP_MODELS,
    seeds: Sequence[int] = (0, 1, 2),
    external: Sequence[dict] = (),
    **kwargs,
) -> ExperimentReport:
    """AGTCNSD vs the TCN baseline at each horizon.

    ``external`` rows (e.g. published LSTM numbers) are carried into the
    report untouched, as ``{"variant", "horizon", "mae", "rmse", "mape"}``.
    """
    report = run_grid(frame, target_column, config, models, horizons, seeds, **kwargs)
    for row in external:
        cell = CellResult(str(row["variant"]), int(row["horizon"]), [], source="external")
        cell.runs.append({"seed": None, "mae": float(row["mae"]), "rmse": float(row["rmse"]), "mape": float(row["mape"])})
        report.cells.append(cell)
    return report


def write_traces(path, dataset: WindowedDataset, predictions, timestamps=None, step: int | None = None) -> None:
    """CSV of (t, y, y_hat) for one forecast step of every window (default: the last)."""
    step = dataset.horizon if step is None else step
    if not 1 <= step <= dataset.horizon:
        raise ValueError(f"step must lie in [1, {dataset.horizon}]")
    predictions = np.asarray(predictions)
    rows = dataset.starts + dataset.input_len + step - 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y", "y_hat"])
        for i, r in enumerate(rows):
            t = str(timestamps[r]) if timestamps is not None else int(r)
            w.writerow([t, repr(float(dataset.targets[i, step - 1])), repr(float(predictions[i, step - 1]))])
