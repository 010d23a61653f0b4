"""Command-line entry point: ``agtcnsd <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .autodiff import ShapeError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_DOWNSAMPLE,
    DEFAULT_SPLIT,
    DEFAULT_THRESHOLD,
    DataError,
    NormalizationStats,
    WindowedDataset,
    chronological_split,
    load_csv,
    make_windows,
    preprocess,
    write_csv,
)
from .decomposition import decompose
from .evaluation import (
    MAPE_EPSILON,
    compute_metrics,
    config_hash,
    generate_synthetic,
    horizon_sweep,
    run_ablation,
    write_traces,
)
from .graph import adaptive_adjacency
from .model import HORIZONS, VARIANTS, ModelConfig, TrainingError, predict, train

log = logging.getLogger("agtcnsd")

TARGET = "Chl"


@dataclass
class RunConfig:
    """Model hyperparameters plus pipeline options, as stored in a config file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    target: str = TARGET
    threshold: float = DEFAULT_THRESHOLD
    downsample: int = DEFAULT_DOWNSAMPLE
    split: tuple[float, float, float] = DEFAULT_SPLIT
    mape_epsilon: float = MAPE_EPSILON

    PIPELINE_KEYS = ("target", "threshold", "downsample", "split", "mape_epsilon")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Flat JSON object: pipeline keys plus any ``ModelConfig`` field."""
        if not isinstance(d, dict):
            raise ValueError("config file must hold a JSON object")
        model_keys = {f.name for f in fields(ModelConfig)}
        unknown = set(d) - model_keys - set(cls.PIPELINE_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict({k: v for k, v in d.items() if k in model_keys})
        pipe = {k: d[k] for k in cls.PIPELINE_KEYS if k in d}
        if "split" in pipe:
            pipe["split"] = tuple(float(x) for x in pipe["split"])
        return cls(model=model, **pipe)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update({k: getattr(self, k) for k in self.PIPELINE_KEYS})
        d["split"] = list(self.split)
        return d


# flag name -> (ModelConfig field, type)
MODEL_FLAGS = {
    "--input-len": ("input_len", int),
    "--horizon": ("horizon", int),
    "--variant": ("variant", str),
    "--epochs": ("epochs", int),
    "--batch-size": ("batch_size", int),
    "--learning-rate": ("learning_rate", float),
    "--avg-window": ("avg_window", int),
    "--topk": ("topk", int),
    "--seed": ("seed", int),
}


def _add_model_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    defaults = ModelConfig()
    g = p.add_argument_group("model overrides (flags win over --config)")
    for flag, (name, typ) in MODEL_FLAGS.items():
        if flag in skip:
            continue
        g.add_argument(flag, dest=name, type=typ, default=None, help=f"default {getattr(defaults, name)!r}")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline overrides (flags win over --config)")
    g.add_argument("--target", default=None, help=f"target column, default {TARGET!r}")
    g.add_argument("--threshold", type=float, default=None, help=f"Pearson selection threshold, default {DEFAULT_THRESHOLD}")
    g.add_argument("--downsample", type=int, default=None, help=f"keep every n-th row, default {DEFAULT_DOWNSAMPLE}")
    g.add_argument("--split", type=float, nargs=3, default=None, metavar=("TRAIN", "VAL", "TEST"),
                   help=f"chronological split fractions, default {' '.join(map(str, DEFAULT_SPLIT))}")
    g.add_argument("--mape-epsilon", type=float, default=None, help=f"MAPE denominator floor, default {MAPE_EPSILON}")


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(getattr(args, "config", None))
    changes = {name: getattr(args, name) for _, (name, _) in MODEL_FLAGS.items() if getattr(args, name, None) is not None}
    if changes:
        rc.model = rc.model.replace(**changes)
    for key in RunConfig.PIPELINE_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            setattr(rc, key, tuple(v) if key == "split" else v)
    return rc


def _stats_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.name + ".stats.json")


def _load_prepared(path, target: str):
    frame = load_csv(path)
    if target not in frame.columns:
        raise DataError(f"{path}: target column {target!r} missing")
    if not frame.is_clean():
        raise DataError(f"{path}: contains missing cells; run preprocess first")
    features = [target] + [n for n in frame.names if n != target]
    return frame, features


# ---------------------------------------------------------------- subcommands

def cmd_generate(args) -> int:
    frame = generate_synthetic(
        args.steps, args.features, args.seed, args.coupling,
        missing_rate=args.missing_rate, outlier_rate=args.outlier_rate, step_minutes=args.step_minutes,
    )
    write_csv(frame, args.out)
    log.info("wrote %d rows x %d features to %s", len(frame), len(frame.names), args.out)
    return 0


def cmd_preprocess(args) -> int:
    rc = _run_config(args)
    frame = load_csv(args.inp)
    norm, stats, features = preprocess(frame, rc.target, rc.threshold, rc.downsample, rc.split[0])
    write_csv(norm, args.out, with_flags=args.with_flags)
    stats_path = Path(args.stats) if args.stats else _stats_path(args.out)
    stats.save(stats_path)
    log.info("kept features %s; stats in %s", features, stats_path)
    return 0


def cmd_decompose(args) -> int:
    frame = load_csv(args.inp)
    if args.column not in frame.columns:
        raise DataError(f"column {args.column!r} not in {args.inp}")
    if not frame.is_clean():
        raise DataError(f"{args.inp}: column has missing cells; run preprocess first")
    x = frame.columns[args.column]
    stop = len(x) if args.length is None else args.start + args.length
    if not 0 <= args.start < stop <= len(x):
        raise DataError(f"segment [{args.start}, {stop}) outside the {len(x)} rows")
    seg = x[args.start:stop]
    res = decompose(seg[:, None], args.avg_window, args.topk)
    stamps = frame.timestamps[args.start:stop]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "original", "trend", "raw_period", "pure_period"])
        for i in range(len(seg)):
            w.writerow([str(stamps[i]), repr(float(seg[i])), repr(float(res.trend[i, 0])),
                        repr(float(res.raw_period[i, 0])), repr(float(res.pure_period[i, 0]))])
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    frame, features = _load_prepared(args.data, rc.target)
    config = rc.model.replace(n_nodes=len(features))
    ds = make_windows(frame, rc.target, config.input_len, config.horizon, features)
    train_set, val_set, _ = chronological_split(ds, rc.split)
    stats_path = Path(args.stats) if args.stats else _stats_path(args.data)
    stats = NormalizationStats.load(stats_path) if stats_path.exists() else None
    if args.stats and stats is None:
        raise DataError(f"stats file {args.stats} not found")
    params, history = train(train_set, val_set, config, log_every=args.log_every)
    extra = {"target": rc.target, "features": features, "split": list(rc.split),
             "mape_epsilon": rc.mape_epsilon, "best_epoch": history.best_epoch}
    save_checkpoint(params, config, stats, args.checkpoint, extra)
    if args.history:
        history.to_csv(args.history)
    log.info("best epoch %d, checkpoint %s", history.best_epoch, args.checkpoint)
    return 0


def _windows_for(checkpoint_extra: dict, config: ModelConfig, data_path):
    target = checkpoint_extra.get("target", TARGET)
    frame = load_csv(data_path)
    features = checkpoint_extra.get("features") or frame.names
    missing = [f for f in features if f not in frame.columns]
    if missing:
        raise DataError(f"{data_path}: columns {missing} used by the checkpoint are missing")
    if not frame.select(features).is_clean():
        raise DataError(f"{data_path}: contains missing cells; run preprocess first")
    ds = make_windows(frame, target, config.input_len, config.horizon, features)
    return frame, ds, target


def cmd_predict(args) -> int:
    params, config, stats, extra = load_checkpoint(args.checkpoint)
    frame, ds, target = _windows_for(extra, config, args.data)
    pred = predict(params, config, ds.inputs)
    if not args.normalized and stats is not None:
        pred = stats.inverse(target, pred)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"step_{h + 1}" for h in range(config.horizon)])
        for i, s in enumerate(ds.starts):
            # stamped at the last observed step of the input window
            w.writerow([str(frame.timestamps[s + config.input_len - 1])] + [repr(float(v)) for v in pred[i]])
    return 0


def cmd_evaluate(args) -> int:
    params, config, stats, extra = load_checkpoint(args.checkpoint)
    frame, ds, target = _windows_for(extra, config, args.data)
    split = tuple(extra.get("split", DEFAULT_SPLIT))
    eps = args.mape_epsilon if args.mape_epsilon is not None else extra.get("mape_epsilon", MAPE_EPSILON)
    test = ds if args.all_windows else chronological_split(ds, split)[2]
    pred = predict(params, config, test.inputs)
    y = test.targets
    if args.raw_scale:
        if stats is None:
            raise CheckpointError("checkpoint has no normalization stats; use --normalized")
        pred, y = stats.inverse(target, pred), stats.inverse(target, y)
    m = compute_metrics(y, pred, eps)
    report = {
        "meta": {
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
            "variant": config.variant,
            "seed": config.seed,
            "config_hash": config_hash(config),
            "scale": "raw" if args.raw_scale else "normalized",
            "windows": "all" if args.all_windows else "test",
            "n_windows": len(test),
            "mape_epsilon": eps,
        },
        "metrics": {str(config.horizon): asdict(m)},
    }
    Path(args.out).write_text(json.dumps(report, indent=2))
    if args.traces:
        scored = WindowedDataset(test.inputs, y, test.input_len, test.horizon, test.starts)
        write_traces(args.traces, scored, pred, frame.timestamps, args.trace_step)
    return 0


def _sweep_inputs(args):
    rc = _run_config(args)
    frame, features = _load_prepared(args.data, rc.target)
    stats_path = Path(args.stats) if args.stats else _stats_path(args.data)
    stats = NormalizationStats.load(stats_path) if stats_path.exists() else None
    if not args.normalized and stats is None:
        raise DataError(f"raw-scale metrics need the stats file ({stats_path}); pass --normalized to skip")
    kwargs = dict(stats=stats, raw_scale=not args.normalized, fractions=rc.split, mape_epsilon=rc.mape_epsilon,
                  workers=args.workers, dataset_id=str(args.data), features=features)
    return rc, frame, kwargs


def _save_report(report, args) -> int:
    report.save_json(args.out)
    if args.csv:
        report.save_csv(args.csv)
    if getattr(args, "table", None):
        report.save_table(args.table)
    failed = sum(len(c.errors) for c in report.cells)
    if failed:
        log.warning("%d run(s) failed; see the errors field of the report", failed)
    return 0


def cmd_ablate(args) -> int:
    rc, frame, kwargs = _sweep_inputs(args)
    report = run_ablation(frame, rc.target, rc.model, args.horizons, args.variants, args.seeds, **kwargs)
    return _save_report(report, args)


def cmd_sweep(args) -> int:
    rc, frame, kwargs = _sweep_inputs(args)
    external = json.loads(Path(args.external).read_text()) if args.external else ()
    report = horizon_sweep(frame, rc.target, rc.model, args.horizons, args.models, args.seeds, external, **kwargs)
    return _save_report(report, args)


def cmd_inspect_graph(args) -> int:
    params, config, _, extra = load_checkpoint(args.checkpoint)
    if not params.gcn:
        raise CheckpointError(f"variant {config.variant} has no graph module")
    if not 0 <= args.layer < len(params.gcn):
        raise DataError(f"layer must lie in [0, {len(params.gcn) - 1}]")
    A = adaptive_adjacency(params.gcn[args.layer].E_A.data).data
    names = extra.get("features") or [f"node{i}" for i in range(len(A))]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + list(names))
        for name, row in zip(names, A):
            w.writerow([name] + [repr(float(v)) for v in row])
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="agtcnsd", description="Chlorophyll forecasting with decomposition, adaptive graphs and TCNs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    _add_parser = sub.add_parser

    def add_parser(name, **kw):
        return _add_parser(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("generate-synthetic", help="write a synthetic sensor CSV", formatter_class=fmt)
    p.add_argument("--steps", type=int, default=3000, help="number of rows")
    p.add_argument("--features", type=int, default=7, help="number of columns (first is the target)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--coupling", type=float, default=2.0, help="strength of the target's lagged dependence on the others")
    p.add_argument("--missing-rate", type=float, default=0.0, help="fraction of cells left empty")
    p.add_argument("--outlier-rate", type=float, default=0.0, help="fraction of cells replaced by spikes")
    p.add_argument("--step-minutes", type=int, default=30, help="sampling interval")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="clean, downsample, select features and min-max scale a CSV", formatter_class=fmt)
    p.add_argument("--in", dest="inp", required=True, help="raw sensor CSV")
    p.add_argument("--out", required=True, help="normalized CSV")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--stats", help="normalization stats JSON (default: OUT.stats.json)")
    p.add_argument("--with-flags", action="store_true", help="add a <column>_flag column per parameter")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("decompose", help="write trend / period parts of one column", formatter_class=fmt)
    p.add_argument("--in", dest="inp", required=True, help="clean CSV")
    p.add_argument("--column", required=True, help="column to decompose")
    p.add_argument("--out", required=True, help="output CSV (t, original, trend, raw_period, pure_period)")
    p.add_argument("--start", type=int, default=0, help="first row of the segment")
    p.add_argument("--length", type=int, default=None, help="segment length (default: to the end)")
    p.add_argument("--avg-window", type=int, default=ModelConfig.avg_window, help="moving-average window")
    p.add_argument("--topk", type=int, default=ModelConfig.topk, help="frequency bins kept")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train a model on a preprocessed CSV", formatter_class=fmt)
    p.add_argument("--data", required=True, help="preprocessed CSV (target column first)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--checkpoint", required=True, help="output checkpoint file")
    p.add_argument("--stats", help="normalization stats JSON (default: DATA.stats.json when present)")
    p.add_argument("--history", help="write per-epoch losses to this CSV")
    p.add_argument("--log-every", type=int, default=0, help="log losses every n epochs (0: never)")
    _add_model_flags(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast every window of a CSV", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="preprocessed CSV")
    p.add_argument("--out", required=True, help="output CSV (t, step_1..step_H)")
    p.add_argument("--normalized", action="store_true", help="keep predictions on the normalized scale")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test windows", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="preprocessed CSV")
    p.add_argument("--out", required=True, help="output JSON report")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--raw-scale", dest="raw_scale", action="store_true", default=True, help="metrics in original units")
    scale.add_argument("--normalized", dest="raw_scale", action="store_false", help="metrics on the min-max scale")
    p.add_argument("--all-windows", action="store_true", help="score every window instead of the test split")
    p.add_argument("--mape-epsilon", type=float, default=None, help=f"MAPE denominator floor (default: checkpoint's, else {MAPE_EPSILON})")
    p.add_argument("--traces", help="write (t, y, y_hat) to this CSV")
    p.add_argument("--trace-step", type=int, default=None, help="forecast step for the traces (default: last)")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("ablate", cmd_ablate, "train and score the six ablation variants"),
                                 ("sweep", cmd_sweep, "compare AGTCNSD and TCN across horizons")):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        p.add_argument("--data", required=True, help="preprocessed CSV")
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--out", required=True, help="output JSON report")
        p.add_argument("--csv", help="also write the report as CSV")
        p.add_argument("--stats", help="normalization stats JSON (default: DATA.stats.json)")
        p.add_argument("--normalized", action="store_true", help="metrics on the min-max scale")
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="seeds per cell (median reported)")
        p.add_argument("--workers", type=int, default=1, help="parallel training processes")
        if name == "ablate":
            p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
            p.add_argument("--horizons", type=int, nargs="+", default=[24])
        else:
            p.add_argument("--models", nargs="+", default=["AGTCNSD", "TCN"])
            p.add_argument("--horizons", type=int, nargs="+", default=list(HORIZONS))
            p.add_argument("--table", help="write a models x horizons CSV table")
            p.add_argument("--external", help="JSON list of extra rows {variant, horizon, mae, rmse, mape}")
        _add_model_flags(p, skip=("--horizon", "--variant", "--seed"))
        _add_pipeline_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("inspect-graph", help="write a learned adjacency matrix as CSV", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output CSV, rows and columns labelled by node")
    p.add_argument("--layer", type=int, default=0, help="graph layer index")
    p.set_defaults(func=cmd_inspect_graph)
    return parser


DOMAIN_ERRORS = (DataError, ShapeError, CheckpointError, TrainingError, ValueError, OSError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"agtcnsd {args.command}: error: {msg}", file=sys.stderr)
        return 1


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return the exit code (argparse usage errors give 2)."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1


if __name__ == "__main__":
    sys.exit(main())
