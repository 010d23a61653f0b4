"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 7 minutes on one core).
"""
import json
import math
import time

import numpy as np
import pytest
from gradcheck import param_grad_errors

from agtcnsd import autodiff as ad
from agtcnsd.autodiff import Tensor
from agtcnsd.checkpoint import load_checkpoint, save_checkpoint
from agtcnsd.cli import cli_dispatch
from agtcnsd.data import chronological_split, make_windows, minmax_fit_transform, preprocess
from agtcnsd.decomposition import (
    DecompBranchParams,
    branches_forward,
    fft_topk_filter,
    moving_average_decompose,
    period_branch,
)
from agtcnsd.evaluation import benchmark_frame, compute_metrics, generate_synthetic, run_grid
from agtcnsd.graph import (
    AdaptiveGraphParams,
    StaticGraphSpec,
    adaptive_adjacency,
    adaptive_gcn_forward,
    standard_gcn_forward,
)
from agtcnsd.model import VARIANTS, ModelConfig, evaluate_loss, forward_prepared, init_params, mse_loss, predict, prepare_inputs, train
from agtcnsd.tcn import TcnConfig, TcnLayerParams, dilated_causal_conv, init_tcn, tcn_block, tcn_forward

from test_evaluation import metrics_oracle
from test_graph import gcn_loop_oracle, static_gcn_loop_oracle as static_loop_oracle

SEEDS = (0, 1, 2)
RESULTS = []


def report(n, name, passed, detail, elapsed):
    line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail} ({elapsed:.1f}s)"
    RESULTS.append(line)
    print(line)
    assert passed, line


# ---------------------------------------------------------------- 1

def op_gradient_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}
    fd = ad.finite_difference_check
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(3, 4)))
    for kind in ("add", "subtract", "multiply"):
        errs[kind] = max(fd(lambda t: ad.sum(ad.elementwise(kind, t, b) * w), Tensor(a)),
                         fd(lambda t: ad.sum(ad.elementwise(kind, a, t) * w), Tensor(b)))
    away = a + np.sign(a) * 0.1  # keep relu's kink out of the difference stencil
    errs["relu"] = fd(lambda t: ad.sum(ad.relu(t) * w), Tensor(away))
    m = rng.normal(size=(4, 5))
    w35 = Tensor(rng.normal(size=(3, 5)))
    errs["matmul"] = max(fd(lambda t: ad.sum(ad.matmul(t, m) * w35), Tensor(a)),
                         fd(lambda t: ad.sum(ad.matmul(a, t) * w35), Tensor(m)))
    errs["softmax_rows"] = fd(lambda t: ad.sum(ad.softmax_rows(t) * w), Tensor(a))
    w55 = Tensor(rng.normal(size=(5, 5)))
    errs["adaptive_adjacency"] = fd(lambda t: ad.sum(adaptive_adjacency(t) * w55), Tensor(rng.normal(size=(5, 3))))

    g = AdaptiveGraphParams.init(rng, 4, 2, 3, 3, 3, 1.0)
    X = rng.normal(size=(3, 4, 2))
    wg = Tensor(rng.normal(size=(3, 4, 3)))
    errs["adaptive_gcn_forward"] = max(
        max(param_grad_errors(g.named(), lambda: ad.sum(adaptive_gcn_forward(X, g) * wg)).values()),
        fd(lambda t: ad.sum(adaptive_gcn_forward(t, g) * wg), Tensor(X)),
    )
    x = rng.normal(size=(2, 10, 3))
    wc = Tensor(rng.normal(size=(2, 10, 4)))
    f = rng.normal(size=(3, 3, 4))
    errs["dilated_causal_conv"] = max(fd(lambda t: ad.sum(dilated_causal_conv(x, t, 3) * wc), Tensor(f)),
                                      fd(lambda t: ad.sum(dilated_causal_conv(t, f, 3) * wc), Tensor(x)))
    p = TcnLayerParams.init(rng, 3, 4, 3, reduction=2)
    errs["tcn_block"] = max(max(param_grad_errors(p.named(), lambda: ad.sum(tcn_block(x, p, 2) * wc)).values()),
                            fd(lambda t: ad.sum(tcn_block(t, p, 2) * wc), Tensor(x)))
    d = DecompBranchParams.init(rng, 3, 4, 2)
    trend, period = rng.normal(size=(2, 10, 3)), rng.normal(size=(2, 10, 3))
    errs["branches"] = max(max(param_grad_errors(d.named(), lambda: ad.sum(branches_forward(trend, period, d) * wc)).values()),
                           fd(lambda t: ad.sum(period_branch(t, d) * wc), Tensor(period)))
    y = rng.normal(size=(3, 4))
    errs["mse_loss"] = fd(lambda t: mse_loss(t, y), Tensor(a))
    return errs


def full_model_errors(seed):
    worst = 0.0
    for v in VARIANTS:
        cfg = ModelConfig(input_len=12, horizon=2, n_nodes=3, avg_window=4, topk=5, node_channels=2, period_channels=2,
                          embed_dim=3, factor_dim=3, gcn_channels=3, tcn_channels=6, tcn_reduction=4,
                          seed=seed, variant=v, graph_init_std=0.5)
        params = init_params(cfg)
        rng = np.random.default_rng(100 + seed)
        prep = prepare_inputs(rng.normal(size=(2, 12, 3)), cfg)
        y = rng.normal(size=(2, 2))
        worst = max(worst, *param_grad_errors(params.named(), lambda: mse_loss(forward_prepared(prep, params, cfg), y)).values())
    return worst


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    per_op = {}
    full = 0.0
    for seed in SEEDS:
        for k, v in op_gradient_errors(seed).items():
            per_op[k] = max(per_op.get(k, 0.0), v)
        full = max(full, full_model_errors(seed))
    elapsed = time.perf_counter() - t0
    worst_op = max(per_op, key=per_op.get)
    ok = max(per_op.values()) < 1e-5 and full < 1e-4 and elapsed < 120
    report(1, "gradient suite", ok, f"worst per-op {worst_op} {per_op[worst_op]:.2e} (<1e-5), full model {full:.2e} (<1e-4), "
           f"{len(per_op)} ops x 3 seeds, 6 variants", elapsed)


# ---------------------------------------------------------------- 2

def test_criterion_02_decomposition_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(scale=rng.uniform(0.1, 100), size=(72, 7))
        res = moving_average_decompose(x, 12)
        worst = max(worst, float(np.max(np.abs(res.trend + res.raw_period - x))))
    report(2, "decomposition identity", worst <= 1e-12, f"max error {worst:.1e} over 100 windows (<=1e-12)", time.perf_counter() - t0)


# ---------------------------------------------------------------- 3

def test_criterion_03_spectral_filter():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 72))
    all_bins = float(np.max(np.abs(fft_topk_filter(x, 37) - x)))
    t = np.arange(72)
    big = 3.0 * np.sin(2 * np.pi * 3 * t / 72)
    small = np.cos(2 * np.pi * 10 * t / 72 + 0.4)
    dominant = float(np.max(np.abs(fft_topk_filter(big + small, 1) - big)))
    idem = 0.0
    for k in (1, 5, 15):
        once = fft_topk_filter(x, k)
        idem = max(idem, float(np.max(np.abs(fft_topk_filter(once, k) - once))))
    ok = all_bins <= 1e-9 and dominant <= 1e-6 and idem <= 1e-9
    report(3, "spectral filter", ok, f"all bins {all_bins:.1e}, dominant {dominant:.1e}, idempotence {idem:.1e}", time.perf_counter() - t0)


# ---------------------------------------------------------------- 4

def test_criterion_04_causality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    T = 40
    cfg = TcnConfig(channels=4, reduction=3)
    tcn = init_tcn(rng, 3, cfg)
    branch = DecompBranchParams.init(rng, 3, 4, 3)
    x = rng.normal(size=(T, 3))
    full_tcn = tcn_forward(x, cfg, tcn).data
    full_branch = period_branch(x, branch).data
    violations = 0
    for t in range(T):
        cut = x.copy()
        cut[t:] = 0
        violations += int(not np.array_equal(tcn_forward(cut, cfg, tcn).data[:t], full_tcn[:t]))
        violations += int(not np.array_equal(period_branch(cut, branch).data[:t], full_branch[:t]))
    report(4, "causality", violations == 0, f"{violations} violations over t=0..{T - 1} (TCN stack and period branch, exact)",
           time.perf_counter() - t0)


# ---------------------------------------------------------------- 5

def test_criterion_05_adjacency_stochastic():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, finite = 0.0, True
    for i in range(100):
        E = rng.normal(scale=1e3 if i % 2 else 1.0, size=(int(rng.integers(1, 9)), int(rng.integers(1, 8))))
        A = adaptive_adjacency(E).data
        finite &= bool(np.all(np.isfinite(A)) and np.all(A >= 0))
        worst = max(worst, float(np.max(np.abs(A.sum(axis=1) - 1))))
    ok = finite and worst <= 1e-9
    report(5, "adjacency stochasticity", ok, f"max |row sum - 1| {worst:.1e} (<=1e-9), 50 of 100 at scale 1e3", time.perf_counter() - t0)


# ---------------------------------------------------------------- 6

def test_criterion_06_gcn_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    adaptive, static = 0.0, 0.0
    for _ in range(20):
        N = int(rng.integers(1, 6))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        p = AdaptiveGraphParams.init(rng, N, c_in, c_out, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 1.0)
        X = rng.normal(size=(N, c_in))
        A = adaptive_adjacency(p.E_A).data
        adaptive = max(adaptive, float(np.max(np.abs(adaptive_gcn_forward(X, p).data - gcn_loop_oracle(X, p, A)))))
        S = rng.uniform(0.1, 2.0, size=(N, N))
        theta, b = rng.normal(size=(c_in, c_out)), rng.normal(size=c_out)
        static = max(static, float(np.max(np.abs(standard_gcn_forward(X, StaticGraphSpec(S, theta, b)) - static_loop_oracle(X, S, theta, b)))))
    ok = adaptive <= 1e-10 and static <= 1e-12
    report(6, "factorized GCN oracles", ok, f"adaptive {adaptive:.1e} (<=1e-10), static {static:.1e} (<=1e-12), 20 instances N<=5",
           time.perf_counter() - t0)


# ---------------------------------------------------------------- 7

def test_criterion_07_metrics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 200))
        y = rng.normal(scale=rng.uniform(0.1, 100), size=n)
        y_hat = y + rng.normal(size=n)
        m = compute_metrics(y, y_hat)
        mismatches += int((m.mae, m.rmse, m.mape) != metrics_oracle(list(y), list(y_hat)))
    w = compute_metrics([1.0, 2.0], [2.0, 4.0])
    worked = (w.mae, w.rmse, w.mape) == (1.5, math.sqrt(2.5), 1.0)
    report(7, "metrics oracle", mismatches == 0 and worked,
           f"{mismatches}/100 inexact, worked case {(w.mae, round(w.rmse, 6), w.mape)}", time.perf_counter() - t0)


# ---------------------------------------------------------------- 8

def test_criterion_08_overfit():
    t0 = time.perf_counter()
    frame, _ = minmax_fit_transform(generate_synthetic(600, 7, 0, 1.0, step_minutes=60))
    ds = make_windows(frame, "Chl", 72, 12).subset(slice(0, 64))
    prep = prepare_inputs(ds.inputs, ModelConfig(horizon=12))
    finals, epochs = [], []
    for seed in SEEDS:
        cfg = ModelConfig(horizon=12, epochs=2000, batch_size=64, seed=seed)
        params, hist = train(ds, None, cfg, stop_loss=1e-3)
        finals.append(evaluate_loss(params, cfg, prep, ds.targets))
        epochs.append(len(hist.epoch))
    elapsed = time.perf_counter() - t0
    ok = max(finals) < 1e-3 and elapsed < 300
    report(8, "overfit sanity", ok, f"train MSE {[f'{v:.1e}' for v in finals]} after {epochs} epochs (<1e-3, <=2000)", elapsed)


# ---------------------------------------------------------------- 9 and 10

ACCEPT_EPOCHS = 100


@pytest.fixture(scope="module")
def benchmark():
    norm, stats, features = preprocess(benchmark_frame(0), "Chl")
    return norm, stats, features


def test_criterion_09_ablation_direction(benchmark):
    t0 = time.perf_counter()
    norm, stats, features = benchmark
    rep = run_grid(norm, "Chl", ModelConfig(epochs=ACCEPT_EPOCHS), ("model1", "model6"), (24,), SEEDS, stats=stats, features=features)
    m1, m6 = rep.cell("model1", 24), rep.cell("model6", 24)
    elapsed = time.perf_counter() - t0
    ok = not (m1.errors or m6.errors) and m6.mae <= m1.mae and elapsed < 900
    report(9, "ablation direction", ok, f"median MAE model6 {m6.mae:.4f} <= model1 {m1.mae:.4f} at horizon 24, "
           f"{len(features)} features, {ACCEPT_EPOCHS} epochs", elapsed)


def test_criterion_10_horizon_degradation(benchmark):
    t0 = time.perf_counter()
    norm, stats, features = benchmark
    rep = run_grid(norm, "Chl", ModelConfig(epochs=ACCEPT_EPOCHS), ("model6",), (12, 72), SEEDS, stats=stats, features=features)
    h12, h72 = rep.cell("model6", 12), rep.cell("model6", 72)
    ok = not (h12.errors or h72.errors) and h72.mae >= h12.mae
    report(10, "horizon degradation", ok, f"AGTCNSD median MAE h72 {h72.mae:.4f} >= h12 {h12.mae:.4f}", time.perf_counter() - t0)


# ---------------------------------------------------------------- 11

def test_criterion_11_checkpoint_roundtrip(tmp_path):
    t0 = time.perf_counter()
    frame, stats = minmax_fit_transform(generate_synthetic(400, 4, 0, 1.0, step_minutes=60))
    ds = make_windows(frame, "Chl", 72, 24)
    tr, va, te = chronological_split(ds)
    cfg = ModelConfig(n_nodes=4, epochs=2)
    params, _ = train(tr, va, cfg)
    before = predict(params, cfg, te.inputs)
    save_checkpoint(params, cfg, stats, tmp_path / "m.ckpt")
    p2, c2, s2, _ = load_checkpoint(tmp_path / "m.ckpt")
    after = predict(p2, c2, te.inputs)
    ok = before.tobytes() == after.tobytes() and c2 == cfg and s2 == stats
    report(11, "checkpoint roundtrip", ok, f"{before.size} predictions bitwise {'identical' if ok else 'different'}",
           time.perf_counter() - t0)


# ---------------------------------------------------------------- 12

def test_criterion_12_cli_pipeline(tmp_path):
    t0 = time.perf_counter()
    codes = [
        cli_dispatch(["generate-synthetic", "--steps", "1200", "--features", "7", "--missing-rate", "0.02",
                      "--outlier-rate", "0.002", "--out", str(tmp_path / "raw.csv")]),
        cli_dispatch(["preprocess", "--in", str(tmp_path / "raw.csv"), "--out", str(tmp_path / "prep.csv"),
                      "--threshold", "0.2", "--downsample", "2"]),
        cli_dispatch(["train", "--data", str(tmp_path / "prep.csv"), "--checkpoint", str(tmp_path / "m.ckpt"), "--epochs", "3"]),
        cli_dispatch(["evaluate", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(tmp_path / "prep.csv"),
                      "--out", str(tmp_path / "report.json")]),
    ]
    schema_ok = False
    if (tmp_path / "report.json").exists():
        rep = json.loads((tmp_path / "report.json").read_text())
        metrics = rep.get("metrics", {})
        schema_ok = (
            set(rep) == {"meta", "metrics"}
            and {"variant", "seed", "config_hash", "scale", "n_windows"} <= set(rep["meta"])
            and list(metrics) == ["24"]
            and all(isinstance(metrics["24"].get(k), float) and math.isfinite(metrics["24"][k]) for k in ("mae", "rmse", "mape"))
        )
    ok = codes == [0, 0, 0, 0] and schema_ok
    report(12, "CLI pipeline", ok, f"exit codes {codes}, report schema {'valid' if schema_ok else 'invalid'}", time.perf_counter() - t0)
