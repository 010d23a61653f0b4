"""Model assembly, loss, Adam and the training loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import WindowedDataset
from .decomposition import PERIOD_KERNELS, DecompBranchParams, decompose, period_branch, trend_branch
from .graph import INIT_STD, AdaptiveGraphParams, gcn_layer_stack
from .tcn import TcnConfig, TcnLayerParams, init_tcn, tcn_forward

log = logging.getLogger(__name__)

HORIZONS = (12, 24, 48, 72)


@dataclass(frozen=True)
class AblationVariant:
    name: str
    use_decomposition: bool
    use_gcn: bool
    use_tcn: bool
    use_structural_changes: bool


VARIANTS = {
    "model1": AblationVariant("model1", False, False, True, False),
    "model2": AblationVariant("model2", False, False, True, True),
    "model3": AblationVariant("model3", False, True, True, True),
    "model4": AblationVariant("model4", True, True, False, True),
    "model5": AblationVariant("model5", True, False, True, True),
    "model6": AblationVariant("model6", True, True, True, True),
}
# Names used in the horizon comparison table.
MODEL_ALIASES = {"AGTCNSD": "model6", "TCN": "model1"}


def get_variant(name: str) -> AblationVariant:
    key = MODEL_ALIASES.get(name, name)
    try:
        return VARIANTS[key]
    except KeyError:
        raise ValueError(f"unknown model variant {name!r}; expected one of {sorted(VARIANTS) + sorted(MODEL_ALIASES)}")


@dataclass
class ModelConfig:
    input_len: int = 72
    horizon: int = 24
    n_nodes: int = 7
    avg_window: int = 12
    topk: int = 15
    decomp_kernels: tuple[int, ...] = PERIOD_KERNELS
    node_channels: int = 4
    period_channels: int = 8
    gcn_layers: int = 2
    embed_dim: int = 7
    factor_dim: int = 7
    gcn_channels: int = 8
    graph_init_std: float = INIT_STD
    tcn_layers: int = 4
    tcn_kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    tcn_channels: int = 32
    tcn_reduction: int = 16
    batch_size: int = 128
    epochs: int = 300
    learning_rate: float = 1e-3
    seed: int = 0
    variant: str = "model6"

    def __post_init__(self):
        self.decomp_kernels = tuple(int(k) for k in self.decomp_kernels)
        self.dilations = tuple(int(d) for d in self.dilations)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and f.name != "seed" and v <= 0:
                raise ValueError(f"config field {f.name} must be positive, got {v}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        self.variant = get_variant(self.variant).name
        if tuple(sorted(self.decomp_kernels)) != PERIOD_KERNELS:
            raise ValueError(f"decomposition kernels must be {PERIOD_KERNELS}")
        if self.use.use_decomposition and self.topk > self.input_len // 2 + 1:
            raise ValueError(f"topk {self.topk} exceeds the {self.input_len // 2 + 1} frequency bins of a {self.input_len}-step window")
        self.tcn_config()  # validates layer/dilation agreement

    @property
    def use(self) -> AblationVariant:
        return VARIANTS[self.variant]

    def tcn_config(self) -> TcnConfig:
        return TcnConfig(
            n_layers=self.tcn_layers,
            kernel_size=self.tcn_kernel,
            dilations=self.dilations,
            channels=self.tcn_channels,
            reduction=self.tcn_reduction,
            structural=self.use.use_structural_changes,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decomp_kernels"] = list(self.decomp_kernels)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


@dataclass
class ModelParams:
    decomp: DecompBranchParams | None
    gcn: list[AdaptiveGraphParams]
    tcn: list[TcnLayerParams]
    head: dict[str, Tensor]

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.decomp is not None:
            out.update(self.decomp.named("decomp."))
        for i, p in enumerate(self.gcn):
            out.update(p.named(f"gcn.{i}."))
        for i, p in enumerate(self.tcn):
            out.update(p.named(f"tcn.{i}."))
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        if set(arrays) != set(named):
            raise KeyError(f"parameter names differ: missing {sorted(set(named) - set(arrays))}, extra {sorted(set(arrays) - set(named))}")
        for k, t in named.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ShapeError(f"parameter {k}: stored shape {a.shape} != model shape {t.shape}")
            t.data = a.copy()

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None


def _head_input_width(config: ModelConfig) -> int:
    use = config.use
    if use.use_tcn:
        return config.tcn_channels
    if use.use_gcn:
        return config.n_nodes * config.gcn_channels
    if use.use_decomposition:
        return config.n_nodes * config.node_channels
    return config.n_nodes


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Draw fresh parameters; all randomness comes from ``config.seed`` unless ``rng`` is given."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    use = config.use
    N = config.n_nodes
    decomp = None
    width, node_c = N, 1
    if use.use_decomposition:
        decomp = DecompBranchParams.init(rng, N, N * config.node_channels, config.period_channels, config.decomp_kernels)
        width, node_c = N * config.node_channels, config.node_channels
    gcn = []
    if use.use_gcn:
        c = node_c
        for _ in range(config.gcn_layers):
            gcn.append(
                AdaptiveGraphParams.init(rng, N, c, config.gcn_channels, config.embed_dim, config.factor_dim, config.graph_init_std)
            )
            c = config.gcn_channels
        width = N * config.gcn_channels
    tcn = init_tcn(rng, width, config.tcn_config()) if use.use_tcn else []
    d = _head_input_width(config)
    H = config.horizon
    if use.use_tcn:
        head = {
            "w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, H)), requires_grad=True),
            "b": Tensor(np.zeros(H), requires_grad=True),
        }
    else:
        T = config.input_len
        head = {
            "step_w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, 1)), requires_grad=True),
            "step_b": Tensor(np.zeros(1), requires_grad=True),
            "w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(T), size=(T, H)), requires_grad=True),
            "b": Tensor(np.zeros(H), requires_grad=True),
        }
    return ModelParams(decomp, gcn, tcn, head)


@dataclass
class PreparedBatch:
    """Model inputs after the parameter-free preprocessing stage."""

    raw: np.ndarray
    trend: np.ndarray | None = None
    pure_period: np.ndarray | None = None

    def __len__(self):
        return len(self.raw)

    def take(self, index) -> "PreparedBatch":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PreparedBatch(self.raw[index], pick(self.trend), pick(self.pure_period))


def prepare_inputs(batch, config: ModelConfig) -> PreparedBatch:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"batch must be [B, T, F], got {x.shape}")
    B, T, F = x.shape
    if T != config.input_len:
        raise ShapeError(f"time axis: batch has {T} steps, config input_len is {config.input_len}")
    if F != config.n_nodes:
        raise ShapeError(f"feature axis: batch has {F} features, config has {config.n_nodes} nodes")
    if not config.use.use_decomposition:
        return PreparedBatch(x)
    res = decompose(x, config.avg_window, config.topk)
    return PreparedBatch(x, res.trend, res.pure_period)


def forward_prepared(
    prep: PreparedBatch, params: ModelParams, config: ModelConfig, full_length: bool = False
) -> Tensor:
    """Model output from preprocessed inputs.

    Only the last time step reaches the head, and every stage before it is
    causal, so by default the per-step stages run on just the suffix that the
    temporal stack's receptive field can see. ``full_length=True`` computes
    every step (identical output, used to check that claim).
    """
    use = config.use
    B, T, N = prep.raw.shape
    keep = T
    if use.use_tcn and not full_length:
        keep = min(T, config.tcn_config().receptive_field)
    if use.use_decomposition:
        history = max(params.decomp.kernels) - 1
        trend = prep.trend[:, T - keep :]
        period = prep.pure_period[:, max(0, T - keep - history) :]
        p = period_branch(period, params.decomp)
        if p.shape[1] != keep:
            p = ad.take_last_n(p, keep, axis=1)
        h = trend_branch(trend, params.decomp) + p
        node_c = config.node_channels
    else:
        h = Tensor(prep.raw[:, T - keep :])
        node_c = 1
    T = keep
    if use.use_gcn:
        nodes = ad.reshape(h, (B, T, N, node_c))
        h = ad.reshape(gcn_layer_stack(nodes, params.gcn), (B, T, N * config.gcn_channels))
    if use.use_tcn:
        h = tcn_forward(h, config.tcn_config(), params.tcn)
        return ad.linear(ad.take_last(h, axis=-2), params.head["w"], params.head["b"])
    per_step = ad.linear(h, params.head["step_w"], params.head["step_b"])
    return ad.linear(ad.reshape(per_step, (B, T)), params.head["w"], params.head["b"])


def model_forward(batch, params: ModelParams, config: ModelConfig) -> Tensor:
    """Predict ``[B, horizon]`` normalized target values from ``[B, T, F]`` windows."""
    return forward_prepared(prepare_inputs(batch, config), params, config)


def predict(params: ModelParams, config: ModelConfig, inputs, batch_size: int | None = None) -> np.ndarray:
    prep = inputs if isinstance(inputs, PreparedBatch) else prepare_inputs(inputs, config)
    bs = batch_size or config.batch_size
    out = []
    with ad.no_grad():
        for start in range(0, len(prep), bs):
            out.append(forward_prepared(prep.take(slice(start, start + bs)), params, config).data)
    return np.concatenate(out, axis=0)


def mse_loss(pred, target) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return ad.mean(diff * diff)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """One bias-corrected Adam update of every tensor in ``params`` (in place)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------- training

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss))

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tr, va in self.rows():
                w.writerow([e, repr(tr), "" if math.isnan(va) else repr(va)])


def evaluate_loss(params: ModelParams, config: ModelConfig, prep: PreparedBatch, targets: np.ndarray) -> float:
    pred = predict(params, config, prep)
    return float(np.mean((pred - targets) ** 2))


def train(
    train_set: WindowedDataset,
    val_set: WindowedDataset | None,
    config: ModelConfig,
    log_every: int = 0,
    stop_loss: float | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """Mini-batch Adam on MSE; returns the parameters with the best validation loss.

    Without a validation set the training loss drives the selection.
    ``stop_loss`` ends training early once the epoch's training loss drops below it.
    """
    if len(train_set) == 0:
        raise TrainingError("training split is empty")
    if train_set.horizon != config.horizon or train_set.input_len != config.input_len:
        raise ShapeError(
            f"dataset windows ({train_set.input_len}->{train_set.horizon}) do not match config "
            f"({config.input_len}->{config.horizon})"
        )
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(config, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    named = params.named()
    state = OptimizerState()

    train_prep = prepare_inputs(train_set.inputs, config)
    val_prep = prepare_inputs(val_set.inputs, config) if val_set is not None and len(val_set) else None
    n = len(train_set)
    bs = config.batch_size

    history = TrainingHistory()
    best = (math.inf, None)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            params.zero_grad()
            loss = mse_loss(forward_prepared(train_prep.take(idx), params, config), train_set.targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            adam_step(named, state, config.learning_rate)
            total += value * len(idx)
        for k, p in named.items():
            if not np.all(np.isfinite(p.data)):
                raise TrainingError(f"parameter {k} became non-finite at epoch {epoch}")
        train_loss = total / n
        val_loss = evaluate_loss(params, config, val_prep, val_set.targets) if val_prep is not None else math.nan
        if val_prep is not None and not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.epoch.append(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        score = val_loss if val_prep is not None else train_loss
        if score < best[0]:
            best = (score, params.arrays())
            history.best_epoch = epoch
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if stop_loss is not None and train_loss < stop_loss:
            break
    params.load_arrays(best[1])
    return params, history


def clone_params(params: ModelParams) -> ModelParams:
    return copy.deepcopy(params)
