"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and recording is enabled) the output keeps references to its
inputs plus a closure mapping the output gradient to input gradients.
:func:`backward` orders the reachable graph into a :class:`Tape` and replays
the closures in reverse, summing contributions for values used more than once.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "grad_enabled",
    "elementwise",
    "add",
    "sub",
    "mul",
    "relu",
    "matmul",
    "linear",
    "batched_matmul",
    "transpose",
    "einsum",
    "softmax_rows",
    "sum",
    "mean",
    "reshape",
    "concat",
    "take_last",
    "take_last_n",
    "causal_conv1d",
    "backward",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op=""):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimension sizes must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    """Wrap ``data``; record ``rule`` only if some parent needs a gradient."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), rule, op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "subtract")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "multiply")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), rule, "mul")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def rule(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), rule, "relu")


_ELEMENTWISE = {"add": add, "subtract": sub, "multiply": mul}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch one of ``add``, ``subtract``, ``multiply``, ``relu`` by name."""
    if op_kind == "relu":
        if b is not None:
            raise ValueError("relu takes a single operand")
        return relu(a)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def batched_matmul(a, b) -> Tensor:
    """``np.matmul`` semantics: leading axes broadcast, last two multiply."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched_matmul cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"batched_matmul: leading axes of {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), rule, "batched_matmul")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), rule, "transpose")


def linear(x, weight, bias=None) -> Tensor:
    """Apply ``x @ weight + bias`` over the last axis of ``x`` (any leading dims)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input feature axis {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ weight.data.T, x.data.reshape(-1, x.shape[-1]).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, rule, "linear")


def _einsum_grad_spec(in_specs: list[str], out_spec: str, i: int) -> tuple[str, str]:
    others = [s for j, s in enumerate(in_specs) if j != i]
    available = set(out_spec).union(*others) if others else set(out_spec)
    target = in_specs[i]
    reachable = "".join(c for c in target if c in available)
    return ",".join([out_spec, *others]) + "->" + reachable, reachable


def einsum(spec: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit specs without repeated indices."""
    ops = [_as_tensor(o) for o in operands]
    if "->" not in spec:
        raise ValueError("einsum spec must be explicit (contain '->')")
    lhs, out_spec = spec.replace(" ", "").split("->")
    in_specs = lhs.split(",")
    if len(in_specs) != len(ops):
        raise ValueError(f"einsum spec names {len(in_specs)} operands, got {len(ops)}")
    sizes: dict[str, int] = {}
    for s, o in zip(in_specs, ops):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum operand {s!r} does not fit shape {o.shape}")
        for c, n in zip(s, o.shape):
            if sizes.setdefault(c, n) != n:
                raise ShapeError(f"einsum axis {c!r} has sizes {sizes[c]} and {n}")
    out = np.einsum(spec, *[o.data for o in ops], optimize=len(ops) > 2)

    def rule(g):
        grads = []
        for i, o in enumerate(ops):
            if not o.requires_grad:
                grads.append(None)
                continue
            gspec, reachable = _einsum_grad_spec(in_specs, out_spec, i)
            others = [p.data for j, p in enumerate(ops) if j != i]
            gi = np.einsum(gspec, g, *others, optimize=len(ops) > 2)
            if reachable != in_specs[i]:
                # indices summed only within this operand: gradient is constant along them
                gi = gi.reshape([sizes[c] if c in reachable else 1 for c in in_specs[i]])
                gi = np.broadcast_to(gi, o.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _make(out, ops, rule, "einsum")


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting each row's maximum."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), rule, "softmax")


# ---------------------------------------------------------------- reductions and shape

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), rule, "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def rule(g):
        return (np.full(a.shape, g / n),)

    return _make(np.asarray(a.data.mean()), (a,), rule, "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def rule(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), rule, "reshape")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, rule, "concat")


def take_last(a, axis: int = -2) -> Tensor:
    """Select the final index along ``axis`` (dropping that axis)."""
    a = _as_tensor(a)
    out = np.take(a.data, -1, axis=axis)

    def rule(g):
        full = np.zeros(a.shape)
        idx = [slice(None)] * a.ndim
        idx[axis] = -1
        full[tuple(idx)] = g
        return (full,)

    return _make(out, (a,), rule, "take_last")


def take_last_n(a, n: int, axis: int = -2) -> Tensor:
    """Keep the final ``n`` entries along ``axis``."""
    a = _as_tensor(a)
    size = a.shape[axis]
    if not 1 <= n <= size:
        raise ShapeError(f"cannot keep {n} of {size} entries along axis {axis}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(size - n, None)
    idx = tuple(idx)

    def rule(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), rule, "take_last_n")


def causal_conv1d(x, kernel, dilation: int = 1, bias=None) -> Tensor:
    """Dilated causal convolution over time.

    ``x`` is ``[..., T, C_in]``, ``kernel`` is ``[k, C_in, C_out]``;
    ``out[s] = sum_i x[s - dilation*i] @ kernel[i]`` with zeros before t=0.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"causal_conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    k, c_in, c_out = kernel.shape
    T = x.shape[-2]
    pad = (k - 1) * dilation
    padded = np.zeros(x.shape[:-2] + (T + pad, c_in))
    padded[..., pad:, :] = x.data
    # taps[..., s, i, :] = x[s - dilation*i]
    taps = np.stack([padded[..., pad - dilation * i : pad - dilation * i + T, :] for i in range(k)], axis=-2)
    cols = taps.reshape(-1, k * c_in)
    out = (cols @ kernel.data.reshape(k * c_in, c_out)).reshape(x.shape[:-1] + (c_out,))
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"causal_conv1d: bias shape {bias.shape} != ({c_out},)")
        out += bias.data
        parents.append(bias)

    def rule(g):
        g2 = g.reshape(-1, c_out)
        gx = None
        if x.requires_grad:
            gtaps = (g2 @ kernel.data.reshape(k * c_in, c_out).T).reshape(x.shape[:-1] + (k, c_in))
            gpad = np.zeros(padded.shape)
            for i in range(k):
                gpad[..., pad - dilation * i : pad - dilation * i + T, :] += gtaps[..., i, :]
            gx = gpad[..., pad:, :]
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, rule, "causal_conv1d")


# ---------------------------------------------------------------- tape and backward

@dataclass(frozen=True)
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable


class Tape:
    """Topologically ordered operation records reachable from one output."""

    def __init__(self, records: list[_Record]):
        self.records = records

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls([_Record(n._parents, n, n._backward) for n in order if n._backward is not None])

    def replay(self, seed: np.ndarray) -> None:
        if not self.records:
            return
        grads: dict[int, np.ndarray] = {id(self.records[-1].output): seed}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g
            for inp, gi in zip(rec.inputs, rec.rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._backward is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor requiring gradients that feeds ``loss``.

    Gradients accumulate into leaf tensors, so call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape.from_output(loss).replay(np.ones_like(loss.data))


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max per-coordinate relative error between analytic and central-difference gradients."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(fn(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += step
            xm = base.copy().reshape(-1)
            xm[i] -= step
            fp = fn(Tensor(xp.reshape(base.shape))).item()
            fm = fn(Tensor(xm.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
