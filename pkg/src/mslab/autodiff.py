"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. ``backward`` orders
the reachable nodes topologically into a :class:`Graph` and runs the
closures in reverse.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

LOG_EPS = 1e-12
ACTIVATIONS = ("relu", "lrelu", "tanh", "sigmoid", "linear")
DEFAULT_LRELU_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` as one node; used by every dense layer."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward, "linear")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward, "relu")


def lrelu(x, slope: float = DEFAULT_LRELU_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)

    def backward(g):
        x._accumulate(g * scale)

    return _make(x.data * scale, (x,), backward, "lrelu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward, "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward, "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        x._accumulate(g * y)

    return _make(y, (x,), backward, "exp")


def log(x, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument clamped below at ``eps``.

    The clamp is a hard floor: below it the gradient is zero.
    """
    x = as_tensor(x)
    clamped = np.maximum(x.data, eps)
    live = x.data >= eps

    def backward(g):
        x._accumulate(np.where(live, g / clamped, 0.0))

    return _make(np.log(clamped), (x,), backward, "log")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)

    def backward(g):
        x._accumulate(g * s)

    return _make(np.abs(x.data), (x,), backward, "abs")


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        p = np.exp(y)
        x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _make(y, (x,), backward, "log_softmax")


def log_sigmoid(x) -> Tensor:
    """``log(sigmoid(x))`` computed without overflow: ``-softplus(-x)``."""
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data)

    def backward(g):
        x._accumulate(g * _sigmoid(-x.data))

    return _make(y, (x,), backward, "log_sigmoid")


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / n, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g / n, axis), x.shape))

    return _make(x.data.mean(axis=axis), (x,), backward, "mean")


def pick(x, index: np.ndarray) -> Tensor:
    """Select ``x[i, index[i]]`` per row of a 2-D tensor."""
    x = as_tensor(x)
    rows = np.arange(x.shape[0])
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        x._accumulate(full)

    return _make(x.data[rows, index], (x,), backward, "pick")


def column(x, j: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, j] = g
        x._accumulate(full)

    return _make(x.data[:, j], (x,), backward, "column")


def rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accumulate(full)

    return _make(x.data[start:stop], (x,), backward, "rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, backward, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def gather_rows(x, index: np.ndarray) -> Tensor:
    """``x[index]`` along axis 0 (index may repeat)."""
    x = as_tensor(x)
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _make(x.data[index], (x,), backward, "gather_rows")


def activate(x, name: str, slope: float = DEFAULT_LRELU_SLOPE) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "lrelu":
        return lrelu(x, slope)
    if name == "tanh":
        return tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "linear":
        return as_tensor(x)
    raise ConfigurationError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class Graph:
    """Topologically ordered nodes reachable from ``output``."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(output, order)


def backward(loss: Tensor | Graph, params: "ParamSet | Iterable[ParamSet] | None" = None) -> Graph:
    """Backpropagate from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable leaf with
    ``requires_grad``. Parameters of ``params`` that the loss does not reach
    get an explicit zero gradient.
    """
    graph = loss if isinstance(loss, Graph) else Graph.trace(loss)
    out = graph.output
    if out.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {out.shape}")
    if not out.requires_grad:
        graph.nodes = []
    else:
        out._accumulate(np.ones_like(out.data))
        for node in reversed(graph.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
    if params is not None:
        sets = [params] if isinstance(params, ParamSet) else list(params)
        for ps in sets:
            for t in ps.values():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
    return graph


# ---------------------------------------------------------------------------
# parameters and networks


class ParamSet(OrderedDict):
    """Named parameter tensors of one network plus its layout metadata."""

    def __init__(self, *args, meta: dict | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.meta = dict(meta or {})

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        for t in self.values():
            t.requires_grad = flag

    def copy(self) -> "ParamSet":
        out = ParamSet(meta=self.meta)
        for k, t in self.items():
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.values())


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def build_mlp(layer_sizes: Sequence[int], activation: str = "relu", seed: int = 0,
              prefix: str = "", slope: float = DEFAULT_LRELU_SLOPE) -> ParamSet:
    """Dense network parameters; hidden layers use ``activation``, the last layer is linear.

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at zero.
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(n) != n or n <= 0 for n in sizes):
        raise ConfigurationError(f"layer_sizes must have >= 2 positive integers, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    ps = ParamSet(meta={"layer_sizes": tuple(int(n) for n in sizes), "activation": activation,
                        "slope": slope, "prefix": prefix})
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        ps[f"{prefix}W{i}"] = Tensor(_init_dense(rng, fi, fo), requires_grad=True)
        ps[f"{prefix}b{i}"] = Tensor(np.zeros(fo), requires_grad=True)
    return ps


def mlp_apply(params: ParamSet, x, prefix: str | None = None, final_activation: bool = False) -> Tensor:
    meta = params.meta
    prefix = meta.get("prefix", "") if prefix is None else prefix
    n_layers = len(meta["layer_sizes"]) - 1
    h = as_tensor(x)
    if h.data.ndim != 2 or h.shape[1] != meta["layer_sizes"][0]:
        raise ShapeError(f"input shape {h.shape} incompatible with first layer {meta['layer_sizes'][0]}")
    for i in range(n_layers):
        h = linear(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])
        if i < n_layers - 1 or final_activation:
            h = activate(h, meta["activation"], meta.get("slope", DEFAULT_LRELU_SLOPE))
    return h


class _NoGrad:
    def __init__(self, params: ParamSet):
        self.params = params
        self.saved: list[bool] = []

    def __enter__(self):
        self.saved = [t.requires_grad for t in self.params.values()]
        self.params.set_trainable(False)
        return self.params

    def __exit__(self, *exc):
        for t, flag in zip(self.params.values(), self.saved):
            t.requires_grad = flag
        return False


def frozen(params: ParamSet) -> _NoGrad:
    """Context manager: treat ``params`` as constants while inside."""
    return _NoGrad(params)


def forward(params: ParamSet, input, record: bool = True) -> tuple[Tensor, Graph | None]:
    if not record:
        with frozen(params):
            out = mlp_apply(params, Tensor(np.asarray(input, dtype=np.float64)))
        return out, None
    out = mlp_apply(params, input)
    return out, Graph.trace(out)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamSet) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update, in place."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    num = np.abs(analytic - numeric)
    den = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(num / den)) if num.size else 0.0


def finite_difference_check(params: ParamSet, loss_fn: Callable[[], Tensor], tolerance: float = 1e-4,
                            h: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and reads ``params`` by closure. The
    relative error uses ``|a-n| / max(|a|+|n|, 1e-6)`` elementwise; the floor
    keeps near-zero gradients from amplifying round-off. At ``h = 1e-4`` the
    O(h^2) truncation error and the O(eps/h) round-off are both far below
    the usual 1e-4 tolerance.
    """
    params.zero_grad()
    backward(loss_fn(), params)
    analytic = {k: t.grad.copy() for k, t in params.items()}
    per_param = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        per_param[name] = relative_error(analytic[name].reshape(-1), numeric)
    params.zero_grad()
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(per_param, worst, tolerance)
