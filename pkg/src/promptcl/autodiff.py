"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable primitive appends a :class:`Node` to the active
:class:`Graph`.  :func:`backward_all` walks the tape in reverse, so the tape
order is already a valid topological order.  Only leaf tensors (parameters)
accumulate ``.grad``; intermediate gradients live in a scratch dict for the
duration of one backward pass.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 * x**3)))
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)

    def record(self, op, inputs, output, backward) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node_id = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_graph = Graph()
_grad_enabled = True
_dtype = DTYPE


def current_graph() -> Graph:
    return _graph


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; outputs never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily build new tensors in ``dtype`` (used for extended-precision oracles)."""
    global _dtype
    prev = _dtype
    _dtype = dtype
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name

    # -- convenience -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_record(*inputs: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in inputs)


def _make(data, inputs, op, backward) -> Tensor:
    if _needs_record(*inputs):
        out = Tensor(data, requires_grad=True)
        _graph.record(op, inputs, out, backward)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        a = as_tensor(a)
        return _make(a.data * c, (a,), "scale", lambda g: (g * c,))
    a = as_tensor(a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), "mul", backward)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    d2 = d * d
    t = np.tanh(GELU_C * d * (1.0 + GELU_A * d2))
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), "gelu", backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from exc
    return _make(out, (x,), "broadcast_to", lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, "concat", backward)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), "getitem", backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` may have any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids.max()) if ids.max() >= table.shape[0] else int(ids.min())
        raise IndexError(f"row index {bad} out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), "take_rows", backward)


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # batched activations against a shared weight: fold the batch into rows
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*a.shape[:-1], n)

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), "matmul", backward)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


# -- normalisation & probabilities ------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is an additive constant (no grad)."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), "layer_norm", backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along the last axis."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    y = x.data / denom

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(clipped, g / denom, (g - y * proj) / denom),)

    return _make(y, (x,), "l2_normalize", backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), "log_softmax", backward)


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_mean expects logits of rank 2, got {logits.shape}")
    b, c = logits.shape
    if b < 1 or labels.shape[0] != b:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {b}")
    for i, lab in enumerate(labels):
        if lab < 0 or lab >= c:
            raise IndexError(f"label {int(lab)} at index {i} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(b)
    out = np.array((lse - z[rows, labels]).mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _make(out, (logits,), "cross_entropy", backward)


# -- backward ---------------------------------------------------------------

def backward_all(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise DimensionError(f"backward_all needs a scalar loss, got shape {loss.shape}")
    graph = _graph
    if loss.node_id is None:
        if not retain_graph:
            graph.clear()
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(loss.node_id, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = graph.nodes[idx]
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node_id is None:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=DTYPE, copy=True).reshape(inp.shape)
                else:
                    inp.grad += ig
            else:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
    if not retain_graph:
        graph.clear()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    oracle_dtype=None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``max_entries`` caps the number of coordinates probed per tensor (sampled
    with ``rng``); ``None`` probes every coordinate.

    Analytic gradients are always float64.  With ``oracle_dtype`` (e.g.
    ``np.longdouble``) the perturbed forward passes run in that precision, so
    the numeric side is not limited by float64 rounding of ``f`` (about
    ``ulp(f) / h``, which swamps coordinates whose true gradient is ~1e-9).
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    zero_grads(params)
    _graph.clear()
    loss = f()
    backward_all(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    report = GradCheckReport(max_rel_err={}, tol=tol)
    saved = [p.data for p in params]
    if oracle_dtype is not None:
        for p in params:
            p.data = p.data.astype(oracle_dtype)
    try:
        with compute_dtype(oracle_dtype or DTYPE):
            _numeric_pass(f, params, names, analytic, h, tol, max_entries, rng, report)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return report


def _numeric_pass(f, params, names, analytic, h, tol, max_entries, rng, report) -> None:
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        gflat = ga.reshape(-1)
        for i in idxs:
            loc = tuple(int(j) for j in np.unravel_index(i, p.shape))
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().data.reshape(-1)[0]
                flat[i] = orig - h
                fm = f().data.reshape(-1)[0]
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            if not np.isfinite(num) or not np.isfinite(gflat[i]):
                report.failures.append(f"{name}[{loc}]: non-finite value")
                worst = float("inf")
                continue
            err = float(rel_err(gflat[i], num))
            if err > worst:
                worst = err
            if err > tol:
                report.failures.append(
                    f"{name}[{loc}]: analytic {gflat[i]:.6e} numeric {num:.6e}"
                )
        report.max_rel_err[name] = worst
