"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its operands and
a closure propagating the output gradient back to them. ``Tensor.backward``
orders the recorded history topologically (the tape) and runs the closures in
reverse. All arrays are float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""


class DivergedError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes introduced or stretched by numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(DTYPE, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` of every requires-grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = backward
    else:
        # constant subgraph: nothing to propagate, drop history
        out._parents = ()
    return out


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the history of ``root`` in topological order (operands first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------- elementwise

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: ((a, _unbroadcast(g / b.data, a.shape)),
                            (b, _unbroadcast(-g * out / b.data, b.shape))))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: ((x, g * out),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), "log", lambda g: ((x, g / x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), "sqrt", lambda g: ((x, g * 0.5 / out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), "clip", lambda g: ((x, g * inside),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), "relu", lambda g: ((x, g * pos),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
    return _make(x.data * cdf, (x,), "gelu", lambda g: ((x, g * (cdf + x.data * pdf)),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _make(out, (x,), "sigmoid", lambda g: ((x, g * out * (1.0 - out)),))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "gelu": gelu}


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {x.shape}")
    return _make(x.data.T.copy(), (x,), "transpose", lambda g: ((x, g.T),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from exc
    return _make(out, (x,), "reshape", lambda g: ((x, g.reshape(x.shape)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append((t, g[tuple(idx)]))
        return parts

    return _make(out, tensors, "concat", backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return ((x, full),)

    return _make(x.data[index], (x,), "take_rows", backward)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return ((x, full),)

    return _make(x.data[:, lo:hi].copy(), (x,), "slice_cols", backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _make(np.asarray(out), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ------------------------------------------------------------------ attention

def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to ``mask``; rows with no unmasked entry give zeros."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs input {x.shape}")
    shifted = np.where(mask, x.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        return ((x, out * (g - (g * out).sum(axis=-1, keepdims=True))),)

    return _make(out, (x,), "masked_softmax", backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: ((x, g * keep),))


# -------------------------------------------------------------- normalization

def graph_norm(x: Tensor, weight: Tensor, bias: Tensor, mean_scale: Tensor, eps: float = 1e-5) -> Tensor:
    """GraphNorm over one graph: shift by a learnable fraction of the node mean, then standardize."""
    centered = x - mean_scale * mean(x, axis=0, keepdims=True)
    var = mean(centered * centered, axis=0, keepdims=True)
    return weight * centered / sqrt(var + eps) + bias


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - mean(x, axis=0, keepdims=True)
    var = mean(centered * centered, axis=0, keepdims=True)
    return weight * centered / sqrt(var + eps) + bias


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - mean(x, axis=1, keepdims=True)
    var = mean(centered * centered, axis=1, keepdims=True)
    return weight * centered / sqrt(var + eps) + bias


# ------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``.

    ``decoupled=True`` gives AdamW (decay applied to the parameters directly);
    otherwise weight decay is folded into the gradient as an L2 term.
    A non-finite gradient leaves parameters and state untouched.
    """
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise DivergedError("non-finite gradient; update rejected")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        if state.weight_decay and state.decoupled:
            p.data = p.data * (1.0 - state.lr * state.weight_decay)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Thin stateful wrapper around :func:`adam_step` over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay, decoupled=decoupled)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    """Cosine annealing to zero with ``T_max = total``."""
    if total <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * min(epoch, total) / total))


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tolerance: float

    @property
    def passed_mask(self) -> np.ndarray:
        return self.rel_error < self.tolerance

    @property
    def passed(self) -> bool:
        return bool(np.all(self.passed_mask))

    @property
    def max_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # floor keeps near-zero gradients from turning round-off into large ratios
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                    tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central differences for every coordinate of ``params``."""
    for p in params:
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
    loss_fn().backward()
    analytic = np.concatenate([(np.zeros_like(p.data) if p.grad is None else p.grad).ravel() for p in params]) \
        if params else np.zeros(0)
    numeric = np.empty_like(analytic)
    k = 0
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[k] = (up - down) / (2.0 * step)
            k += 1
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tolerance)


def grad_check(f: Callable[[Tensor], Tensor], point, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    x = Tensor(np.array(point, dtype=DTYPE), requires_grad=True)
    return check_gradients(lambda: f(x), [x], step=step, tolerance=tolerance)
