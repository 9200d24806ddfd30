"""Numpy-backed tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a :class:`Node` holding its inputs and
a backward closure.  :func:`backward` collects the nodes reachable from a
scalar output into a :class:`Tape`, then replays them in reverse recording
order, accumulating gradients additively.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

PRECISIONS = {"single": np.float32, "double": np.float64}

_seq = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable node recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``data`` is never mutated by primitives; only ``grad`` changes after
    creation (and parameters, by the optimizer).
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is not None:
            arr = np.array(data, dtype=PRECISIONS[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"

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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a} and {b}") from None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def binary_elementwise(kind: str, a, b) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


def negate(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "negate")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    y = (d * cdf).astype(d.dtype)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return ((g * (cdf + d * pdf)).astype(d.dtype),)

    return _make(y, (x,), bw, "gelu")


def unary_elementwise(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"sigmoid": sigmoid, "tanh": tanh, "gelu": gelu, "negate": negate}[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match width {c}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, gd.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of an empty list")
    nd = parts[0].ndim
    ax = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {p.shape} differ off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous range ``[start, stop)`` along ``axis``."""
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), bw, "slice")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(x.data.dtype),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def outer_product(u: Tensor, w: Tensor) -> Tensor:
    """``out[..., i, j] = u[..., i] * w[..., j]``."""
    if u.shape != w.shape:
        raise DimensionError(f"outer_product: lengths differ, {u.shape} vs {w.shape}")
    ud, wd = u.data, w.data

    def bw(g):
        gu = (g * wd[..., None, :]).sum(axis=-1) if u.requires_grad else None
        gw = (g * ud[..., :, None]).sum(axis=-2) if w.requires_grad else None
        return gu, gw

    return _make(ud[..., :, None] * wd[..., None, :], (u, w), bw, "outer")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),), "broadcast")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy of ``logits`` (B, K) against integer ``labels``, averaged over B."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label ids must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    d = logits.data
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=d.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Recorded primitive applications in recording order."""

    nodes: list[Node] = field(default_factory=list)
    outputs: dict[int, Tensor] = field(default_factory=dict, repr=False)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes = []
        stack = [output]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append((n, t))
            stack.extend(n.inputs)
        nodes.sort(key=lambda p: p[0].seq)
        return cls([n for n, _ in nodes], {id(n): t for n, t in nodes})

    def __len__(self):
        return len(self.nodes)


def backward(output: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``output``.

    Gradients accumulate into existing ``grad`` buffers, so call
    ``zero_grad`` between independent passes.
    """
    if output.data.size != 1 or output.ndim > 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ContractError("backward on a tensor that does not require grad")
    if tape is None:
        tape = Tape.record(output)
    outputs = tape.outputs
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    if output.node is None:
        output.grad = grads[id(output)] if output.grad is None else output.grad + grads[id(output)]
        return tape
    for node in reversed(tape.nodes):
        out = outputs[id(node)]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    return tape


# ---------------------------------------------------------------- checking


def grad_check_leaves(
    f: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Per-leaf max relative error between backprop and central differences.

    The error for one element is ``|a - n| / max(1, |a|, |n|)``.
    """
    for name, t in leaves.items():
        if t.data.dtype != np.float64:
            raise ContractError(f"grad_check requires double precision; leaf {name!r} is {t.precision}")
    f0 = f()
    f1 = f()
    if f0.data.tobytes() != f1.data.tobytes():
        raise ContractError("grad_check: f is not deterministic (two evaluations differ)")
    for t in leaves.values():
        t.zero_grad()
    backward(f0)
    errors = {}
    for name, t in leaves.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
        t.zero_grad()
    return errors


def grad_check(f: Callable[[], Tensor], leaves: Mapping[str, Tensor] | Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error of backprop gradients against central differences."""
    if not isinstance(leaves, Mapping):
        leaves = {str(i): t for i, t in enumerate(leaves)}
    errs = grad_check_leaves(f, leaves, eps)
    return max(errs.values(), default=0.0)
