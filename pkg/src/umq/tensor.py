"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the data; this module owns the graph. Tensors are immutable
after creation (ops build new nodes), a graph lives on one thread, and
`backward` on a scalar loss accumulates gradients additively into every
`requires_grad` leaf.

Training runs in float32, oracles and gradient checks in float64; binary
ops promote to the wider dtype.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ReplayMismatch(RuntimeError):
    """Frozen-detach replay desynchronized (graph shape changed)."""


class _Context:
    """Per-process graph context (graphs are thread-confined)."""

    def __init__(self):
        self.grad_enabled = True
        self.branch_log: list[bytes] | None = None
        self.detach_mode = "normal"  # normal | record | replay
        self.detach_store: list[np.ndarray] = []
        self.detach_cursor = 0


_CTX = _Context()


@contextmanager
def no_grad():
    prev = _CTX.grad_enabled
    _CTX.grad_enabled = False
    try:
        yield
    finally:
        _CTX.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _CTX.grad_enabled


def record_branch(tag: str, payload: np.ndarray | bytes) -> None:
    """Log a non-differentiable decision (mask, index set, ordering).

    The gradient checker compares these logs between perturbed
    evaluations to detect kink crossings. No-op unless a check is
    recording.
    """
    if _CTX.branch_log is not None:
        if isinstance(payload, np.ndarray):
            payload = payload.tobytes()
        _CTX.branch_log.append(tag.encode() + b":" + payload)


@contextmanager
def branch_recording(log: list[bytes]):
    prev = _CTX.branch_log
    _CTX.branch_log = log
    try:
        yield
    finally:
        _CTX.branch_log = prev


@contextmanager
def detach_recording():
    """Record every detached value (base pass of a gradient check)."""
    _CTX.detach_mode = "record"
    _CTX.detach_store = []
    _CTX.detach_cursor = 0
    try:
        yield _CTX.detach_store
    finally:
        _CTX.detach_mode = "normal"


@contextmanager
def detach_replay(store: list[np.ndarray]):
    """Replay recorded detach values so stop-gradient sites stay constant."""
    _CTX.detach_mode = "replay"
    _CTX.detach_store = store
    _CTX.detach_cursor = 0
    try:
        yield
    finally:
        _CTX.detach_mode = "normal"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "op")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (), backward_fn=None, op: str = "leaf"):
        self.data = data
        self.requires_grad = requires_grad and _CTX.grad_enabled
        self.grad: np.ndarray | None = None
        self._parents = parents if self.requires_grad else ()
        self._backward_fn: Callable[[np.ndarray], None] | None = (
            backward_fn if self.requires_grad else None
        )
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        # only leaves retain gradients; clearing intermediates lets several
        # losses that share a graph run backward independently
        for node in order:
            if node._backward_fn is not None:
                node.grad = None

    # operator sugar -------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, op="param")


def _promote(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    if a.dtype == b.dtype:
        return a, b
    wide = np.float64 if np.float64 in (a.dtype, b.dtype) else np.float32
    if a.dtype != wide:
        a = _cast(a, wide)
    if b.dtype != wide:
        b = _cast(b, wide)
    return a, b


def _cast(t: Tensor, dtype) -> Tensor:
    out_data = t.data.astype(dtype)
    out = Tensor(out_data, t.requires_grad, (t,), None, "cast")

    def backward_fn(g):
        t._accumulate(g.astype(t.dtype))

    out._backward_fn = backward_fn
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return _promote(a, b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op_name: str, a, b, forward, grad_a, grad_b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out_data = forward(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}") from exc
    requires = a.requires_grad or b.requires_grad
    out = Tensor(out_data, requires, (a, b), None, op_name)
    if out.requires_grad:
        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad_a(g, a.data, b.data, out_data), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad_b(g, a.data, b.data, out_data), b.shape))
        out._backward_fn = backward_fn
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _promote(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b), None, "matmul")
    if out.requires_grad:
        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward_fn = backward_fn
    return out


def transpose(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {t.shape}")
    out = Tensor(t.data.T.copy(), t.requires_grad, (t,), None, "transpose")
    if out.requires_grad:
        out._backward_fn = lambda g: t._accumulate(g.T)
    return out


def reshape(t: Tensor, shape) -> Tensor:
    out = Tensor(t.data.reshape(shape), t.requires_grad, (t,), None, "reshape")
    if out.requires_grad:
        out._backward_fn = lambda g: t._accumulate(g.reshape(t.shape))
    return out


def _unary(op_name: str, t: Tensor, forward, grad_fn) -> Tensor:
    out = Tensor(forward(t.data), t.requires_grad, (t,), None, op_name)
    if out.requires_grad:
        out._backward_fn = lambda g: t._accumulate(grad_fn(g, t.data, out.data))
    return out


def power(t: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _unary("pow", t, lambda x: x ** exponent,
                  lambda g, x, o: g * exponent * x ** (exponent - 1.0))


def exp(t: Tensor) -> Tensor:
    return _unary("exp", t, np.exp, lambda g, x, o: g * o)


def log(t: Tensor) -> Tensor:
    return _unary("log", t, np.log, lambda g, x, o: g / x)


def sqrt(t: Tensor) -> Tensor:
    return _unary("sqrt", t, np.sqrt, lambda g, x, o: g / (2.0 * o))


def tanh(t: Tensor) -> Tensor:
    return _unary("tanh", t, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def sigmoid(t: Tensor) -> Tensor:
    def forward(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return _unary("sigmoid", t, forward, lambda g, x, o: g * o * (1.0 - o))


def relu(t: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    mask = t.data > 0
    record_branch("relu", np.packbits(mask.reshape(-1)))
    out = Tensor(np.where(mask, t.data, 0.0), t.requires_grad, (t,), None, "relu")
    if out.requires_grad:
        out._backward_fn = lambda g: t._accumulate(g * mask)
    return out


hinge = relu  # max(., 0) used by the margin losses


def absolute(t: Tensor) -> Tensor:
    sign = np.sign(t.data)
    record_branch("abs", sign.astype(np.int8))
    out = Tensor(np.abs(t.data), t.requires_grad, (t,), None, "abs")
    if out.requires_grad:
        out._backward_fn = lambda g: t._accumulate(g * sign)
    return out


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = t.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(np.asarray(out_data), t.requires_grad, (t,), None, "sum")
    if out.requires_grad:
        def backward_fn(g):
            g_exp = g if (axis is None or keepdims) else np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(g_exp, t.shape).copy())
        out._backward_fn = backward_fn
    return out


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = t.data.size if axis is None else t.shape[axis]
    return tsum(t, axis=axis, keepdims=keepdims) * (1.0 / count)


def variance(t: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Population variance along `axis`."""
    centered = t - tmean(t, axis=axis, keepdims=True)
    return tmean(centered * centered, axis=axis, keepdims=keepdims)


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilized."""
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, t.requires_grad, (t,), None, "softmax")
    if out.requires_grad:
        def backward_fn(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            t._accumulate(s * (g - dot))
        out._backward_fn = backward_fn
    return out


def l2norm_rows(t: Tensor) -> Tensor:
    """Per-row Euclidean norm, [n x d] -> [n]; subgradient 0 at the origin."""
    norms = np.sqrt((t.data * t.data).sum(axis=-1))
    near_zero = norms < 1e-12
    record_branch("l2norm", np.packbits(near_zero.reshape(-1)))
    out = Tensor(norms, t.requires_grad, (t,), None, "l2norm")
    if out.requires_grad:
        safe = np.where(near_zero, 1.0, norms)
        def backward_fn(g):
            scale = np.where(near_zero, 0.0, g / safe)
            t._accumulate(np.expand_dims(scale, -1) * t.data)
        out._backward_fn = backward_fn
    return out


def sq_dist_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row squared Euclidean distance, [n x d] x [n x d] -> [n]."""
    diff = a - b
    return tsum(diff * diff, axis=-1)


def normalize_rows(t: Tensor, eps: float = 1e-8) -> Tensor:
    """L2-normalize each row; `eps` in the denominator guards zero rows."""
    norms = l2norm_rows(t)
    return t / (reshape(norms, (-1, 1)) + eps)


def layer_norm(t: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learnable scale/shift."""
    if t.shape[-1] != scale.data.size or t.shape[-1] != shift.data.size:
        raise ShapeError(
            f"layer_norm: feature dim {t.shape[-1]} vs scale {scale.shape} shift {shift.shape}")
    mu = tmean(t, axis=-1, keepdims=True)
    centered = t - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    normed = centered / sqrt(var + eps)
    return normed * scale + shift


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        wide = np.float64 if np.float64 in dtypes else np.float32
        tensors = [t if t.dtype == wide else _cast(t, wide) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    requires = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires, tuple(tensors), None, "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        def backward_fn(g):
            start = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, start + size)
                    t._accumulate(g[tuple(idx)])
                start += size
        out._backward_fn = backward_fn
    return out


def narrow(t: Tensor, start: int, length: int, axis: int = -1) -> Tensor:
    """Contiguous slice along `axis`; backward zero-pads."""
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor(t.data[tuple(idx)].copy(), t.requires_grad, (t,), None, "narrow")
    if out.requires_grad:
        def backward_fn(g):
            full = np.zeros_like(t.data)
            full[tuple(idx)] = g
            t._accumulate(full)
        out._backward_fn = backward_fn
    return out


def broadcast_rows(t: Tensor, n: int) -> Tensor:
    """Tile a [1 x d] row to [n x d]; backward sums over rows."""
    if t.data.ndim != 2 or t.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected [1 x d], got {t.shape}")
    out = Tensor(np.broadcast_to(t.data, (n, t.shape[1])).copy(),
                 t.requires_grad, (t,), None, "broadcast_rows")
    if out.requires_grad:
        out._backward_fn = lambda g: t._accumulate(g.sum(axis=0, keepdims=True))
    return out


def detach(t: Tensor) -> Tensor:
    """Stop-gradient. Under gradient checking the detached values are
    recorded at the base point and replayed for perturbed evaluations."""
    mode = _CTX.detach_mode
    if mode == "record":
        _CTX.detach_store.append(t.data.copy())
        return Tensor(_CTX.detach_store[-1], op="detach")
    if mode == "replay":
        if _CTX.detach_cursor >= len(_CTX.detach_store):
            raise ReplayMismatch("more detach sites than recorded")
        stored = _CTX.detach_store[_CTX.detach_cursor]
        _CTX.detach_cursor += 1
        if stored.shape != t.data.shape:
            raise ReplayMismatch(f"detach shape changed {stored.shape} -> {t.data.shape}")
        return Tensor(stored, op="detach")
    return Tensor(t.data.copy(), op="detach")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack [d]-vectors or [1 x d] rows into an [n x d] matrix."""
    rows = [t if t.data.ndim == 2 else reshape(t, (1, -1)) for t in tensors]
    return concat(rows, axis=0)
