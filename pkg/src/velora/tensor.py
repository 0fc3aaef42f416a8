"""Small reverse-mode autodiff engine on top of numpy.

Every op builds its result eagerly and, when any operand requires a
gradient, records a :class:`GraphNode` holding the parents and a closure
that maps the output gradient to parent gradients. :func:`backward` walks
the graph in reverse topological order and accumulates into ``.grad`` of
leaf tensors.

Elementwise ops follow numpy broadcasting; gradients are summed back to
each operand's shape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "GraphNode",
    "backward",
    "no_grad",
    "grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "corrupt_backward",
    "count_flops",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sum",
    "mean",
    "elementwise",
    "matmul",
    "linear",
    "transpose",
    "swapaxes",
    "reshape",
    "getitem",
    "concat",
    "broadcast_to",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "mse",
    "zero_grads",
    "finite_diff_check",
    "gradient_pair",
]


class _State:
    dtype: np.dtype = np.dtype(np.float32)
    grad_enabled: bool = True
    faults: set = set()
    flops: list = []


_STATE = _State()


def get_default_dtype() -> np.dtype:
    return _STATE.dtype


def set_default_dtype(dtype) -> None:
    _STATE.dtype = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    prev = _STATE.dtype
    _STATE.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def grad_enabled() -> bool:
    return _STATE.grad_enabled


@contextlib.contextmanager
def corrupt_backward(*ops: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale the backward output of the named ops by ``factor``.

    Used to confirm that gradient checks actually detect broken rules.
    """
    prev = set(_STATE.faults)
    _STATE.faults = prev | {(op, factor) for op in ops}
    try:
        yield
    finally:
        _STATE.faults = prev


@contextlib.contextmanager
def count_flops() -> Iterator[list]:
    """Collect multiply-add counts of matmul/linear ops run inside the block.

    Yields a one-element list holding the running FLOP total (2 per MAC).
    """
    box = [0]
    _STATE.flops.append(box)
    try:
        yield box
    finally:
        _STATE.flops.remove(box)


def _record_macs(macs: int) -> None:
    for box in _STATE.flops:
        box[0] += 2 * int(macs)


@dataclass
class GraphNode:
    op_tag: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """n-d array with an optional gradient and a link into the autodiff graph."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _STATE.dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: GraphNode | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> None:
        """Cast the stored data in place (used to switch a model to float64)."""
        self.data = np.array(self.data, dtype=dtype)
        if self.grad is not None:
            self.grad = np.array(self.grad, dtype=dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """A leaf tensor owned by a module. ``requires_grad=False`` marks it frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype, name=name)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter(shape={self.shape}, {state})"


def _not_scalar(shape):
    raise ContractError(f"tensor of shape {shape} is not a scalar")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple, op: str, bwd: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _STATE.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.node = None
    if needs:
        for tag, factor in _STATE.faults:
            if tag == op:
                bwd = _scaled(bwd, factor)
        out.node = GraphNode(op, parents, bwd)
    return out


def _scaled(bwd, factor):
    def wrapped(g):
        return tuple(None if r is None else r * factor for r in bwd(g))

    return wrapped


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), "mul", bwd)


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(factor)
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), "neg", lambda g: (-g,))


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (x,), "sum", lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)
    inv = x.data.dtype.type(1.0 / count)
    return _make(
        np.asarray(out, dtype=x.data.dtype),
        (x,),
        "mean",
        lambda g: (_expand_reduced(g * inv, x.shape, axis, keepdims),),
    )


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "mean": mean,
    "sum": sum,
}


def elementwise(op_tag: str, *operands, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise/reduction ops by tag."""
    try:
        fn = _ELEMENTWISE[op_tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_tag!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    _record_macs(out.size * a.shape[-1])

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", bwd)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [..., in] and weight [out, in]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    _record_macs(out.size * weight.shape[1])
    parents = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def bwd(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = gb = None
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, parents, "linear", bwd)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = _as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), "swapaxes", lambda g: (np.swapaxes(g, a1, a2),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing."""
    x = _as_tensor(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return _make(x.data[idx], (x,), "getitem", bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _make(out, ts, "concat", bwd)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), "broadcast_to", lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax: empty axis in shape {x.shape}")
    y = _softmax_np(x.data, axis)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), "softmax", bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), "log_softmax", bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = gg = gbeta = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), "layer_norm", bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    t = x.data.dtype.type
    xd = x.data
    x2 = xd * xd
    u = t(_GELU_C) * xd * (t(1.0) + t(0.044715) * x2)
    th = np.tanh(u)
    out = t(0.5) * xd * (t(1.0) + th)

    def bwd(g):
        du = t(_GELU_C) * (t(1.0) + t(3 * 0.044715) * x2)
        dy = t(0.5) * (t(1.0) + th) + t(0.5) * xd * (t(1.0) - th * th) * du
        return (g * dy,)

    return _make(out, (x,), "gelu", bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: label out of range for {logits.shape[1]} classes")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", bwd)


def mse(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bwd(g):
        gd = diff * (2.0 * g / n)
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return _make(loss, (pred, target), "mse", bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient and feeds ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            g = np.array(g, dtype=t.data.dtype)
            if t.grad is None:
                t.grad = g
            else:
                t.grad += g
            continue
        for p, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def gradient_pair(
    f: Callable[[Tensor], Any], x: Tensor, eps: float = 1e-3, indices: Sequence[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic and central-difference gradients of scalar ``f`` at flat ``indices`` of ``x``.

    ``x`` must be a leaf that ``f`` reads; its data is perturbed in place and
    restored afterwards.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        out = f(x)
        if not isinstance(out, Tensor):
            raise ContractError("f must return a Tensor for the analytic gradient")
        backward(out)
        analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    finally:
        x.grad = saved_grad
        x.requires_grad = was
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    analytic = analytic.reshape(-1)[list(idx)]
    numeric = np.empty(len(analytic), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].copy()
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            numeric[k] = (fp - fm) / (2.0 * eps)
    return analytic, numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Tensor], Any], x: Tensor, eps: float = 1e-3, indices: Sequence[int] | None = None
) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    analytic, numeric = gradient_pair(f, x, eps=eps, indices=indices)
    if analytic.size == 0:
        return 0.0
    return float(relative_error(analytic, numeric).max())
