"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a closed set of primitives covering what
the bijective flow, the convolutional segmenter and the training losses
need, each with a hand-written vector-Jacobian product. Recording happens
on an explicit ``Graph`` used as a context manager; with no graph active
every operation is plain numpy, which doubles as the inference path.

Determinism notes: all kernels are single-threaded numpy calls with a fixed
(pairwise) reduction order, so repeated runs on the same machine are
bit-identical. Each worker thread sees its own active-graph slot, and
inference-mode calls never touch shared state.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Param",
    "ShapeError",
    "DomainError",
    "StateError",
    "NumericalError",
    "NondeterministicError",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "broadcast_to",
    "concat",
    "slice_axis",
    "matmul_channels",
    "conv2d",
    "log_softmax_channels",
    "squeeze2x2",
    "unsqueeze2x2",
    "PRIMITIVE_NAMES",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's contract."""


class DomainError(ValueError):
    """An input value lies outside a primitive's numeric domain."""


class StateError(RuntimeError):
    """An operation needs state (a graph, an initialized layer) that is absent."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where training cannot continue."""


class NondeterministicError(RuntimeError):
    """A loss function returned different values on re-evaluation."""


_tls = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_tls, "graph", None)


class Graph:
    """Append-only tape of primitive applications (typically one train step).

    Node ids are append positions, so topological order is append order and
    a single reverse sweep implements the chain rule, visiting each node
    exactly once. ``gradients`` maps node id -> accumulated gradient array
    after :func:`backward`.
    """

    def __init__(self) -> None:
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list[Callable[[np.ndarray], tuple] | None] = []
        self._params: list["Param | None"] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Graph":
        self._prev = _active_graph()
        _tls.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.graph = self._prev
        del self._prev

    def __len__(self) -> int:
        return len(self._inputs)

    def _append(self, input_ids: tuple[int, ...], vjp, param: "Param | None" = None) -> int:
        self._inputs.append(input_ids)
        self._vjps.append(vjp)
        self._params.append(param)
        return len(self._inputs) - 1

    def _track(self, t: "Tensor") -> int:
        # Leaves (params, constants) are registered lazily on first use.
        if t._graph is self:
            return t._node
        nid = self._append((), None, t._param)
        t._graph = self
        t._node = nid
        return nid

    def grad_wrt(self, t: "Tensor") -> np.ndarray | None:
        """Gradient of the last backward root w.r.t. ``t`` (None if unreached)."""
        if t._graph is not self or t._node is None:
            return None
        return self.gradients.get(t._node)


class Tensor:
    """Immutable dense array of float64 values, optionally recorded on a tape."""

    __slots__ = ("data", "_graph", "_node", "_param")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self._graph: Graph | None = None
        self._node: int | None = None
        self._param: Param | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _add(self, _coerce(other))

    def __radd__(self, other):
        return _add(_coerce(other), self)

    def __sub__(self, other):
        return _sub(self, _coerce(other))

    def __rsub__(self, other):
        return _sub(_coerce(other), self)

    def __mul__(self, other):
        return _mul(self, _coerce(other))

    def __rmul__(self, other):
        return _mul(_coerce(other), self)

    def __truediv__(self, other):
        return _div(self, _coerce(other))

    def __rtruediv__(self, other):
        return _div(_coerce(other), self)

    def __neg__(self):
        return _neg(self)

    def exp(self) -> "Tensor":
        return _exp(self)

    def log(self) -> "Tensor":
        return _log(self)

    def tanh(self) -> "Tensor":
        return _tanh(self)

    def sum(self) -> "Tensor":
        return _sum(self)

    def mean(self) -> "Tensor":
        return _mean(self)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, tuple(shape))


class Param:
    """Trainable tensor plus an accumulated gradient of identical shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str) -> None:
        v = value if isinstance(value, Tensor) else Tensor(value)
        v._param = self
        self.value = v
        self.grad = Tensor(np.zeros(v.shape))
        self.name = name

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def assign(self, data) -> None:
        """Replace the value with a fresh tensor of the same shape."""
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != self.value.shape:
            raise ShapeError(
                f"param {self.name}: cannot assign shape {arr.shape} over {self.value.shape}"
            )
        t = Tensor(arr.copy())
        t._param = self
        self.value = t

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    g = _active_graph()
    if g is not None:
        ids = tuple(g._track(t) for t in inputs)
        out._node = g._append(ids, vjp)
        out._graph = g
    return out


def _pair_reducers(a: Tensor, b: Tensor, op: str):
    """Shape check for binary ops: equal shapes, or a 0-d scalar on one side.

    Returns per-operand reducers mapping an output-shaped gradient back onto
    the operand's shape.
    """
    ident = lambda g: g
    to_scalar = lambda g: np.asarray(g.sum())
    if a.shape == b.shape:
        return ident, ident
    if a.shape == ():
        return to_scalar, ident
    if b.shape == ():
        return ident, to_scalar
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _add(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _pair_reducers(a, b, "add")

    def vjp(g):
        return ra(g), rb(g)

    return _record(a.data + b.data, (a, b), vjp)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _pair_reducers(a, b, "sub")

    def vjp(g):
        return ra(g), rb(-g)

    return _record(a.data - b.data, (a, b), vjp)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _pair_reducers(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return ra(g * bd), rb(g * ad)

    return _record(ad * bd, (a, b), vjp)


def _div(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _pair_reducers(a, b, "div")
    bad = b.data == 0.0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(bad))[0])
        raise DomainError(f"div: zero divisor at index {idx}")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return ra(g / bd), rb(-g * out / bd)

    return _record(out, (a, b), vjp)


def _neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _record(-a.data, (a,), vjp)


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def _log(a: Tensor) -> Tensor:
    bad = a.data <= 0.0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(bad))[0])
        raise DomainError(f"log: non-positive input at index {idx}")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _record(np.log(ad), (a,), vjp)


def _tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), vjp)


def _sum(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _record(a.data.sum(), (a,), vjp)


def _mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    shape, n = a.shape, a.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _record(a.data.mean(), (a,), vjp)


def _unbroadcast(g: np.ndarray, src_shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(src_shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(src_shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy right-aligned rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: {x.shape} -> {shape}: {e}") from None
    src = x.shape

    def vjp(g):
        return (_unbroadcast(g, src),)

    return _record(out, (x,), vjp)


def _reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}: {e}") from None
    src = x.shape

    def vjp(g):
        return (g.reshape(src),)

    return _record(out, (x,), vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[..., start:stop, ...]`` along one axis."""
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"slice: axis {axis} out of range for shape {x.shape}")
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for axis of size {n}")
    sl = (slice(None),) * axis + (slice(start, stop),)
    src = x.shape

    def vjp(g):
        buf = np.zeros(src)
        buf[sl] = g
        return (buf,)

    return _record(x.data[sl], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along ``axis``; all other dims must agree."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    nd = xs[0].data.ndim
    if not 0 <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range")
    for t in xs[1:]:
        if t.data.ndim != nd or any(
            i != axis and t.shape[i] != xs[0].shape[i] for i in range(nd)
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(np.concatenate([t.data for t in xs], axis=axis), xs, vjp)


def matmul_channels(w: Tensor, x: Tensor) -> Tensor:
    """Per-pixel channel mix: out[h, w, i] = sum_j W[i, j] * x[h, w, j]."""
    if w.data.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"matmul_channels: weight must be square, got {w.shape}")
    if x.data.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ShapeError(f"matmul_channels: {w.shape} does not act on {x.shape}")
    wd, xd = w.data, x.data
    c = wd.shape[0]

    def vjp(g):
        g2 = g.reshape(-1, c)
        dw = g2.T @ xd.reshape(-1, c)
        dx = g @ wd
        return dw, dx

    return _record(xd @ wd.T, (w, x), vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 same-size convolution with zero padding on an (H, W, C) map.

    kernel is (3, 3, C_in, C_out), bias (C_out,). Implemented as im2col +
    one GEMM so the whole step is a handful of deterministic numpy calls.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be (H, W, C), got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be (3, 3, C_in, C_out), got {kernel.shape}")
    h, w, cin = x.shape
    if kernel.shape[2] != cin:
        raise ShapeError(f"conv2d: kernel C_in {kernel.shape[2]} != input C {cin}")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    xp = np.zeros((h + 2, w + 2, cin))
    xp[1:-1, 1:-1] = x.data
    cols = np.empty((h, w, 3, 3, cin))
    for kh in range(3):
        for kw in range(3):
            cols[:, :, kh, kw, :] = xp[kh : kh + h, kw : kw + w, :]
    cols2 = cols.reshape(h * w, 9 * cin)
    k2 = kernel.data.reshape(9 * cin, cout)
    out = (cols2 @ k2 + bias.data).reshape(h, w, cout)

    def vjp(g):
        g2 = g.reshape(h * w, cout)
        db = g2.sum(axis=0)
        dk = (cols2.T @ g2).reshape(3, 3, cin, cout)
        dcols = (g2 @ k2.T).reshape(h, w, 3, 3, cin)
        dxp = np.zeros((h + 2, w + 2, cin))
        for kh in range(3):
            for kw in range(3):
                dxp[kh : kh + h, kw : kw + w, :] += dcols[:, :, kh, kw, :]
        return dxp[1:-1, 1:-1], dk, db

    return _record(out, (x, kernel, bias), vjp)


def log_softmax_channels(logits: Tensor) -> Tensor:
    """Numerically stable log-softmax over the channel (last) axis."""
    if logits.data.ndim != 3 or logits.shape[2] < 2:
        raise ShapeError(f"log_softmax_channels: need (H, W, C>=2), got {logits.shape}")
    m = logits.data.max(axis=2, keepdims=True)
    sh = logits.data - m
    out = sh - np.log(np.exp(sh).sum(axis=2, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=2, keepdims=True),)

    return _record(out, (logits,), vjp)


def squeeze2x2(x: Tensor) -> Tensor:
    """Fold each 2x2 spatial block into channels: (H, W, C) -> (H/2, W/2, 4C)."""
    if x.data.ndim != 3:
        raise ShapeError(f"squeeze2x2: input must be (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze2x2: spatial dims must be even, got {h}x{w}")
    out = (
        x.data.reshape(h // 2, 2, w // 2, 2, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h // 2, w // 2, 4 * c)
    )

    def vjp(g):
        return (
            g.reshape(h // 2, w // 2, 2, 2, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(h, w, c),
        )

    return _record(out, (x,), vjp)


def unsqueeze2x2(x: Tensor) -> Tensor:
    """Exact inverse of :func:`squeeze2x2`: (H, W, 4C) -> (2H, 2W, C)."""
    if x.data.ndim != 3:
        raise ShapeError(f"unsqueeze2x2: input must be (H, W, C), got {x.shape}")
    h, w, c4 = x.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze2x2: channels must be divisible by 4, got {c4}")
    c = c4 // 4
    out = x.data.reshape(h, w, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * h, 2 * w, c)

    def vjp(g):
        return (
            g.reshape(h, 2, w, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, 4 * c),
        )

    return _record(out, (x,), vjp)


PRIMITIVE_NAMES = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "tanh",
    "sum", "mean", "broadcast", "reshape", "slice", "concat",
)


def apply_primitive(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply one named primitive from the closed set.

    Pure given its inputs: same data in, same data out, no hidden state
    beyond the recording side effect on the active graph.
    """
    ins = [_coerce(t) for t in inputs]
    if op == "add":
        return _add(*ins)
    if op == "sub":
        return _sub(*ins)
    if op == "mul":
        return _mul(*ins)
    if op == "div":
        return _div(*ins)
    if op == "neg":
        return _neg(*ins)
    if op == "exp":
        return _exp(*ins)
    if op == "log":
        return _log(*ins)
    if op == "tanh":
        return _tanh(*ins)
    if op == "sum":
        return _sum(*ins)
    if op == "mean":
        return _mean(*ins)
    if op == "broadcast":
        return broadcast_to(ins[0], kwargs["shape"])
    if op == "reshape":
        return _reshape(ins[0], tuple(kwargs["shape"]))
    if op == "slice":
        return slice_axis(ins[0], kwargs["axis"], kwargs["start"], kwargs["stop"])
    if op == "concat":
        return concat(ins, kwargs["axis"])
    raise ValueError(f"unknown primitive {op!r}")


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(param) into every reachable Param's grad.

    The root must be a scalar recorded on a graph. The sweep walks node ids
    from the root down to zero, so each node's vjp runs exactly once, after
    all of its consumers. Repeated calls accumulate additively into grads.
    """
    if root.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    g = root._graph
    if g is None or root._node is None:
        raise StateError("backward: root tensor is not recorded on a graph")
    grads: dict[int, np.ndarray] = {root._node: np.ones(())}
    for nid in range(root._node, -1, -1):
        gout = grads.get(nid)
        if gout is None:
            continue
        vjp = g._vjps[nid]
        if vjp is None:
            p = g._params[nid]
            if p is not None:
                p.grad.data += gout
            continue
        gins = vjp(gout)
        for iid, gi in zip(g._inputs[nid], gins):
            if gi is None:
                continue
            prev = grads.get(iid)
            grads[iid] = gi if prev is None else prev + gi
    g.gradients = grads


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Param],
    eps: float = 1e-5,
) -> float:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must be deterministic, take no arguments and return a scalar
    Tensor; it is re-evaluated 2P + 3 times (P = total scalar parameters).
    Returns the worst relative error |analytic - fd| / max(1, |analytic|).
    Central differences are exact for quadratics up to roundoff, which the
    tests use as a sanity anchor.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"finite_diff_check: eps {eps} outside (0, 1e-2]")
    params = list(params)
    v1 = float(loss_fn())
    v2 = float(loss_fn())
    if v1 != v2:
        raise NondeterministicError(
            f"finite_diff_check: loss_fn returned {v1!r} then {v2!r}"
        )
    for p in params:
        p.zero_grad()
    with Graph():
        loss = loss_fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.data.reshape(-1).copy()
        flat = p.value.data.reshape(-1)  # perturbed in place, restored below
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(loss_fn())
            flat[j] = orig - eps
            f_minus = float(loss_fn())
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(analytic[j] - fd) / max(1.0, abs(analytic[j]))
            if rel > worst:
                worst = rel
        p.zero_grad()
    return worst
