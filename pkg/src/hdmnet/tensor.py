"""Dense tensors with reverse-mode differentiation.

Each differentiable op stores its parent tensors and a closure that maps the
gradient of its output to gradients of its inputs. ``Tensor.backward`` walks
the recorded graph in reverse topological order and accumulates gradients into
the leaves that require them.

Arrays are row-major numpy buffers, float64 unless asked otherwise.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Backward pass requested on an unusable graph."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
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
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> tuple[Tensor, ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    # -- graph ---------------------------------------------------------
    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def ancestors(self) -> list[Tensor]:
        """Every tensor reachable through recorded parents, self first."""
        seen: set[int] = set()
        out: list[Tensor] = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            out.append(node)
            stack.extend(node._parents)
        return out

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild the forward pass first")

        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        self._consumed = True


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(x: Tensor, s: float) -> Tensor:
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data > floor
    return _result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    keep = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * keep,), "clip")


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------

def _expand_grad(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g: (_expand_grad(g, x.shape, axis, keepdims),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _result(
        np.asarray(out), (x,), lambda g: (_expand_grad(g, x.shape, axis, keepdims) / n,), "mean"
    )


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    axis = _check_axis(x, axis, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit length; all-zero rows stay zero."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects 2-D input, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    live = norm > 0
    safe = np.where(live, norm, 1.0)
    out = np.where(live, x.data / safe, 0.0)

    def backward(g):
        gx = (g - out * (g * out).sum(axis=1, keepdims=True)) / safe
        return (np.where(live, gx, 0.0),)

    return _result(out, (x,), backward, "l2_normalize_rows")


def standardize(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance along ``axis`` (layer norm without affine terms)."""
    axis = _check_axis(x, axis, "standardize")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    out = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True) - out * (g * out).mean(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "standardize")


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m x k] @ [k x n], got {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` [n x c_in] and ``weight`` [c_out x c_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return _result(out, parents, backward, "linear")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects 2-D input, got {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reinterpret the shape without reordering elements."""
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into a zero buffer."""
    out = x.data[key]

    def backward(g):
        gx = np.zeros(x.shape)
        gx[key] = g
        return (gx,)

    return _result(np.asarray(out), (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0]
    axis = _check_axis(ref, axis, "concat")
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat",
    )


def concat_channel(a: Tensor, b: Tensor) -> Tensor:
    """Stack [c1 x h x w] and [c2 x h x w] into [(c1 + c2) x h x w]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channel: spatial extents differ, {a.shape} vs {b.shape}")
    return concat([a, b], axis=0)


def flatten_sites(x: Tensor) -> Tensor:
    """[c x h x w] -> [hw x c]; a transposed view of the reshaped buffer, never a copy."""
    if x.ndim != 3:
        raise ShapeError(f"flatten_sites expects [c x h x w], got {x.shape}")
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)))


def unflatten_sites(x: Tensor, h: int, w: int) -> Tensor:
    """[hw x c] -> [c x h x w]; inverse of :func:`flatten_sites`."""
    if x.ndim != 2 or x.shape[0] != h * w:
        raise ShapeError(f"unflatten_sites: {x.shape} does not hold {h}x{w} sites")
    return reshape(transpose(x), (x.shape[1], h, w))


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------

def _lerp_grid(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_matrix(i0, i1, frac, n_in: int) -> np.ndarray:
    m = np.zeros((len(i0), n_in))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of [c x h x w] with half-pixel centres and edge clamping.

    Written as ``a + f * (b - a)`` so equal sizes and constant inputs come back
    bit-exact.
    """
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects [c x h x w], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    y0, y1, fy = _lerp_grid(h, out_h)
    x0, x1, fx = _lerp_grid(w, out_w)
    top = x.data[:, y0, :]
    rows = top + fy[None, :, None] * (x.data[:, y1, :] - top)
    left = rows[:, :, x0]
    out = left + fx[None, None, :] * (rows[:, :, x1] - left)

    ry = _interp_matrix(y0, y1, fy, h)
    rx = _interp_matrix(x0, x1, fx, w)

    def backward(g):
        return (np.einsum("ih,cij,jw->chw", ry, g, rx),)

    return _result(out, (x,), backward, "bilinear_resize")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2 over [c x h x w]."""
    if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"avg_pool2 needs [c x h x w] with even h, w, got {x.shape}")
    c, h, w = x.shape
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,)

    return _result(out, (x,), backward, "avg_pool2")


# ---------------------------------------------------------------------------

_ELEMENTWISE = {
    "relu": relu,
    "add": add,
    "hadamard": hadamard,
    "scale": scale,
    "concat-channel": concat_channel,
}


def elementwise(name: str, *operands):
    """Dispatch by name: relu, add, hadamard, scale, concat-channel."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ValueError(f"unknown elementwise op {name!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*operands)


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
