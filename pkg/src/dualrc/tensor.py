"""Dense float tensors with a small tape-based reverse-mode autodiff.

Only the kernels the matching pipeline needs are provided: elementwise
arithmetic, reductions, reshapes/permutes, gathers, same-padded N-d
convolution (2D and 4D in practice), average pooling, nearest upsampling,
channel-wise L2 normalisation, softmax and the Frobenius norm.  Everything
above this module is a composition of these ops.

Gradients are recorded only when some input has ``requires_grad``.  Every
reduction runs in a fixed order so results are bitwise reproducible.
"""

from __future__ import annotations

import contextlib
import itertools
import weakref
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, GraphError, ParameterError, ShapeError

DEFAULT_EPS = 1e-8


# ---------------------------------------------------------------------------
# allocation accounting


class AllocationTracker:
    """Counts tensor payload bytes created while active.

    ``live_bytes`` follows tensor lifetimes through weakref finalizers, so the
    peak reflects what was simultaneously resident.  Explicit buffers that are
    not Tensors (the matcher's per-query score maps) are reported through
    :func:`record`, keyed by category.
    """

    def __init__(self):
        self.total_bytes = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self.n_tensors = 0
        self.max_elements: dict[str, int] = {}

    def _alloc(self, nbytes: int) -> None:
        self.total_bytes += nbytes
        self.live_bytes += nbytes
        self.n_tensors += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def _free(self, nbytes: int) -> None:
        self.live_bytes -= nbytes

    def record(self, category: str, n_elements: int) -> None:
        if n_elements > self.max_elements.get(category, 0):
            self.max_elements[category] = int(n_elements)


_TRACKERS: list[AllocationTracker] = []


@contextlib.contextmanager
def track_allocations() -> Iterator[AllocationTracker]:
    tracker = AllocationTracker()
    _TRACKERS.append(tracker)
    try:
        yield tracker
    finally:
        _TRACKERS.remove(tracker)


def record(category: str, n_elements: int) -> None:
    """Report a non-Tensor working buffer to every active tracker."""
    for t in _TRACKERS:
        t.record(category, n_elements)


def _release(tracker: AllocationTracker, nbytes: int) -> None:
    tracker._free(nbytes)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Row-major float tensor with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; converted to float64 unless already float32/float64.
    requires_grad : bool
        Whether gradients should be recorded through this tensor.
    """

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _grad_fn: Callable | None = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._grad_fn = _grad_fn
        if _TRACKERS:
            nbytes = arr.nbytes
            for t in _TRACKERS:
                t._alloc(nbytes)
                weakref.finalize(self, _release, t, nbytes)

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def permute(self, *axes): return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Ordered name -> Tensor map of model weights.

    Trainable entries carry ``requires_grad=True``; frozen entries (the toy
    backbone trunk) live in the same store so one container file holds a
    whole model.
    """

    def __init__(self):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ParameterError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self._entries.items() if v.requires_grad]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def update(self, other: "ParamStore") -> None:
        for name, t in other.items():
            self.add(name, t.data, trainable=t.requires_grad)

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self._entries.items())


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, params: ParamStore | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any recorded computation")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if params is not None:
        wanted = {id(t) for _, t in params.trainable()}
        if wanted and not wanted & seen:
            raise GraphError("none of the given parameters feed the loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(t) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at x == 0."""
    t = as_tensor(t)
    mask = t.data > 0
    return _make(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def maximum(t, floor: float) -> Tensor:
    """Elementwise max(x, floor) against a scalar floor."""
    t = as_tensor(t)
    mask = t.data > floor
    return _make(np.where(mask, t.data, floor), (t,), lambda g: (g * mask,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.dims} and {b.dims}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    out = np.sum(t.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)
    return _make(np.asarray(out), (t,), grad_fn)


def amax(t, axis, keepdims: bool = False) -> Tensor:
    """Max over ``axis`` (int or tuple); gradient routed to the first maximum."""
    t = as_tensor(t)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % t.ndim for a in axes)
    keep = [a for a in range(t.ndim) if a not in axes]
    moved = np.transpose(t.data, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    kept_shape = out.shape
    if keepdims:
        out = out.reshape([1 if a in axes else n for a, n in enumerate(t.shape)])

    def grad_fn(g):
        g = g.reshape(kept_shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)
    return _make(out, (t,), grad_fn)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def permute(t, axes) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(t.data, axes)), (t,),
                 lambda g: (np.transpose(g, inv),))


def getitem(t, idx) -> Tensor:
    """Indexing with numpy semantics; integer-array indices scatter-add on backward."""
    t = as_tensor(t)
    out = t.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, idx, g)
        return (gt,)
    return _make(np.array(out, copy=True), (t,), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(x) for x in tensors]
    out = np.stack([x.data for x in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(out, tuple(tensors), grad_fn)


# ---------------------------------------------------------------------------
# normalisation / probability ops


def l2_normalize_channels(f, epsilon: float = DEFAULT_EPS) -> Tensor:
    """Divide each location's channel vector (axis 0) by max(norm, epsilon)."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    f = as_tensor(f)
    norm = np.sqrt(np.sum(f.data * f.data, axis=0, keepdims=True))
    denom = np.maximum(norm, epsilon)
    out = f.data / denom
    active = norm > epsilon

    def grad_fn(g):
        proj = np.sum(out * g, axis=0, keepdims=True)
        return (np.where(active, (g - out * proj) / denom, g / denom),)
    return _make(out, (f,), grad_fn)


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _make(out, (t,), grad_fn)


def frobenius(t) -> Tensor:
    """sqrt(sum(x^2)); the subgradient at the origin is taken as zero."""
    t = as_tensor(t)
    val = float(np.sqrt(np.sum(t.data * t.data)))

    def grad_fn(g):
        if val == 0.0:
            return (np.zeros_like(t.data),)
        return (g * t.data / val,)
    return _make(np.asarray(val), (t,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops


def _conv_nd(x: Tensor, w: Tensor, padding: int, n_spatial: int) -> Tensor:
    if x.ndim != n_spatial + 1 or w.ndim != n_spatial + 2:
        raise ShapeError(f"conv{n_spatial}d expects input rank {n_spatial + 1} and "
                         f"kernel rank {n_spatial + 2}, got {x.dims} and {w.dims}")
    c_out, c_in = w.shape[:2]
    ksize = w.shape[2:]
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if padding < 0:
        raise ConfigError("padding must be nonnegative")
    spatial = x.shape[1:]
    out_sp = tuple(s + 2 * padding - k + 1 for s, k in zip(spatial, ksize))
    if min(out_sp) < 1:
        raise ShapeError("kernel larger than padded input")
    pad = [(0, 0)] + [(padding, padding)] * n_spatial
    xp = np.pad(x.data, pad)
    n_out = int(np.prod(out_sp))
    offsets = list(itertools.product(*(range(k) for k in ksize)))

    def window(off):
        return (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, out_sp))

    out = np.zeros((c_out, n_out), dtype=np.result_type(x.data, w.data))
    for off in offsets:
        cols = xp[window(off)].reshape(c_in, n_out)
        out += w.data[(slice(None), slice(None)) + off] @ cols
    out = out.reshape((c_out,) + out_sp)

    def grad_fn(g):
        gflat = g.reshape(c_out, n_out)
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for off in offsets:
            wo = w.data[(slice(None), slice(None)) + off]
            if gw is not None:
                cols = xp[window(off)].reshape(c_in, n_out)
                gw[(slice(None), slice(None)) + off] = gflat @ cols.T
            if gx is not None:
                gx[window(off)] += (wo.T @ gflat).reshape((c_in,) + out_sp)
        if gx is not None and padding:
            gx = gx[(slice(None),) + tuple(slice(padding, padding + s) for s in spatial)]
        return gx, gw
    return _make(out, (x, w), grad_fn)


def conv2d(x, kernel, padding: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation: [C_in,H,W] * [C_out,C_in,k,k]."""
    return _conv_nd(as_tensor(x), as_tensor(kernel), padding, 2)


def conv4d(x, kernel, padding: int | None = None) -> Tensor:
    """Same-size zero-padded 4D cross-correlation.

    ``x`` is [C_in,d0,d1,d2,d3]; ``kernel`` is [C_out,C_in,k,k,k,k] with odd k.
    """
    kernel = as_tensor(kernel)
    k = kernel.shape[-1]
    if kernel.ndim != 6 or len(set(kernel.shape[2:])) != 1:
        raise ShapeError(f"conv4d kernel must be [C_out,C_in,k,k,k,k], got {kernel.dims}")
    if k % 2 == 0:
        raise ConfigError(f"conv4d kernel size must be odd, got {k}")
    same = (k - 1) // 2
    if padding is None:
        padding = same
    elif padding != same:
        raise ConfigError(f"conv4d requires same padding {same}, got {padding}")
    return _conv_nd(as_tensor(x), kernel, padding, 4)


def avg_pool2d(t, s: int) -> Tensor:
    """Non-overlapping s x s mean pooling over the last two axes."""
    t = as_tensor(t)
    *lead, h, w = t.shape
    if h % s or w % s:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {s}")
    blocks = t.data.reshape(*lead, h // s, s, w // s, s)
    out = blocks.mean(axis=(-3, -1))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, s, axis=-2), s, axis=-1) / (s * s),)
    return _make(out, (t,), grad_fn)


def upsample_nearest(t, r: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if r < 1:
        raise ConfigError("upsample factor must be >= 1")
    t = as_tensor(t)
    if r == 1:
        return _make(t.data.copy(), (t,), lambda g: (g,))
    out = np.repeat(np.repeat(t.data, r, axis=-2), r, axis=-1)

    def grad_fn(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // r, r, w // r, r).sum(axis=(-3, -1)),)
    return _make(out, (t,), grad_fn)


# ---------------------------------------------------------------------------
# init helpers


def uniform_init(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Uniform in +-sqrt(6 / fan_in); fan_in = product of all dims after the first."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def delta_kernel(c_out: int, c_in: int, k: int, n_spatial: int) -> np.ndarray:
    """Kernel passing input channel 0 to output channel 0 unchanged; zero elsewhere."""
    w = np.zeros((c_out, c_in) + (k,) * n_spatial)
    w[(0, 0) + ((k - 1) // 2,) * n_spatial] = 1.0
    return w
