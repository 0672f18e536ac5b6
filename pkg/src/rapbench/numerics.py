"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is just large enough to express a small convolutional
region-proposal network and the attack losses on top of it, and to pull the
gradient of a scalar loss back to every watched leaf (in particular the input
image). Everything is 64-bit and deterministic: replaying the same tape twice
yields bitwise-identical gradients.

A tape and the tensors recorded on it belong to one thread. Independent tapes
may run concurrently in different threads; tensors used purely as constants
(e.g. frozen model parameters) are shared freely.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class TapeError(RuntimeError):
    """Invalid use of a tape (no active tape, cleared tape, bad root)."""


_LOCAL = threading.local()


def _stack() -> list:
    stack = getattr(_LOCAL, "tape_stack", None)
    if stack is None:
        stack = []
        _LOCAL.tape_stack = stack
    return stack


def active_tape():
    """The innermost tape opened in this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops, replayed in reverse by backward().

    Each node stores the ids of its recorded parents and a closure computing
    the vector-Jacobian product for each of them. clear() drops the record and
    permanently invalidates every node id handed out by this tape.
    """

    def __init__(self):
        self._nodes: list[tuple[tuple[int, ...], Callable | None]] = []
        self._leaves: dict[int, "Tensor"] = {}
        self._cleared = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes = []
        self._leaves = {}
        self._cleared = True

    def _record(self, parents: tuple[int, ...], vjp: Callable | None) -> int:
        if self._cleared:
            raise TapeError("tape was cleared; its node ids are invalid")
        self._nodes.append((parents, vjp))
        return len(self._nodes) - 1


class Tensor:
    """Immutable dense float64 array, optionally recorded on a tape.

    `node_id` is None for constants. Leaves (inputs we differentiate with
    respect to) are created with requires_grad=True under an active tape.
    """

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite("tensor", arr)
        self.values = arr
        self.tape = None
        self.node_id = None
        if requires_grad:
            tape = active_tape()
            if tape is None:
                raise TapeError("requires_grad=True needs an active tape")
            self.tape = tape
            self.node_id = tape._record((), None)
            tape._leaves[self.node_id] = self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = "const" if self.node_id is None else f"node {self.node_id}"
        return f"Tensor(shape={self.values.shape}, {tag})"


def constant(values) -> Tensor:
    return Tensor(values)


def leaf(values) -> Tensor:
    """A tensor registered as a differentiable input on the active tape."""
    return Tensor(values, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{op}: result contains non-finite values")


def _make(op: str, values: np.ndarray, parents: Sequence[Tensor],
          vjp: Callable | None) -> Tensor:
    """Wrap op output; record a node when any parent is tracked on the active tape.

    `vjp(grad_out)` must return one gradient array per *tracked* parent, in
    the order produced by `tracked` below.
    """
    _check_finite(op, values)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.tape = None
    out.node_id = None
    tape = active_tape()
    if tape is not None and vjp is not None:
        tracked = tuple(p.node_id for p in parents
                        if p.tape is tape and p.node_id is not None)
        if tracked:
            out.tape = tape
            out.node_id = tape._record(tracked, vjp)
    return out


def _is_tracked(t: Tensor) -> bool:
    return t.node_id is not None and t.tape is active_tape() and t.tape is not None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(op: str, x: Tensor, y: Tensor, values: np.ndarray,
            dx: Callable, dy: Callable) -> Tensor:
    grads = []
    if _is_tracked(x):
        grads.append(lambda g: _unbroadcast(dx(g), x.values.shape))
    if _is_tracked(y):
        grads.append(lambda g: _unbroadcast(dy(g), y.values.shape))
    if not grads:
        return _make(op, values, (), None)
    vjp = lambda g: tuple(fn(g) for fn in grads)  # noqa: E731
    return _make(op, values, (x, y), vjp)


def _require_compatible(op: str, x: Tensor, y: Tensor) -> None:
    try:
        np.broadcast_shapes(x.values.shape, y.values.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: incompatible shapes {x.values.shape} and {y.values.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _require_compatible("add", x, y)
    return _binary("add", x, y, x.values + y.values,
                   lambda g: g, lambda g: g)


def subtract(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _require_compatible("subtract", x, y)
    return _binary("subtract", x, y, x.values - y.values,
                   lambda g: g, lambda g: -g)


def multiply(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _require_compatible("multiply", x, y)
    xv, yv = x.values, y.values
    return _binary("multiply", x, y, xv * yv,
                   lambda g: g * yv, lambda g: g * xv)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    if not _is_tracked(x):
        return _make("scale", x.values * c, (), None)
    return _make("scale", x.values * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xv = x.values
    if not _is_tracked(x):
        return _make("square", xv * xv, (), None)
    return _make("square", xv * xv, (x,), lambda g: (g * (2.0 * xv),))


def log(x: Tensor) -> Tensor:
    xv = x.values
    if np.any(xv <= 0.0):
        raise ValueError("log: non-positive input rejected")
    if not _is_tracked(x):
        return _make("log", np.log(xv), (), None)
    return _make("log", np.log(xv), (x,), lambda g: (g / xv,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    if not _is_tracked(x):
        return _make("exp", out, (), None)
    return _make("exp", out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    xv = x.values
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not _is_tracked(x):
        return _make("sigmoid", out, (), None)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    xv = x.values
    out = np.maximum(xv, 0.0)
    if not _is_tracked(x):
        return _make("relu", out, (), None)
    mask = (xv > 0.0).astype(np.float64)
    return _make("relu", out, (x,), lambda g: (g * mask,))


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.values.sum())
    if not _is_tracked(x):
        return _make("sum", out, (), None)
    shape = x.values.shape
    return _make("sum", out, (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(
            f"reshape: cannot view {x.values.shape} as {shape}") from None
    if not _is_tracked(x):
        return _make("reshape", out, (), None)
    orig = x.values.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(orig),))


def masked_select(x: Tensor, mask) -> Tensor:
    """Select x[mask] as a 1-D tensor; mask is a constant 0/1 (or bool) array."""
    m = np.asarray(mask)
    if m.shape != x.values.shape:
        raise ShapeError(
            f"masked_select: mask shape {m.shape} != tensor shape {x.values.shape}")
    m = m.astype(bool)
    out = x.values[m]
    if not _is_tracked(x):
        return _make("masked_select", out, (), None)

    def vjp(g):
        full = np.zeros_like(x.values)
        full[m] = g
        return (full,)

    return _make("masked_select", out, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial primitives (HWC layout)

_CONV_IDX_CACHE: dict[tuple, tuple] = {}


def _conv_geometry(h, w, c, kh, kw, stride, pad):
    """Gather indices mapping a padded HWC image to an im2col patch matrix."""
    key = (h, w, c, kh, kw, stride, pad)
    hit = _CONV_IDX_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) with stride {stride}, pad {pad} "
            f"does not fit input ({h},{w})")
    rows = (np.arange(oh) * stride)[:, None] + np.arange(kh)[None, :]  # (oh,kh)
    cols = (np.arange(ow) * stride)[:, None] + np.arange(kw)[None, :]  # (ow,kw)
    # flat index into padded image of shape (hp, wp, c), row-major
    idx = (rows[:, None, :, None, None] * wp + cols[None, :, None, :, None]) * c \
        + np.arange(c)[None, None, None, None, :]
    idx = idx.reshape(oh * ow, kh * kw * c)
    out = (oh, ow, hp, wp, idx)
    _CONV_IDX_CACHE[key] = out
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of an HWC image with an HWIO kernel."""
    xv, kv = x.values, kernel.values
    if xv.ndim != 3 or kv.ndim != 4:
        raise ShapeError(
            f"conv2d: expected image (H,W,C) and kernel (KH,KW,Cin,Cout), "
            f"got {xv.shape} and {kv.shape}")
    h, w, c = xv.shape
    kh, kw, cin, cout = kv.shape
    if cin != c:
        raise ShapeError(
            f"conv2d: input channels {c} != kernel input channels {cin} "
            f"(image {xv.shape}, kernel {kv.shape})")
    oh, ow, hp, wp, idx = _conv_geometry(h, w, c, kh, kw, stride, padding)
    if padding:
        xp = np.pad(xv, ((padding, padding), (padding, padding), (0, 0)))
    else:
        xp = xv
    cols = xp.reshape(-1)[idx]                        # (oh*ow, kh*kw*c)
    kflat = kv.reshape(kh * kw * c, cout)
    out = (cols @ kflat).reshape(oh, ow, cout)

    track_x, track_k = _is_tracked(x), _is_tracked(kernel)
    if not (track_x or track_k):
        return _make("conv2d", out, (), None)

    def grad_x(gflat):
        gcols = gflat @ kflat.T                       # (oh*ow, kh*kw*c)
        flat = np.bincount(idx.reshape(-1), weights=gcols.reshape(-1),
                           minlength=hp * wp * c)
        gx = flat.reshape(hp, wp, c)
        if padding:
            gx = gx[padding:padding + h, padding:padding + w, :]
        return gx

    def vjp(g):
        gflat = g.reshape(oh * ow, cout)
        grads = []
        if track_x:
            grads.append(grad_x(gflat))
        if track_k:
            grads.append((cols.T @ gflat).reshape(kv.shape))
        return tuple(grads)

    return _make("conv2d", out, (x, kernel), vjp)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window×window max pooling over an HWC image."""
    xv = x.values
    if xv.ndim != 3:
        raise ShapeError(f"max_pool2d: expected (H,W,C), got {xv.shape}")
    h, w, c = xv.shape
    if h % window or w % window:
        raise ShapeError(
            f"max_pool2d: window {window} does not divide input ({h},{w})")
    oh, ow = h // window, w // window
    tiles = xv.reshape(oh, window, ow, window, c).transpose(0, 2, 4, 1, 3)
    tiles = tiles.reshape(oh, ow, c, window * window)
    arg = tiles.argmax(axis=3)                        # ties -> first occurrence
    out = np.take_along_axis(tiles, arg[..., None], axis=3)[..., 0]
    if not _is_tracked(x):
        return _make("max_pool2d", out, (), None)

    def vjp(g):
        gt = np.zeros((oh, ow, c, window * window))
        np.put_along_axis(gt, arg[..., None], g[..., None], axis=3)
        gt = gt.reshape(oh, ow, c, window, window).transpose(0, 3, 1, 4, 2)
        return (gt.reshape(h, w, c),)

    return _make("max_pool2d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# composite helpers built from primitives


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp by constant bounds; the interior keeps gradient 1, clipped points 0.

    The bounds mask is evaluated at the current values and treated as a
    constant, which matches the almost-everywhere derivative of clipping.
    """
    v = x.values
    inside = np.ones_like(v)
    edge = np.zeros_like(v)
    if lo is not None:
        below = v < lo
        inside[below] = 0.0
        edge[below] = lo
    if hi is not None:
        above = v > hi
        inside[above] = 0.0
        edge[above] = hi
    return add(multiply(x, Tensor(inside)), Tensor(edge))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(root: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar root for every leaf of its tape.

    Returns a map from each leaf tensor to a constant gradient tensor of the
    leaf's shape (zeros when the root does not depend on the leaf). Exact for
    the recorded graph; accumulation order is fixed, so results are bitwise
    reproducible.
    """
    if root.values.shape != ():
        raise TapeError(
            f"backward: root must be scalar, got shape {root.values.shape}")
    tape = root.tape
    if tape is None:
        raise TapeError("backward: root is a constant (not recorded on a tape)")
    if tape._cleared:
        raise TapeError("backward: tape was cleared")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones(())}
    for nid in range(root.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        parents, vjp = tape._nodes[nid]
        if vjp is None:
            grads[nid] = g  # leaf: keep for the result map
            continue
        for pid, pg in zip(parents, vjp(g)):
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    result = {}
    for nid, tensor in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(tensor.values)
        result[tensor] = Tensor(np.broadcast_to(g, tensor.values.shape).copy())
    return result


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Max relative error between tape gradients of f and central differences.

    f maps a tensor to a scalar tensor and must be evaluable at x ± step along
    every coordinate. Error per coordinate is
    |analytic − central| / max(1, |analytic|).
    """
    x = np.asarray(x, dtype=np.float64)
    with Tape():
        xt = leaf(x)
        y = f(xt)
        analytic = backward(y)[xt].values
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = f(Tensor((flat + bump).reshape(x.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x.shape))).item()
        numeric = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
