"""Small reverse-mode autodiff over numpy arrays.

Only the operations the NeRV decoder, its losses and the quantizers need are
provided. Every op builds its output through :func:`_make`, which records the
parents and a closure mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily change the dtype used for tensors built from Python data."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterable[None]:
    """Evaluate without recording the graph (inference / frozen teachers)."""
    old = _get("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def check_finite() -> Iterable[None]:
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    old = _get("check_finite", False)
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = old


class MultCounter:
    """Accumulates multiplications performed by :func:`conv2d` calls."""

    def __init__(self) -> None:
        self.records: list[tuple[tuple[int, int], int, int, int, int]] = []

    def add(self, hw, c_out, c_in, k):
        self.records.append((hw, c_out, c_in, k, hw[0] * hw[1] * c_out * k * k * c_in))

    @property
    def total(self) -> int:
        return sum(r[-1] for r in self.records)


@contextlib.contextmanager
def count_mults() -> Iterable[MultCounter]:
    counter = MultCounter()
    old = _get("counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = old


class Tensor:
    """Dense array node. ``grad`` is filled in by :func:`backward`."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- conveniences -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

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

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def abs(self):
        return tabs(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _get("check_finite", False) and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out.op = op
    if _get("grad_enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def tabs(a: Tensor) -> Tensor:
    # subgradient sign(0) == 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tsum(a: Tensor) -> Tensor:
    return _make(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype), (a,), bw, "mean")


def mean_axes(a: Tensor, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    n = int(np.prod([a.shape[i] for i in axes]))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw, "mean_axes")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    data = np.stack([t.data for t in tensors])

    def bw(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(data, tuple(tensors), bw, "stack")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def straight_through(a: Tensor, value: np.ndarray, op: str = "straight_through") -> Tensor:
    """Forward ``value`` exactly; backward passes the gradient to ``a`` unchanged."""
    if value.shape != a.shape:
        raise ConfigurationError(f"straight_through: value shape {value.shape} != {a.shape}")
    return _make(np.asarray(value, dtype=a.dtype), (a,), lambda g: (g,), op)


# -- activations --------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU, evaluated as x * sigmoid(2 * inner)."""
    x = a.data
    dt = x.dtype.type
    # 0.5 * (1 + tanh(z)) == 1 / (1 + exp(-2z)); exp is much cheaper than tanh here
    s = x * x
    s *= dt(0.044715)
    s += dt(1.0)
    s *= x
    s *= dt(-2.0 * _GELU_C)
    with np.errstate(over="ignore"):
        np.exp(s, out=s)
    s += dt(1.0)
    np.reciprocal(s, out=s)
    out = x * s

    def bw(g):
        # d/dx = s + 2 x s (1 - s) c (1 + 3 * 0.044715 x^2)
        d = x * x
        d *= dt(3.0 * 0.044715)
        d += dt(1.0)
        d *= dt(2.0 * _GELU_C)
        d *= x
        d *= s
        d *= dt(1.0) - s
        d += s
        d *= g
        return (d,)

    return _make(out, (a,), bw, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- layers -------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x W^T + b`` with ``x`` of shape [n] or [N, n] and ``W`` of shape [m, n]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g[None] if squeeze else g
        gx = g2 @ weight.data
        gw = g2.T @ xd
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "linear")


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ConfigurationError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding for k in {1, 3}."""
    xd, squeeze = _as_batch(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ConfigurationError(f"conv2d: bad weight shape {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k not in (1, 3):
        raise ConfigurationError(f"conv2d: kernel size {k} not supported (1 or 3)")
    if xd.shape[1] != c_in:
        raise ConfigurationError(f"conv2d: input has {xd.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d: bias {bias.shape} does not match {c_out} outputs")
    n, _, h, w = xd.shape
    counter = _get("counter", None)
    if counter is not None:
        for _ in range(n):
            counter.add((h, w), c_out, c_in, k)

    wmat = weight.data.reshape(c_out, c_in * k * k)
    if k == 1:
        cols = xd.reshape(n, c_in, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((n, c_in, 3, 3, h, w), dtype=xd.dtype)
        for ky in range(3):
            for kx in range(3):
                cols[:, :, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w]
        cols = cols.reshape(n, c_in * 9, h * w)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, h, w)

    def bw(g):
        g = g.reshape(n, c_out, h * w)
        gw = np.zeros_like(wmat)
        for i in range(n):
            gw += g[i] @ cols[i].T
        gcols = np.matmul(wmat.T, g)
        if k == 1:
            gx = gcols.reshape(n, c_in, h, w)
        else:
            gcols = gcols.reshape(n, c_in, 3, 3, h, w)
            gxp = np.zeros((n, c_in, h + 2, w + 2), dtype=xd.dtype)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky : ky + h, kx : kx + w] += gcols[:, :, ky, kx]
            gx = gxp[:, :, 1:-1, 1:-1]
        grads = [gx[0] if squeeze else gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv2d")


def _shuffle(d: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = d.shape
    co = c // (s * s)
    return d.reshape(n, co, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * s, w * s)


def _unshuffle(d: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = d.shape
    return d.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, c * s * s, h // s, w // s
    )


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange [C*s*s, H, W] into [C, H*s, W*s]; out[c, h*s+i, w*s+j] = in[c*s*s+i*s+j, h, w]."""
    xd, squeeze = _as_batch(x)
    if s < 1 or xd.shape[1] % (s * s):
        raise ConfigurationError(f"pixel_shuffle: {xd.shape[1]} channels not divisible by {s}^2")
    out = _shuffle(xd, s)

    def bw(g):
        gx = _unshuffle(g[None] if squeeze else g, s)
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    xd, squeeze = _as_batch(x)
    if s < 1 or xd.shape[2] % s or xd.shape[3] % s:
        raise ConfigurationError(f"pixel_unshuffle: spatial size {xd.shape[2:]} not divisible by {s}")
    out = _unshuffle(xd, s)

    def bw(g):
        gx = _shuffle(g[None] if squeeze else g, s)
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (x,), bw, "pixel_unshuffle")


def separable_filter(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ img @ cols.T`` to every [H, W] plane of ``x``.

    Any fixed separable linear filter (blurs with reflect padding, valid-mode
    windows) is expressed this way by building the two banded matrices.
    """
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def bw(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _make(out, (x,), bw, "separable_filter")


# -- graph traversal -------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``params`` is given, returns their gradients in order, zero-filled for
    parameters the loss does not depend on.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg.astype(parent.dtype, copy=False) if prev is None else prev + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype) for p in params]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite differences ----------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, index, eps: float = 1e-5) -> float:
    """Five-point central difference of scalar ``fn()`` w.r.t. ``param.data[index]``."""
    orig = param.data[index].copy()
    vals = []
    for k in (2, 1, -1, -2):
        param.data[index] = orig + k * eps
        with no_grad():
            vals.append(float(fn().data))
    param.data[index] = orig
    f2, f1, fm1, fm2 = vals
    return (-f2 + 8.0 * f1 - 8.0 * fm1 + fm2) / (12.0 * eps)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``|analytic - central| / max(|central|, 1e-6)`` over checked elements.

    The floor keeps round-off in a finite difference of an exactly-zero
    derivative (around 1e-11 for O(1) losses) from reading as a large
    relative error.

    Parameters should hold float64 data. With ``samples`` set, only that many
    randomly chosen elements per parameter are perturbed.
    """
    for p in params:
        p.grad = None
    loss = fn()
    grads = backward(loss, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = np.arange(p.size)
        if samples is not None and samples < p.size:
            flat = rng.choice(p.size, size=samples, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), p.shape)
            num = numerical_grad(fn, p, idx, eps)
            err = abs(float(g[idx]) - num) / max(abs(num), 1e-6)
            worst = max(worst, err)
    return worst
