"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks that graph once in reverse
topological order.

Example
-------
>>> x = Tensor([[1.0, 2.0]], requires_grad=True)
>>> w = Tensor([[3.0], [4.0]], requires_grad=True)
>>> (x @ w).sum().backward()
>>> x.grad
array([[3., 4.]])
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import (
    DegenerateBatchError,
    DimensionError,
    GraphError,
    NonFiniteError,
    ParameterError,
)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

# Negative-control hook for the self-check battery: names listed here get a
# deliberately wrong backward rule.
_GRAD_FAULTS: set[str] = set()

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference, validation)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: BackwardFn | None = None, op: str = "leaf"):
        if _backward is None:
            arr = np.array(data, dtype=np.float64)
        else:
            arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- graph ---------------------------------------------------------
    def _topo(self) -> list["Tensor"]:
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t.

        Gradients add onto whatever is already stored, so a second call
        without resetting doubles them.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _backward=_noop, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _noop(g):  # placeholder so untracked op outputs skip the leaf copy
    return ()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "gelu": gelu, "softmax_lastdim": softmax, "softmax": softmax}[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}") from None
    return fn(x)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs a seeded generator")
    scale = 1.0 / (1.0 - rate)
    keep = (rng.random(x.shape) >= rate) * scale
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kh,kw]``, zero padded."""
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = (g2.T @ cols).reshape(kernel.shape)
        if "conv2d" in _GRAD_FAULTS:
            gk = gk * 1.01
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Window maximum; the gradient goes to the first maximum in row-major order."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ParameterError(f"maxpool2d needs window >= 1 and stride >= 1, got {window}, {stride}")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds spatial extent {h}x{w}")
    ho = conv_output_size(h, window, stride, 0)
    wo = conv_output_size(w, window, stride, 0)
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + arg // window
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + arg % window
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        gx = np.zeros_like(x.data)
        if stride >= window:
            gx[nn, cc, rows, cols] = g
        else:
            np.add.at(gx, (np.broadcast_to(nn, g.shape), np.broadcast_to(cc, g.shape), rows, cols), g)
        return (gx,)

    return _make(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``momentum * old + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm channel mismatch: input {x.shape}, gamma {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    g_b = gamma.data.reshape(bshape)
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"train-mode batchnorm needs N >= 2, got N={x.shape[0]}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * g_b + beta.data.reshape(bshape)
    count = x.data.size // x.shape[1]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * g_b
        if training:
            gx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batchnorm")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each position over the last axis."""
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm expects gamma/beta of shape ({d},), got {gamma.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = (inv_std / d) * (d * dxhat - dxhat.sum(-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def nll_of_probs(probs: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """``-mean(log(probs[i, labels[i]]))`` with probabilities clamped to ``[floor, 1]``."""
    n = probs.shape[0]
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clamped = np.clip(picked, floor, 1.0)
    loss = -np.log(clamped).mean()

    def backward(g):
        gp = np.zeros_like(probs.data)
        live = (picked >= floor) & (picked <= 1.0)
        gp[rows, labels] = np.where(live, -1.0 / (n * clamped), 0.0) * g
        return (gp,)

    return _make(np.asarray(loss), (probs,), backward, "nll")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                       coords: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``t.data``.

    ``coords`` restricts the probe to selected entries (others left at 0).
    """
    grad = np.zeros_like(t.data)
    targets = np.ndindex(t.shape) if coords is None else coords
    with no_grad():
        for idx in targets:
            orig = t.data[idx]
            t.data[idx] = orig + eps
            hi = f().item()
            t.data[idx] = orig - eps
            lo = f().item()
            t.data[idx] = orig
            grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the larger gradient's max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_check(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        worst = max(worst, relative_error(analytic, numerical_gradient(f, t, eps)))
    return worst
