"""Dense tensors with reverse-mode automatic differentiation on a tape.

A Tensor wraps a numpy array (row-major, float32 by default, float64 for
gradient-check work). Operations are pure functions of their inputs; when a
Tape is active they append one record each, and replaying the tape in
reverse order propagates gradients. A tape is rebuilt per forward pass and
is confined to a single thread; tensors themselves are treated as immutable
values once created.

Only the ops the detector needs exist here: conv2d, maxpool2d,
fully_connected, softmax, gather, reshape, log, sums, and the elementwise
activations. Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import activations as A
from .errors import UsageError


class Tensor:
    """Immutable-by-convention dense array node. `name` marks parameters."""

    __slots__ = ("data", "name")

    def __init__(self, data, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.asarray(data).dtype.kind == "f":
            arr = np.asarray(data)  # numpy float input keeps its precision
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise UsageError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"

    # -- operator sugar used by the loss assembly ------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tsum(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# tape machinery

class Tape:
    """Ordered record of executed ops; reverse replay computes gradients."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self._records.append((out, inputs, backward))

    def __len__(self):
        return len(self._records)


_TAPES: list[Tape] = []


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap raw output data in a Tensor, recording the op if a tape is live.

    `backward(grad_out)` must return one gradient array (or None) per input.
    This is the extension hook custom differentiable ops go through.
    """
    out = Tensor(out_data)
    if _TAPES:
        _TAPES[-1].record(out, tuple(inputs), backward)
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Accumulate d(loss)/d(input) for everything the tape touched.

    Returns a map keyed by tensor identity. When `params` is given, the map
    holds exactly those tensors, with zero gradients for any the loss never
    reached.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, bwd in reversed(tape._records):
        g_out = grads.get(id(out))
        if g_out is None:
            continue
        in_grads = bwd(g_out)
        for t, g in zip(inputs, in_grads):
            if g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t
    if params is None:
        return {holders[k]: Tensor(g) for k, g in grads.items() if k != id(loss)}
    out_map: dict[Tensor, Tensor] = {}
    for p in params:
        g = grads.get(id(p))
        out_map[p] = Tensor(g if g is not None else np.zeros_like(p.data))
    return out_map


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Tensor) -> Tensor:
    return record_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tsum(a: Tensor) -> Tensor:
    return record_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record_op(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False),),
    )


def log(a: Tensor) -> Tensor:
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def reshape(a: Tensor, shape) -> Tensor:
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def gather(a: Tensor, flat_indices) -> Tensor:
    """Pick elements of the flattened tensor; backward scatters into zeros."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    flat = a.data.reshape(-1)

    def bwd(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, idx, g)
        return (gx.reshape(a.shape),)

    return record_op(flat[idx], (a,), bwd)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _elementwise(a: Tensor, fwd, deriv) -> Tensor:
    return record_op(fwd(a.data), (a,), lambda g: (deriv(a.data) * g,))


def relu(a: Tensor) -> Tensor:
    return _elementwise(a, A.relu, A.relu_grad)


def mish(a: Tensor) -> Tensor:
    return _elementwise(a, A.mish, A.mish_grad)


def sigmoid(a: Tensor) -> Tensor:
    out_data = A.sigmoid(a.data)
    return record_op(out_data, (a,), lambda g: (out_data * (1.0 - out_data) * g,))


def softplus(a: Tensor) -> Tensor:
    return _elementwise(a, A.softplus, A.sigmoid)


def activation(a: Tensor, kind: A.ActivationKind) -> Tensor:
    if kind is A.ActivationKind.MISH:
        return mish(a)
    if kind is A.ActivationKind.RELU:
        return relu(a)
    return a


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record_op(y, (a,), bwd)


# ---------------------------------------------------------------------------
# structured ops: fully connected, conv2d, maxpool2d

def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x[N,D] @ w[D,O] + b[O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise UsageError(f"fully_connected dimension mismatch: x{tuple(x.shape)} w{tuple(w.shape)}")
    if b.shape != (w.shape[1],):
        raise UsageError(f"fully_connected bias shape {tuple(b.shape)} != ({w.shape[1]},)")
    out_data = x.data @ w.data + b.data

    def bwd(g):
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    return record_op(out_data, (x, w, b), bwd)


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather (N, C, kh, kw, OH, OW) windows out of the padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[N,C,H,W] with w[K,C,kh,kw], add b[K].

    Output spatial extent is floor((H + 2p - kh)/stride) + 1 per axis.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise UsageError("conv2d expects x[N,C,H,W] and w[K,C,kh,kw]")
    n, c, h, wid = x.shape
    k, ck, kh, kw = w.shape
    if ck != c:
        raise UsageError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise UsageError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wid + 2 * padding}")
    if b.shape != (k,):
        raise UsageError(f"conv2d bias shape {tuple(b.shape)} != ({k},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _conv_cols(xp, kh, kw, stride, oh, ow)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(k, c * kh * kw)
    out = (w2 @ cols2).reshape(n, k, oh, ow) + b.data.reshape(1, k, 1, 1)

    def bwd(g):
        g2 = g.reshape(n, k, oh * ow)
        dw = np.einsum("nkp,ncp->kc", g2, cols2).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = (w2.T @ g2).reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + wid] if padding else dxp
        return (dx, dw, db)

    return record_op(out, (x, w, b), bwd)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over window x window patches; gradient flows to the first maximal
    element of each window in row-major order (deterministic tie rule)."""
    if x.data.ndim != 4:
        raise UsageError("maxpool2d expects x[N,C,H,W]")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise UsageError(f"maxpool2d window {window} exceeds spatial extent {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    vals = np.empty((n, c, oh, ow, window * window), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            vals[:, :, :, :, i * window + j] = x.data[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    arg = vals.argmax(axis=-1)
    out = np.take_along_axis(vals, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                m = arg == i * window + j
                view = dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                view += np.where(m, g, 0)
        return (dx,)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, step: float = 1e-5,
                               indices: Sequence[int] | None = None) -> Tensor:
    """Central-difference gradient estimate of a scalar function of x.

    Perturbs every element (or just `indices`, leaving the rest zero) by
    +/- step; intended for float64 inputs where the truncation and rounding
    errors are both far below test tolerances.
    """
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    idx_iter = range(flat.size) if indices is None else indices
    for i in idx_iter:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(base.copy()))
        flat[i] = orig - step
        fm = f(Tensor(base.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad)
