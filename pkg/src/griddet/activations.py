"""Mish, softplus and ReLU forward functions and their analytic derivatives.

All functions accept a python float or a numpy array and return the same
kind; the tensor layer calls them directly on its buffers. Stateless and
thread-safe.
"""

from __future__ import annotations

import enum

import numpy as np


class ActivationKind(enum.Enum):
    MISH = "mish"
    RELU = "relu"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, name: str) -> "ActivationKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}; expected mish, relu or identity") from None


def _wrap(x):
    """Return (array view of x, converter back to the caller's type)."""
    arr = np.asarray(x)
    if arr.ndim == 0:
        return arr, float
    return arr, lambda a: a


def softplus(x):
    """ln(1 + e^x), piecewise-stable: x + ln(1+e^-x) above 20, e^x below -20."""
    arr, out = _wrap(x)
    hi = arr > 20.0
    lo = arr < -20.0
    mid = ~(hi | lo)
    r = np.empty_like(arr, dtype=arr.dtype if arr.dtype.kind == "f" else np.float64)
    r[hi] = arr[hi] + np.log1p(np.exp(-arr[hi]))
    r[lo] = np.exp(arr[lo])
    r[mid] = np.log1p(np.exp(arr[mid]))
    return out(r)


def sigmoid(x):
    """Logistic function, computed without overflow on either tail."""
    arr, out = _wrap(x)
    r = np.empty_like(arr, dtype=arr.dtype if arr.dtype.kind == "f" else np.float64)
    pos = arr >= 0
    r[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    r[~pos] = e / (1.0 + e)
    return out(r)


def sigmoid_grad(x):
    arr, out = _wrap(x)
    s = sigmoid(arr)
    return out(s * (1.0 - s))


def mish(x):
    """x * tanh(softplus(x)); unbounded above, bounded below near -0.3088."""
    arr, out = _wrap(x)
    return out(arr * np.tanh(softplus(arr)))


def mish_grad(x):
    """tanh(sp(x)) + x * sech^2(sp(x)) * sigmoid(x), sp = softplus."""
    arr, out = _wrap(x)
    sp = softplus(arr)
    t = np.tanh(sp)
    return out(t + arr * (1.0 - t * t) * sigmoid(arr))


def relu(x):
    arr, out = _wrap(x)
    return out(np.maximum(arr, 0))


def relu_grad(x):
    """Subgradient; 0 at the origin by convention."""
    arr, out = _wrap(x)
    return out((arr > 0).astype(arr.dtype if arr.dtype.kind == "f" else np.float64))


# forward/derivative pairs keyed by kind, used by the layer stack
TABLE = {
    ActivationKind.MISH: (mish, mish_grad),
    ActivationKind.RELU: (relu, relu_grad),
    ActivationKind.IDENTITY: (lambda x: x, lambda x: np.ones_like(np.asarray(x, dtype=float))),
}
