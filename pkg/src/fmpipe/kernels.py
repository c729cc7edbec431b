"""Hot numeric kernels with two interchangeable lanes.

Every kernel here has a pure-numpy implementation and a numba ``@njit``
twin. The active lane is chosen once at import time from the
``FMPIPE_KERNELS`` environment variable (``"numba"`` or ``"numpy"``); when
unset, numba is used if it imports, numpy otherwise. ``set_backend`` swaps
lanes at runtime for benchmarking and tests.

Matrix products are deliberately *not* reimplemented: numpy's BLAS-backed
``matmul`` outperforms a jitted loop at every size this toolkit touches.
The kernels below are the bandwidth-bound elementwise/reduction loops where
fusing the temporaries actually pays.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import ConfigurationError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy lane
# ---------------------------------------------------------------------------

def _layernorm_fwd_np(x, gain, shift, eps):
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    var = np.mean(centered * centered, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd[:, None]
    return xhat * gain + shift, xhat, rstd


def _layernorm_bwd_np(dy, xhat, rstd, gain):
    dgain = np.sum(dy * xhat, axis=0)
    dshift = np.sum(dy, axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1)
    m2 = np.mean(dxhat * xhat, axis=1)
    dx = rstd[:, None] * (dxhat - m1[:, None] - xhat * m2[:, None])
    return dx, dgain, dshift


def _softmax_fwd_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(y, dy):
    inner = np.sum(dy * y, axis=1, keepdims=True)
    return y * (dy - inner)


def _gelu_fwd_np(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_bwd_np(x, dy):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _adam_update_np(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bc1
    vhat = v / bc2
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def _sq_dists_np(queries, points):
    diff = queries[:, None, :] - points[None, :, :]
    return np.sum(diff * diff, axis=2)


def _knn_predict_np(dists, labels, k, n_classes):
    # stable argsort keeps the lower training index first on distance ties
    order = np.argsort(dists, axis=1, kind="stable")[:, :k]
    votes = labels[order]
    preds = np.empty(dists.shape[0], dtype=np.int64)
    for i in range(dists.shape[0]):
        counts = np.bincount(votes[i], minlength=n_classes)
        preds[i] = np.argmax(counts)  # first max: lowest label id wins ties
    return preds


_NUMPY_IMPLS = {
    "layernorm_fwd": _layernorm_fwd_np,
    "layernorm_bwd": _layernorm_bwd_np,
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
    "adam_update": _adam_update_np,
    "sq_dists": _sq_dists_np,
    "knn_predict": _knn_predict_np,
}


# ---------------------------------------------------------------------------
# numba lane
# ---------------------------------------------------------------------------

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True)
    def _layernorm_fwd_nb(x, gain, shift, eps):
        rows, width = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mean = 0.0
            for e in range(width):
                mean += x[r, e]
            mean /= width
            var = 0.0
            for e in range(width):
                d = x[r, e] - mean
                var += d * d
            var /= width
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for e in range(width):
                h = (x[r, e] - mean) * rs
                xhat[r, e] = h
                y[r, e] = h * gain[e] + shift[e]
        return y, xhat, rstd

    @njit(cache=True)
    def _layernorm_bwd_nb(dy, xhat, rstd, gain):
        rows, width = dy.shape
        dx = np.empty_like(dy)
        dgain = np.zeros(width)
        dshift = np.zeros(width)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for e in range(width):
                g = dy[r, e] * gain[e]
                m1 += g
                m2 += g * xhat[r, e]
                dgain[e] += dy[r, e] * xhat[r, e]
                dshift[e] += dy[r, e]
            m1 /= width
            m2 /= width
            rs = rstd[r]
            for e in range(width):
                dx[r, e] = rs * (dy[r, e] * gain[e] - m1 - xhat[r, e] * m2)
        return dx, dgain, dshift

    @njit(cache=True)
    def _softmax_fwd_nb(x):
        rows, width = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            hi = x[r, 0]
            for e in range(1, width):
                if x[r, e] > hi:
                    hi = x[r, e]
            total = 0.0
            for e in range(width):
                v = math.exp(x[r, e] - hi)
                y[r, e] = v
                total += v
            for e in range(width):
                y[r, e] /= total
        return y

    @njit(cache=True)
    def _softmax_bwd_nb(y, dy):
        rows, width = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            inner = 0.0
            for e in range(width):
                inner += dy[r, e] * y[r, e]
            for e in range(width):
                dx[r, e] = y[r, e] * (dy[r, e] - inner)
        return dx

    @njit(cache=True)
    def _gelu_fwd_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            u = _GELU_C * (v + _GELU_A * v * v * v)
            out[i] = 0.5 * v * (1.0 + math.tanh(u))
        return out.reshape(x.shape)

    @njit(cache=True)
    def _gelu_bwd_nb(x, dy):
        flat = x.ravel()
        dflat = dy.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            v2 = v * v
            u = _GELU_C * (v + _GELU_A * v * v2)
            t = math.tanh(u)
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
            out[i] = dflat[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _adam_update_nb(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(param.size):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            param[i] -= lr * mhat / (math.sqrt(vhat) + eps)

    @njit(cache=True)
    def _sq_dists_nb(queries, points):
        m, width = queries.shape
        n = points.shape[0]
        out = np.empty((m, n))
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for f in range(width):
                    d = queries[i, f] - points[j, f]
                    acc += d * d
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _knn_predict_nb(dists, labels, k, n_classes):
        m, n = dists.shape
        preds = np.empty(m, dtype=np.int64)
        counts = np.empty(n_classes, dtype=np.int64)
        taken = np.empty(n, dtype=np.bool_)
        for i in range(m):
            taken[:] = False
            counts[:] = 0
            for _ in range(k):
                best = -1
                best_d = np.inf
                for t in range(n):
                    # strict < plus ascending scan: lower index wins ties
                    if not taken[t] and dists[i, t] < best_d:
                        best_d = dists[i, t]
                        best = t
                taken[best] = True
                counts[labels[best]] += 1
            winner = 0
            for c in range(1, n_classes):
                if counts[c] > counts[winner]:
                    winner = c
            preds[i] = winner
        return preds

    _NUMBA_IMPLS = {
        "layernorm_fwd": _layernorm_fwd_nb,
        "layernorm_bwd": _layernorm_bwd_nb,
        "softmax_fwd": _softmax_fwd_nb,
        "softmax_bwd": _softmax_bwd_nb,
        "gelu_fwd": _gelu_fwd_nb,
        "gelu_bwd": _gelu_bwd_nb,
        "adam_update": _adam_update_nb,
        "sq_dists": _sq_dists_nb,
        "knn_predict": _knn_predict_nb,
    }
else:
    _NUMBA_IMPLS = None


# ---------------------------------------------------------------------------
# lane selection
# ---------------------------------------------------------------------------

_impl: dict = {}
_backend = ""


def available_backends() -> tuple[str, ...]:
    return ("numpy", "numba") if _HAVE_NUMBA else ("numpy",)


def active_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Select the kernel lane: "numba" or "numpy"."""
    global _backend
    if name == "numpy":
        _impl.clear()
        _impl.update(_NUMPY_IMPLS)
    elif name == "numba":
        if not _HAVE_NUMBA:
            raise ConfigurationError(
                "kernel backend 'numba' requested but numba is not importable"
            )
        _impl.clear()
        _impl.update(_NUMBA_IMPLS)
    else:
        raise ConfigurationError(
            f"unknown kernel backend {name!r}; expected 'numba' or 'numpy'"
        )
    _backend = name


_env = os.environ.get("FMPIPE_KERNELS", "").strip().lower()
if _env:
    set_backend(_env)
else:
    set_backend("numba" if _HAVE_NUMBA else "numpy")


# Call-through wrappers so the active lane can be swapped at runtime.

def layernorm_fwd(x, gain, shift, eps):
    return _impl["layernorm_fwd"](x, gain, shift, eps)


def layernorm_bwd(dy, xhat, rstd, gain):
    return _impl["layernorm_bwd"](dy, xhat, rstd, gain)


def softmax_fwd(x):
    return _impl["softmax_fwd"](x)


def softmax_bwd(y, dy):
    return _impl["softmax_bwd"](y, dy)


def gelu_fwd(x):
    return _impl["gelu_fwd"](x)


def gelu_bwd(x, dy):
    return _impl["gelu_bwd"](x, dy)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    _impl["adam_update"](param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)


def sq_dists(queries, points):
    return _impl["sq_dists"](queries, points)


def knn_predict(dists, labels, k, n_classes):
    return _impl["knn_predict"](dists, labels, k, n_classes)


def warmup() -> None:
    """Trigger JIT compilation of every kernel in the active lane."""
    x = np.arange(8.0).reshape(2, 4) / 7.0
    ones = np.ones(4)
    zeros = np.zeros(4)
    y, xhat, rstd = layernorm_fwd(x, ones, zeros, 1e-5)
    layernorm_bwd(y, xhat, rstd, ones)
    s = softmax_fwd(x)
    softmax_bwd(s, x)
    gelu_bwd(x, gelu_fwd(x))
    p = np.ones(4)
    adam_update(p, p.copy(), np.zeros(4), np.zeros(4), 0.1, 0.9, 0.999, 1e-8, 0.1, 0.001)
    d = sq_dists(x, x)
    knn_predict(d, np.array([0, 1], dtype=np.int64), 1, 2)
