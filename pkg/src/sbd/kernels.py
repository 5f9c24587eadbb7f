"""Fixed-order numeric kernels.

Every reduction here accumulates sequentially over the reduction axis
(ascending index), and every transcendental is evaluated per element through
libm. This makes each output row a pure function of its own inputs,
independent of how many other rows are in the array — which is what the
incremental-attention-cache equivalence guarantees rely on. Do not replace
these with BLAS/ufunc calls: those pick different accumulation orders and
SIMD tail paths depending on array shape.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _mm3(a, b, out):
    B, m, k = a.shape
    n = b.shape[2]
    for bi in range(B):
        for i in range(m):
            for kk in range(k):
                s = a[bi, i, kk]
                for j in range(n):
                    out[bi, i, j] += s * b[bi, kk, j]


def mm3(a, b):
    """Batched matmul [B,m,k] @ [B,k,n] with sequential-k accumulation."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    _mm3(a, b, out)
    return out


def mm2(a, b):
    """Matmul [m,k] @ [k,n] with sequential-k accumulation."""
    return mm3(a[None], b[None])[0]


@njit(cache=True)
def _row_softmax(x, out):
    R, C = x.shape
    for i in range(R):
        mx = x[i, 0]
        for j in range(1, C):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(C):
            e = math.exp(float(x[i, j] - mx))
            out[i, j] = e
            s += e
        for j in range(C):
            out[i, j] = out[i, j] / s
    return out


def row_softmax(x):
    """Softmax over the last axis, sequential max/sum per row.

    Rows of all -inf are the caller's bug; at least one finite entry is
    assumed (attention masks always allow the diagonal).
    """
    x = np.ascontiguousarray(x)
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    out = np.empty_like(x2)
    _row_softmax(x2, out)
    return out.reshape(shape)


@njit(cache=True)
def _layer_norm_rows(x, gamma, beta, eps, y, mean, rstd):
    R, D = x.shape
    for i in range(R):
        s = 0.0
        for d in range(D):
            s += x[i, d]
        mu = s / D
        v = 0.0
        for d in range(D):
            dx = x[i, d] - mu
            v += dx * dx
        var = v / D
        r = 1.0 / math.sqrt(float(var) + eps)
        mean[i] = mu
        rstd[i] = r
        for d in range(D):
            y[i, d] = (x[i, d] - mu) * r * gamma[d] + beta[d]


def layer_norm_rows(x, gamma, beta, eps):
    """Row-wise layer norm; returns (y, mean, rstd) for the backward pass."""
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    mean = np.empty(x.shape[0], dtype=x.dtype)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layer_norm_rows(x, gamma, beta, x.dtype.type(eps), y, mean, rstd)
    return y, mean, rstd


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(cache=True)
def _gelu(x, out):
    n = x.shape[0]
    for i in range(n):
        v = float(x[i])
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))


@njit(cache=True)
def _gelu_grad(x, out):
    n = x.shape[0]
    for i in range(n):
        v = float(x[i])
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        out[i] = cdf + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)


def gelu(x):
    """Exact (erf) GELU, elementwise through libm."""
    x = np.ascontiguousarray(x)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    _gelu(flat, out)
    return out.reshape(x.shape)


def gelu_grad(x):
    """d gelu / dx, elementwise."""
    x = np.ascontiguousarray(x)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    _gelu_grad(flat, out)
    return out.reshape(x.shape)


def warmup(dtype=np.float32):
    """Compile all kernels for a dtype so timings/tests don't pay JIT cost."""
    one = np.ones((1, 2, 2), dtype=dtype)
    mm3(one, one)
    row_softmax(one[0])
    layer_norm_rows(one[0], one[0, 0], one[0, 0], 1e-5)
    gelu(one)
    gelu_grad(one)
