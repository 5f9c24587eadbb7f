"""Dense tensors with reverse-mode autodiff on a define-by-run tape.

Forward numerics route through the fixed-order kernels; backward closures use
plain numpy (gradients are never compared bit-wise across call shapes, only
against finite differences at tolerance).
"""

import itertools

import numpy as np

from . import kernels

_uid = itertools.count()
_ACTIVE_TAPE = None


class Tensor:
    """A dense array plus identity for gradient bookkeeping.

    Treat the wrapped array as immutable once the tensor has been produced by
    an op; parameters are rebound between steps, not edited mid-tape.
    """

    __slots__ = ("data", "uid", "tracked")

    def __init__(self, data, tracked=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.uid = next(_uid)
        self.tracked = tracked

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of ops; backward traverses in exact reverse order."""

    def __init__(self):
        self._records = []  # (out_uid, fn(grad_out) -> [(in_uid, grad_in)])
        self._produced = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out, fn):
        self._records.append((out.uid, fn))
        self._produced.add(out.uid)


def _track(out, inputs, fn):
    """Record fn on the active tape when any input is tracked."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    if any(isinstance(t, Tensor) and t.tracked for t in inputs):
        out.tracked = True
        tape._record(out, fn)
    return out


def backward(loss, tape):
    """Run reverse-mode accumulation from a scalar loss.

    Returns a dict mapping tensor uid -> gradient array. Values that never
    appear on the tape simply have no entry (their gradient is zero).
    """
    if loss.uid not in tape._produced:
        raise ValueError("loss was not produced under this tape")
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")
    grads = {loss.uid: np.ones((), dtype=loss.data.dtype)}
    for out_uid, fn in reversed(tape._records):
        g = grads.get(out_uid)
        if g is None:
            continue
        for in_uid, gin in fn(g):
            acc = grads.get(in_uid)
            if acc is None:
                grads[in_uid] = gin
            else:
                grads[in_uid] = acc + gin
    return grads


def grad_of(grads, tensor):
    """Gradient for a tensor under the given backward result; zero if absent."""
    g = grads.get(tensor.uid)
    if g is None:
        return np.zeros_like(tensor.data)
    return g


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    bdat = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype)
    out = Tensor(a.data + bdat)

    def fn(g):
        outs = [(a.uid, _unbroadcast(g, a.data.shape))]
        if isinstance(b, Tensor):
            outs.append((b.uid, _unbroadcast(g, b.data.shape)))
        return outs

    return _track(out, (a, b), fn)


def mul(a, b):
    bdat = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype)
    adat = a.data
    out = Tensor(adat * bdat)

    def fn(g):
        outs = [(a.uid, _unbroadcast(g * bdat, adat.shape))]
        if isinstance(b, Tensor):
            outs.append((b.uid, _unbroadcast(g * adat, bdat.shape)))
        return outs

    return _track(out, (a, b), fn)


def matmul(a, b):
    """Matrix product, 2D [m,k]@[k,n] or batched 3D [B,m,k]@[B,k,n]."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == 2 and bd.ndim == 2:
        out = Tensor(kernels.mm2(ad, bd))

        def fn(g):
            return [
                (a.uid, kernels.mm2(g, np.ascontiguousarray(bd.T))),
                (b.uid, kernels.mm2(np.ascontiguousarray(ad.T), g)),
            ]

    elif ad.ndim == 3 and bd.ndim == 3:
        out = Tensor(kernels.mm3(ad, bd))

        def fn(g):
            return [
                (a.uid, kernels.mm3(g, np.ascontiguousarray(bd.transpose(0, 2, 1)))),
                (b.uid, kernels.mm3(np.ascontiguousarray(ad.transpose(0, 2, 1)), g)),
            ]

    else:
        raise ValueError(f"matmul supports 2D or 3D operands, got {ad.ndim}D/{bd.ndim}D")
    return _track(out, (a, b), fn)


def softmax(x, axis=-1):
    if axis not in (-1, x.data.ndim - 1):
        raise ValueError("softmax is implemented over the last axis")
    p = kernels.row_softmax(x.data)
    out = Tensor(p)

    def fn(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return [(x.uid, p * (g - dot))]

    return _track(out, (x,), fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise layer norm over the last axis of a 2D input."""
    y, mean, rstd = kernels.layer_norm_rows(x.data, gamma.data, beta.data, eps)
    out = Tensor(y)
    xd = x.data

    def fn(g):
        xhat = (xd - mean[:, None]) * rstd[:, None]
        gg = g * gamma.data[None, :]
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        dx = rstd[:, None] * (gg - m1 - xhat * m2)
        return [
            (x.uid, dx.astype(xd.dtype)),
            (gamma.uid, np.sum(g * xhat, axis=0).astype(xd.dtype)),
            (beta.uid, np.sum(g, axis=0).astype(xd.dtype)),
        ]

    return _track(out, (x, gamma, beta), fn)


def gelu(x):
    out = Tensor(kernels.gelu(x.data))

    def fn(g):
        return [(x.uid, g * kernels.gelu_grad(x.data))]

    return _track(out, (x,), fn)


def embedding(table, ids):
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return [(table.uid, gt)]

    return _track(out, (table,), fn)


def take_rows(x, idx):
    idx = np.asarray(idx)
    out = Tensor(x.data[idx])

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return [(x.uid, gx)]

    return _track(out, (x,), fn)


def reshape(x, shape):
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def fn(g):
        return [(x.uid, g.reshape(old))]

    return _track(out, (x,), fn)


def transpose(x, axes):
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def fn(g):
        return [(x.uid, np.ascontiguousarray(g.transpose(inv)))]

    return _track(out, (x,), fn)


def concat(a, b, axis):
    """Concatenate two tensors along an axis (exact copy, split backward)."""
    na = a.data.shape[axis]
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))

    def fn(g):
        ga, gb = np.split(g, [na], axis=axis)
        return [(a.uid, ga), (b.uid, gb)]

    return _track(out, (a, b), fn)


def cross_entropy(logits, targets, weights):
    """Weighted negative log-likelihood: sum_i w_i * (-log softmax(l_i)[t_i]).

    Positions with weight zero contribute nothing, so masked-only losses are
    expressed through the weight vector.
    """
    ld = logits.data
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=ld.dtype)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= ld.shape[-1]:
        raise IndexError("target id outside [0, n_classes)")
    m = ld.max(axis=-1)
    lse = m + np.log(np.sum(np.exp(ld - m[:, None]), axis=-1))
    nll = lse - ld[np.arange(ld.shape[0]), targets]
    out = Tensor(np.asarray((weights * nll).sum(), dtype=ld.dtype))

    def fn(g):
        p = kernels.row_softmax(ld)
        p[np.arange(ld.shape[0]), targets] -= 1.0
        return [(logits.uid, (g * weights[:, None] * p).astype(ld.dtype))]

    return _track(out, (logits,), fn)
