"""Named parameter store and a decoupled-weight-decay Adam step."""

import numpy as np

from .tensor import Tensor, grad_of

# Conventional defaults; the run config records whatever is actually used.
DEFAULT_LR = 3e-4
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_WARMUP_STEPS = 100


class ParamStore:
    """name -> parameter Tensor, plus per-parameter Adam state."""

    def __init__(self):
        self.params = {}   # name -> Tensor
        self._m = {}
        self._v = {}
        self.step_count = 0

    def add(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(array), tracked=True)
        self.params[name] = t
        # moments kept in float64 so the update math is precision-independent
        self._m[name] = np.zeros(t.data.shape, dtype=np.float64)
        self._v[name] = np.zeros(t.data.shape, dtype=np.float64)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params.keys())

    def n_scalars(self):
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self):
        """Flat view for checkpointing: name -> array (params only)."""
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays):
        for name, arr in arrays.items():
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch loading {name}")
            t.data = arr.astype(t.data.dtype)

    def rebind(self):
        """Fresh Tensor identities for all parameters (call once per step,
        before building the next tape, so updated values get new uids)."""
        for name, t in self.params.items():
            self.params[name] = Tensor(t.data, tracked=True)


def adamw_step(store, grads, lr=DEFAULT_LR, betas=DEFAULT_BETAS,
               eps=DEFAULT_EPS, weight_decay=DEFAULT_WEIGHT_DECAY):
    """One AdamW update over every parameter in the store.

    Parameters unreachable from the loss receive zero gradient and are only
    affected by weight decay.
    """
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = grad_of(grads, p).astype(np.float64)
        m = store._m[name]
        m *= b1
        m += (1.0 - b1) * g
        v = store._v[name]
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p.data = (p.data - lr * upd).astype(p.data.dtype)


def warmup_lr(step, base_lr, warmup_steps=DEFAULT_WARMUP_STEPS):
    """Linear warmup to base_lr, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * (step + 1) / warmup_steps
