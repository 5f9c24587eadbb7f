"""Independent oracles used by the verification suite and `oracle-check`.

Everything here is deliberately written the slow, obvious way and must stay
decoupled from the implementation paths it checks.
"""

import math

import numpy as np


def naive_matmul(a, b):
    """Triple-loop matrix product in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for kk in range(k):
                s += a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


def fd_gradient(loss_fn, store, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. every scalar in store.

    loss_fn must be a pure function of the current parameter values (fix any
    rng inside it). Parameters are restored exactly afterwards.
    Returns name -> gradient array (float64).
    """
    grads = {}
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def gradcheck(loss_fn, ad_grads, store, h=1e-5, denom_floor=1e-6):
    """Compare autodiff gradients against central differences.

    Returns (max_rel_err, per_name dict). Relative error per scalar is
    |ad - fd| / max(|ad|, |fd|, denom_floor). The floor covers gradients so
    small that central differences at this h carry more round-off noise
    (~1e-11 absolute at float64) than 1e-4 of the gradient itself.
    """
    fd = fd_gradient(loss_fn, store, h=h)
    worst = 0.0
    per_name = {}
    for name in store.names():
        a = np.asarray(ad_grads[name], dtype=np.float64)
        f = fd[name]
        rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), denom_floor)
        per_name[name] = float(rel.max())
        worst = max(worst, per_name[name])
    return worst, per_name


def adam_scalar_reference(g_seq, lr, b1, b2, eps, weight_decay=0.0, p0=0.0):
    """Closed-form scalar AdamW recursion, one update per gradient in g_seq."""
    m = v = 0.0
    p = p0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * p)
    return p


# --- direct samplers the structural machinery must degenerate to ----------

def reference_mdlm_sample(model, length, rng, temperature=1.0, nucleus_p=0.9,
                          steps=None):
    """Plain full-sequence masked-diffusion sampling: every forward sees the
    whole sequence under an all-true mask; ceil(remaining/steps_left)
    positions commit per step."""
    from .model import build_block_mask
    from .sampler import filtered_categorical, masked_probs

    mask_id = model.config.mask_id
    x = np.full(length, mask_id, dtype=np.int64)
    conf = np.full(length, np.nan)
    steps = steps if steps is not None else length
    mask = build_block_mask(length, length)
    masked = list(range(length))
    for step in range(steps):
        if not masked:
            break
        quota = math.ceil(len(masked) / (steps - step))
        logits = model.forward(x, mask).data
        probs = masked_probs(logits, mask_id, temperature)
        if quota >= len(masked):
            commit = np.array(masked)
        else:
            commit = np.sort(rng.choice(masked, size=quota, replace=False))
        for pos in commit:
            tok, c = filtered_categorical(rng, probs[pos], nucleus_p)
            x[pos] = tok
            conf[pos] = c
        masked = [i for i in masked if i not in set(int(p) for p in commit)]
    return x, conf


def reference_ar_sample(model, length, rng, temperature=1.0, nucleus_p=0.9):
    """Left-to-right sampling with a causal mask, querying through MASK at
    the next position each step."""
    from .model import build_block_mask_prefix
    from .sampler import filtered_categorical, masked_probs

    mask_id = model.config.mask_id
    out = []
    conf = []
    for i in range(length):
        toks = np.array(out + [mask_id], dtype=np.int64)
        logits = model.forward(toks, build_block_mask_prefix(i + 1, 1)).data
        probs = masked_probs(logits[i: i + 1], mask_id, temperature)[0]
        tok, c = filtered_categorical(rng, probs, nucleus_p)
        out.append(tok)
        conf.append(c)
    return np.array(out, dtype=np.int64), np.array(conf)


# --- mock denoisers and the exact trajectory enumerator --------------------

class MockDenoiser:
    """Denoiser stand-in driven by a pure distribution function.

    probs_fn(prefix_tokens, block_tokens) -> [len(block), n_classes] rows of
    probabilities (MASK column zero). Use with cache_enabled=False so the
    sampler's cache carries tokens for the prefix.
    """

    def __init__(self, probs_fn, vocab_size, max_len):
        from .model import DenoiserConfig
        self.config = DenoiserConfig(vocab_size=vocab_size, max_len=max_len,
                                     n_layers=1, n_heads=1, d_model=4)
        self.dtype = np.dtype(np.float64)
        self.probs_fn = probs_fn
        self.nfe_count = 0

    def _logits(self, prefix, block):
        p = np.asarray(self.probs_fn(list(prefix), list(block)), dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.log(p)

    def forward_cached(self, cache, seg_tokens, block_size):
        self.nfe_count += 1
        return self._logits(cache.tokens, seg_tokens)

    def forward(self, tokens, mask, positions=None, want_kv=False):
        from . import tensor as T
        self.nfe_count += 1
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            return T.Tensor(self._logits([], tokens))
        return T.Tensor(np.stack([self._logits([], row) for row in tokens]))


def uniform_mock(vocab_size, max_len):
    def fn(prefix, block):
        p = np.zeros((len(block), vocab_size + 1))
        p[:, :vocab_size] = 1.0 / vocab_size
        return p
    return MockDenoiser(fn, vocab_size, max_len)


def one_hot_mock(target, vocab_size, max_len):
    """Emits probability 1 on target[i] at absolute position i (modulo the
    target length, so the duplicated two-stream layout works too)."""
    target = np.asarray(target)

    def fn(prefix, block):
        p = np.zeros((len(block), vocab_size + 1))
        for j in range(len(block)):
            p[j, target[(len(prefix) + j) % len(target)]] = 1.0
        return p
    return MockDenoiser(fn, vocab_size, max_len)


def _nucleus(p, nucleus_p):
    """Independent nucleus math: smallest stable-sorted top set with mass >=
    nucleus_p, renormalized into a full-size vector."""
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    total = 0.0
    kept = []
    for i in order:
        kept.append(i)
        total += p[i]
        if total >= nucleus_p:
            break
    out = np.zeros(len(p))
    for i in kept:
        out[i] = p[i] / total
    return out


def enumerate_stage1(probs_fn, length, block_size, vocab_size,
                     nucleus_p=0.9, steps_per_block=None):
    """Exact single-stage (ancestral policy, temperature 1) output
    distribution.

    Walks every (commit subset, value assignment) trajectory with its exact
    probability: subsets of size ceil(m/r) are uniform over the masked set;
    values follow the nucleus-filtered rows. Returns {sequence: prob}.
    """
    from itertools import combinations, product

    def enum_block(prefix):
        results = {}

        def rec(block, masked, steps_left, prob):
            if not masked:
                results[tuple(block)] = results.get(tuple(block), 0.0) + prob
                return
            q = math.ceil(len(masked) / steps_left)
            rows = np.asarray(probs_fn(prefix, block))
            filt = {pos: _nucleus(rows[pos], nucleus_p) for pos in masked}
            subsets = list(combinations(sorted(masked), q)) if q < len(masked) \
                else [tuple(sorted(masked))]
            w_subset = 1.0 / len(subsets)
            for S in subsets:
                choices = [
                    [(v, filt[pos][v]) for v in range(vocab_size)
                     if filt[pos][v] > 0.0]
                    for pos in S
                ]
                for combo in product(*choices):
                    nb = list(block)
                    pv = prob * w_subset
                    for pos, (v, pvv) in zip(S, combo):
                        nb[pos] = v
                        pv *= pvv
                    rec(nb, masked - set(S), steps_left - 1, pv)

        mask_id = vocab_size
        init = [mask_id] * block_size
        T0 = steps_per_block if steps_per_block is not None else block_size
        rec(init, set(range(block_size)), T0, 1.0)
        return results

    dist = {(): 1.0}
    for b in range(length // block_size):
        new = {}
        for prefix, p0 in dist.items():
            for block, pb in enum_block(list(prefix)).items():
                key = prefix + block
                new[key] = new.get(key, 0.0) + p0 * pb
        dist = new
    return dist


def total_variation(dist_a, dist_b):
    keys = set(dist_a) | set(dist_b)
    return 0.5 * sum(abs(dist_a.get(k, 0.0) - dist_b.get(k, 0.0)) for k in keys)
