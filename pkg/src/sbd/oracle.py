"""Runtime oracle suite behind the `oracle-check` command.

Each check returns (name, passed, measured) where measured is a short string
with the observed value against its tolerance. `corrupt_mask=True` damages
the block-mask rule fed to the full-forward side of the cache-equivalence
check — a mutation hook proving that check can actually fail.
"""

import numpy as np

from . import reference, tensor as T
from .kernels import row_softmax, warmup
from .model import (DenoiserConfig, DenoiserModel, KVCache, build_block_mask)
from .sampler import StageConfig, StagePlan, generate
from .training import NoiseSchedule, forward_mask, nelbo_loop, nelbo_two_stream


def _tiny_model(seed, dtype=np.float64, vocab=4, L=6):
    cfg = DenoiserConfig(vocab_size=vocab, max_len=L, n_layers=2, n_heads=2,
                         d_model=8)
    return DenoiserModel(cfg, seed=seed, dtype=dtype)


def check_matmul_oracle():
    rng = np.random.Generator(np.random.Philox(0))
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    err = float(np.abs(got - reference.naive_matmul(a, b)).max())
    return "matmul_vs_triple_loop", err < 1e-12, f"max abs err {err:.2e} (tol 1e-12)"


def check_softmax():
    p = row_softmax(np.array([[1000.0, 0.0]]))
    sat = abs(p[0, 0] - 1.0) < 1e-12 and p[0, 1] < 1e-12
    rng = np.random.Generator(np.random.Philox(1))
    x = rng.standard_normal((64, 9))
    q = row_softmax(x)
    sums = float(np.abs(q.sum(-1) - 1.0).max())
    ok = sat and sums < 1e-9 and (q >= 0).all()
    return "softmax_properties", ok, f"max |sum-1| {sums:.2e} (tol 1e-9)"


def check_gradient(seed=3):
    from .model import build_two_stream_mask
    m = _tiny_model(seed)
    L, Bk, V = 6, 2, 4
    rng = np.random.Generator(np.random.Philox(seed + 100))
    x = rng.integers(0, V, size=L)
    xt = x.copy()
    xt[rng.random(L) < 0.6] = m.config.mask_id
    toks = np.concatenate([xt, x])
    positions = np.concatenate([np.arange(L), np.arange(L)])
    mask = build_two_stream_mask(L, Bk)
    w = np.zeros(2 * L)
    w[:L][xt == m.config.mask_id] = 1.5
    targets = np.concatenate([x, x])

    def loss_fn():
        logits = m.forward(toks, mask, positions=positions)
        return float(T.cross_entropy(logits, targets, w).item())

    with T.Tape() as tape:
        loss = T.cross_entropy(m.forward(toks, mask, positions=positions),
                               targets, w)
    grads = T.backward(loss, tape)
    ad = {n: T.grad_of(grads, p) for n, p in m.params.params.items()}
    worst, _ = reference.gradcheck(loss_fn, ad, m.params)
    return "gradient_check", worst < 1e-4, f"worst rel err {worst:.2e} (tol 1e-4)"


def check_mask_marginals():
    sched = NoiseSchedule()
    rng = np.random.Generator(np.random.Philox(7))
    worst = 0.0
    ok = True
    for t in (0.1, 0.3, 0.7):
        x = np.zeros(100_000, dtype=np.int64)
        xt = forward_mask(x, t, rng, mask_id=1, schedule=sched)
        frac = float((xt == 1).mean())
        sigma = np.sqrt(t * (1 - t) / 100_000)
        dev = abs(frac - t)
        worst = max(worst, dev / sigma)
        ok = ok and dev <= 3 * sigma
    return "mask_marginals", ok, f"worst deviation {worst:.2f} sigma (tol 3)"


def check_cache_equivalence(corrupt_mask=False, seeds=(0, 1, 2)):
    """Full block-mask forward must bit-match iterated cache-mode forwards."""
    m = _tiny_model(11, dtype=np.float32, vocab=5, L=12)
    L, B = 12, 4
    ok = True
    for seed in seeds:
        rng = np.random.Generator(np.random.Philox(seed))
        toks = rng.integers(0, 6, size=L)
        mask = build_block_mask(L, B)
        if corrupt_mask:
            mask = mask.copy()
            mask[0, B] = True   # leak one future-block key into block 0
        full = m.forward(toks, mask).data
        cache = KVCache(m)
        parts = []
        for b in range(L // B):
            seg = toks[b * B:(b + 1) * B]
            parts.append(m.forward_cached(cache, seg, B))
            cache.push_pending(seg)
        ok = ok and np.array_equal(full, np.concatenate(parts))
    return "cache_equivalence", ok, f"bit-identical over {len(seeds)} seeds"


def check_degenerations():
    m = _tiny_model(2, dtype=np.float32, vocab=5, L=8)
    L = 8
    ok = True
    for seed in (3, 4):
        plan = StagePlan(L, [StageConfig(block_size=L)])
        xs, ts, _ = generate(m, plan, np.random.Generator(np.random.Philox(seed)))
        xr, cr = reference.reference_mdlm_sample(
            m, L, np.random.Generator(np.random.Philox(seed)))
        ok = ok and np.array_equal(xs, xr) and np.array_equal(ts.values, cr)
        plan = StagePlan(L, [StageConfig(block_size=1, steps_per_block=1)])
        xs, ts, _ = generate(m, plan, np.random.Generator(np.random.Philox(seed)))
        xr, cr = reference.reference_ar_sample(
            m, L, np.random.Generator(np.random.Philox(seed)))
        ok = ok and np.array_equal(xs, xr) and np.array_equal(ts.values, cr)
    return "degenerations_mdlm_ar", ok, "bit-identical over 2 seeds each"


def check_enumeration_tv(n_mc=20_000, tol=0.03):
    V, L, B = 3, 4, 2

    def probs_fn(prefix, block):
        p = np.zeros((len(block), V + 1))
        n_set = sum(1 for t in list(prefix) + list(block) if t != V)
        p[:, :V] = np.roll(np.array([0.5, 0.35, 0.15]), n_set % V)
        return p

    mock = reference.MockDenoiser(probs_fn, V, L)
    exact = reference.enumerate_stage1(probs_fn, L, B, V, nucleus_p=0.9)
    rng = np.random.Generator(np.random.Philox(99))
    plan = StagePlan(L, [StageConfig(block_size=B)])
    counts = {}
    for _ in range(n_mc):
        x, _, _ = generate(mock, plan, rng, cache_enabled=False)
        key = tuple(int(v) for v in x)
        counts[key] = counts.get(key, 0) + 1
    emp = {k: c / n_mc for k, c in counts.items()}
    tv = reference.total_variation(exact, emp)
    return "enumeration_tv", tv < tol, f"TV {tv:.4f} at {n_mc} runs (tol {tol})"


def check_two_stream_loop(n_cases=10):
    sched = NoiseSchedule()
    worst = 0.0
    for seed in range(n_cases):
        rng = np.random.Generator(np.random.Philox(seed))
        L = int(rng.choice([4, 6, 8]))
        Bk = int(rng.choice([b for b in (1, 2, 4) if L % b == 0]))
        m = _tiny_model(seed + 40, vocab=4, L=L)
        x = rng.integers(0, 4, size=L)
        t = sched.sample_t(rng)
        xt = forward_mask(x, t, rng, m.config.mask_id, sched)
        a = float(nelbo_two_stream(m, x[None], xt[None], [t], Bk, sched).item())
        b = float(nelbo_loop(m, x, xt, t, Bk, sched).item())
        worst = max(worst, abs(a - b))
    return "two_stream_vs_loop", worst < 1e-10, f"worst |diff| {worst:.2e} (tol 1e-10)"


def check_remask_selection():
    from .sampler import ConfidenceTrace, remask
    rng = np.random.Generator(np.random.Philox(5))
    ok = True
    for L in range(2, 9):
        for _ in range(20):
            vals = rng.choice([0.1, 0.2, 0.3, 0.5], size=L)  # force ties
            for count in range(L + 1):
                gamma = count / L
                trace = ConfidenceTrace(L)
                trace.set(np.arange(L), vals, 0)
                x = np.zeros(L, dtype=np.int64)
                _, idx = remask(x, trace, gamma, "snapshot", mask_id=9)
                oracle = [i for _, i in sorted((v, i) for i, v in enumerate(vals))]
                ok = ok and list(idx) == sorted(oracle[:count])
    return "remask_selection", ok, "exhaustive L<=8 vs sort oracle"


def run_all(corrupt_mask=False):
    warmup(np.float32)
    warmup(np.float64)
    checks = [
        check_matmul_oracle(),
        check_softmax(),
        check_gradient(),
        check_mask_marginals(),
        check_cache_equivalence(corrupt_mask=corrupt_mask),
        check_degenerations(),
        check_enumeration_tv(),
        check_two_stream_loop(),
        check_remask_selection(),
    ]
    return checks
