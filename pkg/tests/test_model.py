import numpy as np
import pytest

from sbd import kernels
from sbd.model import (BlockLayout, DenoiserConfig, KVCache, build_block_mask,
                       build_two_stream_mask)

from conftest import philox, tiny_model


def test_block_mask_small_case():
    m = build_block_mask(4, 2)
    want = np.array([
        [1, 1, 0, 0],
        [1, 1, 0, 0],
        [1, 1, 1, 1],
        [1, 1, 1, 1],
    ], dtype=bool)
    assert np.array_equal(m, want)


def test_block_mask_degenerate_cases():
    causal = build_block_mask(5, 1)
    assert np.array_equal(causal, np.tril(np.ones((5, 5), dtype=bool)))
    assert build_block_mask(6, 6).all()


def test_block_mask_divisibility_error():
    with pytest.raises(ValueError):
        build_block_mask(6, 4)
    with pytest.raises(ValueError):
        BlockLayout(6, 0)


def test_two_stream_mask_rules():
    L, B = 2, 1
    m = build_two_stream_mask(L, B)
    # noisy pos 1 attends {noisy 1, clean 0}
    assert list(np.flatnonzero(m[1])) == [1, 2]
    # clean stream never attends noisy
    assert not m[L:, :L].any()


def test_two_stream_full_block_is_mdlm():
    L = 4
    m = build_two_stream_mask(L, L)
    assert m[:L, :L].all()          # noisy fully bidirectional over itself
    assert not m[:L, L:].any()      # and blind to the clean stream


def test_cache_equivalence_bitwise():
    model = tiny_model(seed=1)
    L, B = 12, 4
    rng = philox(7)
    toks = rng.integers(0, model.config.vocab_size + 1, size=L)
    full = model.forward(toks, build_block_mask(L, B)).data
    cache = KVCache(model)
    parts = []
    for b in range(L // B):
        seg = toks[b * B:(b + 1) * B]
        parts.append(model.forward_cached(cache, seg, B))
        cache.push_pending(seg)
    assert np.array_equal(full, np.concatenate(parts))


def test_cache_equivalence_every_prefix():
    # cache-mode forward of block b given cache of blocks < b, for every b
    model = tiny_model(seed=2, L=8)
    L, B = 8, 2
    rng = philox(8)
    toks = rng.integers(0, 5, size=L)
    full = model.forward(toks, build_block_mask(L, B)).data
    for b in range(L // B):
        cache = KVCache(model)
        cache.push_pending(toks[: b * B])
        got = model.forward_cached(cache, toks[b * B:(b + 1) * B], B)
        assert np.array_equal(got, full[b * B:(b + 1) * B])


def test_future_block_independence():
    model = tiny_model(seed=3)
    L, B = 12, 4
    rng = philox(9)
    toks = rng.integers(0, 5, size=L)
    base = model.forward(toks, build_block_mask(L, B)).data
    toks2 = toks.copy()
    toks2[9] = (toks2[9] + 2) % 5
    out = model.forward(toks2, build_block_mask(L, B)).data
    assert np.array_equal(base[:8], out[:8])
    assert not np.array_equal(base[8:], out[8:])


def test_fresh_model_all_mask_smoke():
    model = tiny_model(seed=4)
    L = 12
    toks = np.full(L, model.config.mask_id)
    logits = model.forward(toks, build_block_mask(L, 4)).data
    assert np.isfinite(logits).all()
    p = kernels.row_softmax(logits)
    assert np.abs(p.sum(-1) - 1.0).max() < 1e-6


def test_capacity_error():
    model = tiny_model(seed=5, L=8)
    cache = KVCache(model)
    cache.push_pending(np.zeros(8, dtype=np.int64))
    with pytest.raises(ValueError):
        model.forward_cached(cache, [0, 1], 2)


def test_token_range_error():
    model = tiny_model(seed=6)
    with pytest.raises(ValueError):
        model.forward(np.array([0, 99]), build_block_mask(2, 1))


def test_config_invariants():
    with pytest.raises(ValueError):
        DenoiserConfig(vocab_size=4, max_len=8, d_model=10, n_heads=4)


def test_forward_batch_matches_single():
    model = tiny_model(seed=7)
    L, B = 8, 4
    rng = philox(10)
    toks = rng.integers(0, 5, size=(3, L))
    mask = build_block_mask(L, B)
    batched = model.forward(toks, mask).data
    for i in range(3):
        single = model.forward(toks[i], mask).data
        assert np.array_equal(batched[i], single)
