"""Tiny block-structured transformer denoiser with an incremental KV cache.

Attention is autoregressive across fixed-size blocks and bidirectional inside
each block. The same forward core serves three layouts: block-causal full
passes (sampling oracle / post-hoc scoring), the two-stream training pass,
and incremental cache-mode passes during generation. Cache-mode results are
bit-identical to full recomputation because every kernel reduction runs in a
fixed order (see kernels.py) and each row only ever attends a prefix of keys.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import ParamStore


@dataclass
class DenoiserConfig:
    vocab_size: int          # data symbols; MASK id == vocab_size
    max_len: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 1 or self.max_len < 1:
            raise ValueError("vocab_size and max_len must be positive")

    @property
    def mask_id(self):
        return self.vocab_size

    @property
    def n_classes(self):
        return self.vocab_size + 1

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size, "max_len": self.max_len,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_model": self.d_model,
        }


@dataclass
class BlockLayout:
    length: int
    block_size: int

    def __post_init__(self):
        if not (1 <= self.block_size <= self.length):
            raise ValueError("block size must be in [1, length]")
        if self.length % self.block_size != 0:
            raise ValueError(
                f"block size {self.block_size} does not divide length {self.length}")

    @property
    def n_blocks(self):
        return self.length // self.block_size


def block_ids(length, block_size):
    return np.arange(length) // block_size


def build_block_mask(length, block_size):
    """allow(i, j) iff block(j) <= block(i): causal across blocks,
    bidirectional within a block."""
    BlockLayout(length, block_size)
    b = block_ids(length, block_size)
    return b[None, :] <= b[:, None]


def build_two_stream_mask(length, block_size):
    """Single-pass training mask over [noisy stream | clean stream].

    Noisy position i sees its own noisy block plus strictly earlier clean
    blocks; clean position i sees clean blocks up to its own. The loss reads
    only the noisy rows.
    """
    BlockLayout(length, block_size)
    b = block_ids(length, block_size)
    m = np.zeros((2 * length, 2 * length), dtype=bool)
    same = b[None, :] == b[:, None]
    before = b[None, :] < b[:, None]
    m[:length, :length] = same
    m[:length, length:] = before
    m[length:, length:] = before | same
    return m


def mask_to_bias(mask, dtype):
    bias = np.zeros(mask.shape, dtype=dtype)
    bias[~mask] = -np.inf
    return bias


class KVCache:
    """Per-layer keys/values for finalized positions of one generation stage.

    Finalized tokens are queued in `pending` and materialized into K/V as
    extra rows of the next forward, so cache maintenance never costs a
    separate model call. With enabled=False the cache keeps tokens only and
    every call recomputes the full prefix (the equivalence oracle).
    """

    def __init__(self, model, enabled=True):
        self.enabled = enabled
        self.n_cached = 0
        self.pending = []
        self.tokens = []  # disabled mode: all finalized tokens
        dt = model.dtype
        H, dh = model.config.n_heads, model.config.head_dim
        self.layers = [
            (np.zeros((H, 0, dh), dtype=dt), np.zeros((H, 0, dh), dtype=dt))
            for _ in range(model.config.n_layers)
        ]

    @property
    def covered(self):
        """Number of finalized positions this cache accounts for."""
        if self.enabled:
            return self.n_cached + len(self.pending)
        return len(self.tokens)

    def push_pending(self, tokens):
        if self.enabled:
            self.pending.extend(int(t) for t in tokens)
        else:
            self.tokens.extend(int(t) for t in tokens)

    def _append(self, layer_kv):
        n_new = layer_kv[0][0].shape[1]
        self.layers = [
            (np.concatenate([k0, k1], axis=1), np.concatenate([v0, v1], axis=1))
            for (k0, v0), (k1, v1) in zip(self.layers, layer_kv)
        ]
        self.n_cached += n_new
        self.pending = []


class DenoiserModel:
    """p(token | noisy block, clean earlier blocks) over V+1 classes.

    No timestep input: the number of MASK tokens in context carries the noise
    level. Pre-norm blocks, GELU MLP at 4x width, learned absolute positions
    shared by every block size.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.nfe_count = 0
        rng = np.random.Generator(np.random.Philox(seed))
        d, C, L = config.d_model, config.n_classes, config.max_len

        def w(name, *shape, std=0.02):
            return self.params.add(
                name, (rng.standard_normal(shape) * std).astype(self.dtype))

        def zeros(name, *shape):
            return self.params.add(name, np.zeros(shape, dtype=self.dtype))

        def ones(name, *shape):
            return self.params.add(name, np.ones(shape, dtype=self.dtype))

        w("tok_emb", C, d)
        w("pos_emb", L, d)
        for l in range(config.n_layers):
            p = f"layer{l}."
            ones(p + "ln1.g", d); zeros(p + "ln1.b", d)
            w(p + "wq", d, d); zeros(p + "bq", d)
            w(p + "wk", d, d); zeros(p + "bk", d)
            w(p + "wv", d, d); zeros(p + "bv", d)
            w(p + "wo", d, d); zeros(p + "bo", d)
            ones(p + "ln2.g", d); zeros(p + "ln2.b", d)
            w(p + "w1", d, 4 * d); zeros(p + "b1", 4 * d)
            w(p + "w2", 4 * d, d); zeros(p + "b2", d)
        ones("lnf.g", d); zeros("lnf.b", d)
        w("head.w", d, C); zeros("head.b", C)

    def _p(self, name):
        return self.params[name]

    def forward(self, tokens, mask, positions=None, want_kv=False):
        """Full forward over a [n] or [B, n] token array.

        mask is a boolean [n, n] attention matrix. Returns logits with the
        input's batch shape; with want_kv also per-layer (K, V) slabs
        (single-sequence input only).
        """
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        toks = tokens[None] if squeeze else tokens
        n = toks.shape[1]
        if positions is None:
            positions = np.arange(n)
        if mask.shape != (n, n):
            raise ValueError(f"mask shape {mask.shape} does not match length {n}")
        if want_kv and toks.shape[0] != 1:
            raise ValueError("want_kv requires a single sequence")
        bias = mask_to_bias(mask, self.dtype)
        logits, kv = self._core(toks, positions, bias, prefix_kv=None,
                                want_kv=want_kv)
        out = logits if not squeeze else T.reshape(logits, (n, self.config.n_classes))
        if want_kv:
            return out, kv
        return out

    def forward_cached(self, cache, seg_tokens, block_size):
        """Cache-mode forward of one block segment; returns numpy logits
        [len(seg_tokens), n_classes] and folds any pending finalized tokens
        into the cache. One call == one NFE regardless of width."""
        seg_tokens = [int(t) for t in seg_tokens]
        if not cache.enabled:
            all_tokens = np.asarray(cache.tokens + seg_tokens)
            mask = build_block_mask_prefix(len(all_tokens), block_size)
            logits = self.forward(all_tokens, mask)
            return logits.data[len(cache.tokens):]
        pend = len(cache.pending)
        seg = np.asarray(cache.pending + seg_tokens)
        m = len(seg)
        c = cache.n_cached
        positions = np.arange(c, c + m)
        blk = positions // block_size
        allow_new = blk[None, :] <= blk[:, None]
        mask = np.concatenate(
            [np.ones((m, c), dtype=bool), allow_new], axis=1)
        bias = mask_to_bias(mask, self.dtype)
        logits, kv = self._core(seg[None], positions, bias,
                                prefix_kv=cache.layers, want_kv=pend > 0)
        if pend:
            cache._append([(k[:, :pend], v[:, :pend]) for k, v in kv])
        return logits.data.reshape(m, self.config.n_classes)[pend:]

    def _core(self, toks, positions, bias, prefix_kv, want_kv):
        cfg = self.config
        B, n = toks.shape
        if toks.min() < 0 or toks.max() > cfg.vocab_size:
            raise ValueError("token id outside [0, vocab_size]")
        if positions.max() >= cfg.max_len:
            raise ValueError(
                f"position {positions.max()} exceeds max_len {cfg.max_len}")
        self.nfe_count += 1
        d, H, dh, C = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.n_classes
        scale = self.dtype.type(1.0 / np.sqrt(dh))
        bias_t = bias[None]  # broadcast over B*H

        x = T.add(T.embedding(self._p("tok_emb"), toks),
                  T.embedding(self._p("pos_emb"), positions[None]))
        x = T.reshape(x, (B * n, d))
        kv_out = []
        for l in range(cfg.n_layers):
            p = f"layer{l}."
            h = T.layer_norm(x, self._p(p + "ln1.g"), self._p(p + "ln1.b"))

            def heads(t):
                t = T.reshape(t, (B, n, H, dh))
                t = T.transpose(t, (0, 2, 1, 3))
                return T.reshape(t, (B * H, n, dh))

            q = heads(T.add(T.matmul(h, self._p(p + "wq")), self._p(p + "bq")))
            k = heads(T.add(T.matmul(h, self._p(p + "wk")), self._p(p + "bk")))
            v = heads(T.add(T.matmul(h, self._p(p + "wv")), self._p(p + "bv")))
            if want_kv:
                kv_out.append((k.data.copy(), v.data.copy()))
            if prefix_kv is not None:
                k = T.concat(T.Tensor(prefix_kv[l][0]), k, axis=1)
                v = T.concat(T.Tensor(prefix_kv[l][1]), v, axis=1)
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), scale)
            probs = T.softmax(T.add(scores, bias_t), axis=-1)
            ctx = T.matmul(probs, v)
            ctx = T.reshape(ctx, (B, H, n, dh))
            ctx = T.transpose(ctx, (0, 2, 1, 3))
            ctx = T.reshape(ctx, (B * n, d))
            attn = T.add(T.matmul(ctx, self._p(p + "wo")), self._p(p + "bo"))
            x = T.add(x, attn)

            h2 = T.layer_norm(x, self._p(p + "ln2.g"), self._p(p + "ln2.b"))
            mid = T.gelu(T.add(T.matmul(h2, self._p(p + "w1")), self._p(p + "b1")))
            mlp = T.add(T.matmul(mid, self._p(p + "w2")), self._p(p + "b2"))
            x = T.add(x, mlp)

        x = T.layer_norm(x, self._p("lnf.g"), self._p("lnf.b"))
        logits = T.add(T.matmul(x, self._p("head.w")), self._p("head.b"))
        return T.reshape(logits, (B, n, C)), kv_out


def build_block_mask_prefix(length, block_size):
    """Block-causal mask for a sequence whose length need not be a multiple
    of block_size (full-recompute path mid-block)."""
    b = np.arange(length) // block_size
    return b[None, :] <= b[:, None]
