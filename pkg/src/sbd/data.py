"""Corpus ingestion, batching, and Markov sources with exact ground truth."""

import struct
from dataclasses import dataclass, field

import numpy as np


class Vocab:
    """Bijective symbol<->id map; ids assigned by symbol sort order.

    The reserved MASK id equals the vocabulary size and never appears in
    encoded corpora.
    """

    def __init__(self, symbols):
        self.symbols = sorted(set(symbols))
        if not self.symbols:
            raise ValueError("empty symbol set")
        self._stoi = {s: i for i, s in enumerate(self.symbols)}

    @property
    def size(self):
        return len(self.symbols)

    @property
    def mask_id(self):
        return len(self.symbols)

    def encode(self, seq):
        unknown = sorted({s for s in seq if s not in self._stoi})
        if unknown:
            raise ValueError(f"symbols not in vocabulary: {unknown!r}")
        return np.array([self._stoi[s] for s in seq], dtype=np.int64)

    def decode(self, ids):
        ids = list(ids)
        bad = [i for i in ids if not 0 <= int(i) < self.size]
        if bad:
            raise ValueError(f"ids outside vocabulary (MASK or invalid): {bad[:8]}")
        out = [self.symbols[int(i)] for i in ids]
        if out and isinstance(out[0], (int, np.integer)):
            return bytes(out)
        return "".join(out)


def build_vocab(corpus, mode="char"):
    """Deterministic vocabulary over a text (char mode) or bytes (byte mode)
    corpus."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if mode == "char":
        text = corpus.decode("utf-8") if isinstance(corpus, bytes) else corpus
        return Vocab(text)
    if mode == "byte":
        data = corpus.encode("utf-8") if isinstance(corpus, str) else corpus
        return Vocab(data)
    raise ValueError(f"unknown vocab mode: {mode}")


def batch_iter(ids, seq_len, batch_size, seed):
    """Non-overlapping seq_len chunks, shuffled by seed; yields [batch, L]
    arrays. The trailing corpus remainder and any final partial batch are
    dropped."""
    ids = np.asarray(ids)
    n_chunks = len(ids) // seq_len
    if n_chunks == 0:
        raise ValueError(f"corpus of {len(ids)} ids shorter than seq_len {seq_len}")
    chunks = ids[: n_chunks * seq_len].reshape(n_chunks, seq_len)
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(n_chunks)
    for lo in range(0, n_chunks - batch_size + 1, batch_size):
        yield chunks[perm[lo: lo + batch_size]]


def epoch_stream(ids, seq_len, batch_size, seed):
    """Infinite training stream: reshuffled epochs with seeds derived from
    (seed, epoch)."""
    epoch = 0
    while True:
        sub = np.random.SeedSequence([seed, epoch]).generate_state(1)[0]
        yield from batch_iter(ids, seq_len, batch_size, int(sub))
        epoch += 1


def sequence_stream(sequences, batch_size, seed):
    """Infinite stream over pre-cut [n, L] sequences (e.g. Markov samples),
    reshuffled per epoch with (seed, epoch)-derived permutations."""
    sequences = np.asarray(sequences)
    n = len(sequences)
    if n < batch_size:
        raise ValueError(f"{n} sequences cannot fill a batch of {batch_size}")
    epoch = 0
    while True:
        sub = np.random.SeedSequence([seed, epoch]).generate_state(1)[0]
        perm = np.random.Generator(np.random.Philox(int(sub))).permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield sequences[perm[lo: lo + batch_size]]
        epoch += 1


@dataclass
class MarkovSpec:
    transition: np.ndarray
    init: np.ndarray = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition rows must be stochastic (sum 1 +- 1e-12)")
        if not _irreducible(P):
            raise ValueError("transition matrix is not irreducible")
        self.transition = P
        if self.init is None:
            self.init = stationary(P)
        else:
            self.init = np.asarray(self.init, dtype=np.float64)
            if abs(self.init.sum() - 1.0) > 1e-12:
                raise ValueError("initial distribution must sum to 1")

    @property
    def n_states(self):
        return self.transition.shape[0]


def _irreducible(P):
    n = P.shape[0]
    adj = P > 0
    reach = np.eye(n, dtype=bool)
    for _ in range(n):
        reach = reach | (reach @ adj)
    return bool(reach.all())


def stationary(P, tol=1e-12, max_iter=100000):
    """Stationary distribution by power iteration to the given tolerance."""
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ P
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise RuntimeError("power iteration did not converge")


def entropy_rate(spec):
    """h = -sum_s pi_s sum_s' P[s,s'] log P[s,s'] in nats (0 log 0 = 0)."""
    P = spec.transition
    pi = stationary(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(P), 0.0)
    return float(-(pi * plogp.sum(axis=1)).sum())


def gen_markov(spec, n_sequences, seq_len, rng):
    """Sample [n_sequences, seq_len] id arrays from the chain."""
    P = spec.transition
    cdf = np.cumsum(P, axis=1)
    init_cdf = np.cumsum(spec.init)
    out = np.empty((n_sequences, seq_len), dtype=np.int64)
    u0 = rng.random(n_sequences)
    out[:, 0] = np.searchsorted(init_cdf, u0, side="right").clip(max=spec.n_states - 1)
    for t in range(1, seq_len):
        u = rng.random(n_sequences)
        rows = cdf[out[:, t - 1]]
        out[:, t] = (rows < u[:, None]).sum(axis=1).clip(max=spec.n_states - 1)
    return out


def random_markov_spec(n_states, branching, seed):
    """Deterministic benchmark chain: each state transitions to `branching`
    successors (always including s+1 mod n, so the chain is irreducible)
    with geometrically decaying weights."""
    if branching < 1 or branching > n_states:
        raise ValueError("branching must be in [1, n_states]")
    rng = np.random.Generator(np.random.Philox(seed))
    P = np.zeros((n_states, n_states))
    weights = np.array([2.0 ** -k for k in range(branching)])
    weights /= weights.sum()
    for s in range(n_states):
        succ = [(s + 1) % n_states]
        others = [v for v in rng.permutation(n_states) if v not in succ]
        succ.extend(others[: branching - 1])
        for v, w in zip(succ, weights):
            P[s, v] = w
        P[s] /= P[s].sum()
    return MarkovSpec(P)


# --- file formats -----------------------------------------------------------

def write_markov_spec(path, spec):
    """Dimension line, then one row of transition probabilities per line."""
    with open(path, "w", encoding="ascii") as f:
        f.write(f"{spec.n_states}\n")
        for row in spec.transition:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_markov_spec(path):
    with open(path, encoding="ascii") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    n = int(lines[0])
    if len(lines) != n + 1:
        raise ValueError(f"expected {n} transition rows, found {len(lines) - 1}")
    P = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    return MarkovSpec(P)


_IDS_MAGIC = b"SBDI"
_IDS_VERSION = 1


def write_ids_cache(path, vocab_size, ids):
    """Binary id dump: magic, version, V, then little-endian 32-bit ids."""
    ids = np.asarray(ids, dtype="<u4")
    with open(path, "wb") as f:
        f.write(_IDS_MAGIC)
        f.write(struct.pack("<II", _IDS_VERSION, vocab_size))
        f.write(ids.tobytes())


def read_ids_cache(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _IDS_MAGIC:
            raise ValueError("not an id cache file")
        version, vocab_size = struct.unpack("<II", f.read(8))
        if version != _IDS_VERSION:
            raise ValueError(f"unsupported id cache version {version}")
        ids = np.frombuffer(f.read(), dtype="<u4").astype(np.int64)
    if len(ids) and ids.max() >= vocab_size:
        raise ValueError("id cache contains ids outside the vocabulary")
    return vocab_size, ids
