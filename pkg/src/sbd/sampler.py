"""Multi-stage draft-then-revise generation with snapshot-confidence remasking.

Stage 1 drafts the sequence block by block at a small block size; later
stages remask the lowest-confidence fraction and regenerate it under a larger
block size (a bigger bidirectional receptive field). Confidence is recorded
at the step each token is committed, not recomputed afterwards.

RNG discipline: one counter-based generator per run, consumed in order
stage -> block -> step -> position. The commit-position draw is skipped when
the quota covers every masked position, and value draws happen in ascending
position order; both facts are what the AR/MDLM degeneration tests and the
cache on/off equivalence rely on.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import KVCache, build_block_mask


@dataclass
class StageConfig:
    block_size: int
    gamma: float = None            # remask ratio; None for the first stage
    policy: str = "snapshot"       # snapshot | posthoc | random
    unmask: str = "ancestral"      # ancestral | confidence_topk
    steps_per_block: int = None    # None -> number of masked tokens in block
    temperature: float = 1.0
    nucleus_p: float = 0.9

    def __post_init__(self):
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus_p must be in (0, 1]")
        if self.policy not in ("snapshot", "posthoc", "random"):
            raise ValueError(f"unknown remask policy: {self.policy}")
        if self.unmask not in ("ancestral", "confidence_topk"):
            raise ValueError(f"unknown unmask policy: {self.unmask}")


@dataclass
class StagePlan:
    length: int
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise ValueError("plan needs at least one stage")
        sizes = [s.block_size for s in self.stages]
        if any(b >= a for a, b in zip(sizes[1:], sizes[:-1])):
            raise ValueError(f"block sizes must strictly increase: {sizes}")
        if sizes[-1] > self.length:
            raise ValueError("final block size exceeds sequence length")
        for s in self.stages:
            if self.length % s.block_size != 0:
                raise ValueError(
                    f"block size {s.block_size} does not divide length {self.length}")
        for k, s in enumerate(self.stages):
            if k > 0 and s.gamma is None:
                raise ValueError(f"stage {k + 1} needs a remask ratio")


class ConfidenceTrace:
    """Per-position snapshot confidence plus which stage last wrote it.

    Unset entries are NaN; every non-MASK position of the current sequence
    must have a set entry.
    """

    def __init__(self, length):
        self.values = np.full(length, np.nan)
        self.provenance = np.full(length, -1, dtype=np.int64)

    def set(self, idx, values, stage):
        self.values[idx] = values
        self.provenance[idx] = stage

    def unset(self, idx):
        self.values[idx] = np.nan
        self.provenance[idx] = -1

    def fully_set(self):
        return not np.isnan(self.values).any()

    def copy(self):
        t = ConfidenceTrace(len(self.values))
        t.values = self.values.copy()
        t.provenance = self.provenance.copy()
        return t


@dataclass
class DraftState:
    x: np.ndarray
    trace: ConfidenceTrace
    nfe_count: int = 0
    stage_idx: int = 0


def masked_probs(logits, mask_id, temperature):
    """Temperature-scaled softmax rows with the MASK class forbidden.

    These are the probabilities Eq.-5 confidences are read from: post
    temperature, before any nucleus truncation.
    """
    scaled = logits / logits.dtype.type(temperature)
    scaled = scaled.copy()
    scaled[..., mask_id] = -np.inf
    return kernels.row_softmax(scaled)


def filtered_categorical(rng, probs, nucleus_p):
    """Sample from the smallest top-probability set with mass >= nucleus_p.

    Ties sort stably (lower index first). Returns (token, confidence) where
    confidence is the pre-nucleus probability of the chosen token.
    """
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    k = min(int(np.searchsorted(csum, nucleus_p)), len(probs) - 1)
    kept = order[: k + 1]
    sel = probs[kept]
    cdf = np.cumsum(sel / sel.sum())
    u = rng.random()
    tok = int(kept[min(int(np.searchsorted(cdf, u, side="right")), k)])
    return tok, float(probs[tok])


def commit_quota(n_masked, steps_left):
    return math.ceil(n_masked / steps_left)


def choose_positions(rng, masked_idx, quota):
    """Uniform commit subset for the ancestral policy, ascending order.
    The draw is skipped entirely when the quota covers every candidate."""
    if quota >= len(masked_idx):
        return np.array(masked_idx)
    pick = rng.choice(masked_idx, size=quota, replace=False)
    return np.sort(pick)


def _choose_topk(masked_idx, quota, probs_rows):
    """Highest max-probability positions, stable ties to the lower index."""
    if quota >= len(masked_idx):
        return np.array(masked_idx)
    maxp = probs_rows.max(axis=-1)
    order = np.argsort(-maxp, kind="stable")[:quota]
    return np.sort(np.asarray(masked_idx)[order])


def sample_block(model, cache, x_block, block_size, cfg, rng, conf_block=None):
    """Iteratively denoise one block given the cache of all prior blocks.

    Performs T cache-mode forwards; each commits ceil(remaining/steps_left)
    positions. Pre-filled positions are immutable and keep their prior
    confidence. Returns (tokens, confidences, nfes); a fully pre-filled block
    costs zero forwards.
    """
    x_block = np.array(x_block)
    conf = np.array(conf_block) if conf_block is not None \
        else np.full(len(x_block), np.nan)
    mask_id = model.config.mask_id
    masked = [i for i in range(len(x_block)) if x_block[i] == mask_id]
    if not masked:
        return x_block, conf, 0
    steps = cfg.steps_per_block if cfg.steps_per_block is not None else len(masked)
    nfes = 0
    for step in range(steps):
        if not masked:
            break
        quota = commit_quota(len(masked), steps - step)
        logits = model.forward_cached(cache, x_block, block_size)
        nfes += 1
        probs = masked_probs(logits, mask_id, cfg.temperature)
        if cfg.unmask == "ancestral":
            commit = choose_positions(rng, masked, quota)
        else:
            commit = _choose_topk(masked, quota, probs[masked])
        for pos in commit:
            row = probs[pos]
            if cfg.unmask == "ancestral":
                tok, c = filtered_categorical(rng, row, cfg.nucleus_p)
            else:
                tok = int(np.argmax(row))   # ties: argmax takes the lower index
                c = float(row[tok])
            x_block[pos] = tok
            conf[pos] = c
        masked = [i for i in masked if i not in set(int(p) for p in commit)]
    if masked:
        raise RuntimeError("block not fully committed; quota schedule broken")
    return x_block, conf, nfes


def posthoc_confidence(model, x, block_size):
    """Re-score a finished sequence with one forward under the upcoming
    stage's block mask: s_i = model probability of x_i at position i."""
    x = np.asarray(x)
    if (x == model.config.mask_id).any():
        raise ValueError("post-hoc scoring requires a MASK-free sequence")
    logits = model.forward(x, build_block_mask(len(x), block_size))
    probs = masked_probs(logits.data, model.config.mask_id, 1.0)
    return probs[np.arange(len(x)), x]


def remask(x, trace, gamma, policy, mask_id, rng=None, model=None,
           next_block_size=None):
    """Reset the floor(gamma*L) least-trusted positions to MASK.

    snapshot: lowest snapshot-confidence entries, ties to the lower index.
    posthoc: confidences recomputed by posthoc_confidence, then the same
    selection. random: a uniform subset. Selected trace entries are unset.
    Returns (x_init, masked_indices ascending).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    x = np.array(x)
    if (x == mask_id).any():
        raise ValueError("remask input must be MASK-free")
    L = len(x)
    # epsilon guards float noise in gamma*L (1/3 * 3 -> 0.999...), not intent
    count = int(math.floor(gamma * L + 1e-9))
    if count == 0:
        return x, np.array([], dtype=np.int64)
    if policy == "snapshot":
        if not trace.fully_set():
            raise ValueError("snapshot remask needs a fully set trace")
        idx = np.argsort(trace.values, kind="stable")[:count]
    elif policy == "posthoc":
        conf = posthoc_confidence(model, x, next_block_size)
        idx = np.argsort(conf, kind="stable")[:count]
    elif policy == "random":
        idx = rng.choice(L, size=count, replace=False)
    else:
        raise ValueError(f"unknown remask policy: {policy}")
    idx = np.sort(idx.astype(np.int64))
    x[idx] = mask_id
    trace.unset(idx)
    return x, idx


def run_stage(model, state, cfg, rng, cache_enabled=True):
    """One full left-to-right pass at this stage's block size.

    Builds a fresh cache; finalized blocks are queued into it and their K/V
    materialize inside the next issued forward, so no separate cache-refresh
    forward is charged. Afterwards the sequence contains no MASK.
    """
    L = len(state.x)
    bs = cfg.block_size
    cache = KVCache(model, enabled=cache_enabled)
    nfes = 0
    block_masked = []
    for b in range(L // bs):
        blk = slice(b * bs, (b + 1) * bs)
        block_masked.append(int((state.x[blk] == model.config.mask_id).sum()))
        toks, conf, n = sample_block(
            model, cache, state.x[blk], bs, cfg, rng, state.trace.values[blk])
        new = np.isnan(state.trace.values[blk]) & ~np.isnan(conf)
        state.x[blk] = toks
        idx = np.arange(b * bs, (b + 1) * bs)[new]
        state.trace.set(idx, conf[new], state.stage_idx)
        cache.push_pending(toks)
        nfes += n
    state.nfe_count += nfes
    if (state.x == model.config.mask_id).any():
        raise RuntimeError("stage finished with MASK tokens remaining")
    return nfes, block_masked


def generate(model, plan, rng, cache_enabled=True):
    """Full Algorithm-1 run: draft at the smallest block size, then remask
    and refine at each larger one. Returns (x, trace, per-stage metrics)."""
    L = plan.length
    mask_id = model.config.mask_id
    state = DraftState(x=np.full(L, mask_id, dtype=np.int64),
                       trace=ConfidenceTrace(L))
    metrics = []
    for k, cfg in enumerate(plan.stages):
        state.stage_idx = k
        remask_nfes = 0
        masked_before = L if k == 0 else 0
        if k > 0:
            before = model.nfe_count
            state.x, idx = remask(
                state.x, state.trace, cfg.gamma, cfg.policy, mask_id,
                rng=rng, model=model, next_block_size=cfg.block_size)
            remask_nfes = model.nfe_count - before
            masked_before = len(idx)
        nfes, block_masked = run_stage(model, state, cfg, rng,
                                       cache_enabled=cache_enabled)
        metrics.append({
            "stage": k + 1,
            "block_size": cfg.block_size,
            "gamma": cfg.gamma,
            "masked_count": masked_before,
            "nfes": nfes,
            "remask_nfes": remask_nfes,
            "block_masked": block_masked,
            "steps_per_block": cfg.steps_per_block,
        })
    return state.x, state.trace, metrics
