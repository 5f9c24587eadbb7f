"""Forward masking, block NELBO, and the mixed-scale training objective.

Losses are reported per token (masked cross-entropy scaled by the schedule
weight, divided by sequence length) and averaged over the batch. Randomness
is consumed in a documented order — per sequence: block-size draw (only when
the mixture is non-degenerate), then t, then the mask pattern — so the
lambda = 0 / 1 mixtures replay bit-identically against the pure objectives.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import build_block_mask, build_two_stream_mask
from .optim import adamw_step, warmup_lr


@dataclass
class NoiseSchedule:
    """Linear masking schedule: alpha(t) = 1 - t, loss weight 1/t.

    The Eq-style weight alpha'(t)/(1 - alpha(t)) is negative for a decreasing
    alpha; its magnitude is used as the positive CE weight (standard NELBO
    sign convention). t is clamped below at t_min so the weight stays finite.
    """

    t_min: float = 1e-3

    def alpha(self, t):
        return 1.0 - t

    def alpha_prime(self, t):
        return -1.0

    def weight(self, t):
        return -self.alpha_prime(t) / (1.0 - self.alpha(t))

    def sample_t(self, rng):
        return self.t_min + (1.0 - self.t_min) * rng.random()


@dataclass
class TrainConfig:
    seq_len: int
    block_draft: int = 4
    block_global: int = 0        # 0 -> seq_len
    lam: float = 0.1             # P(draw block_global) under the bimodal mix
    mix: str = "bimodal"         # bimodal | none | uniform
    batch_size: int = 16
    steps: int = 1000
    lr: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    ckpt_every: int = 0          # 0 -> only at the end

    def __post_init__(self):
        if self.block_global == 0:
            self.block_global = self.seq_len
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        for b in (self.block_draft, self.block_global):
            if self.seq_len % b != 0:
                raise ValueError(f"block size {b} does not divide seq_len {self.seq_len}")
        if self.mix not in ("bimodal", "none", "uniform"):
            raise ValueError(f"unknown mix mode: {self.mix}")

    def uniform_sizes(self):
        """Power-of-two block sizes from block_draft up to block_global that
        divide seq_len (the uniform-mixture ablation)."""
        sizes = []
        b = self.block_draft
        while b <= self.block_global:
            if self.seq_len % b == 0:
                sizes.append(b)
            b *= 2
        if self.block_global not in sizes:
            sizes.append(self.block_global)
        return sizes


def forward_mask(x, t, rng, mask_id, schedule=None):
    """Independently replace each position by MASK with probability
    1 - alpha(t). Consumes one uniform vector draw of len(x)."""
    schedule = schedule or NoiseSchedule()
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must be in [0, 1]")
    x = np.asarray(x)
    u = rng.random(x.shape[-1])
    xt = x.copy()
    xt[u < 1.0 - schedule.alpha(t)] = mask_id
    return xt


def sample_block_size(cfg, rng):
    """Draw a block size for one training sequence.

    bimodal: block_global with probability lam, else block_draft. The draw is
    skipped entirely when lam is 0 or 1, so degenerate mixtures consume the
    same rng stream as the pure objectives.
    """
    if cfg.mix == "none":
        return cfg.block_draft
    if cfg.mix == "uniform":
        sizes = cfg.uniform_sizes()
        return int(sizes[rng.integers(len(sizes))])
    if cfg.lam == 0.0:
        return cfg.block_draft
    if cfg.lam == 1.0:
        return cfg.block_global
    return cfg.block_global if rng.random() < cfg.lam else cfg.block_draft


def nelbo_two_stream(model, xs, xts, ts, block_size, schedule):
    """Vectorized NELBO for a group of sequences sharing one block size:
    a single forward over [noisy stream | clean stream], weighted CE on the
    masked noisy slots only. Returns the summed loss Tensor."""
    xs = np.asarray(xs)
    xts = np.asarray(xts)
    G, L = xs.shape
    ws = np.zeros((G, L), dtype=model.dtype)
    for g in range(G):
        w = schedule.weight(ts[g]) / L
        ws[g][xts[g] == model.config.mask_id] = w
    toks = np.concatenate([xts, xs], axis=1)
    positions = np.concatenate([np.arange(L), np.arange(L)])
    weights = np.concatenate([ws, np.zeros_like(ws)], axis=1).reshape(-1)
    targets = np.concatenate([xs, xs], axis=1).reshape(-1)
    logits = model.forward(toks, build_two_stream_mask(L, block_size),
                           positions=positions)
    flat = T.reshape(logits, (G * 2 * L, model.config.n_classes))
    return T.cross_entropy(flat, targets, weights)


def nelbo_loop(model, x, xt, t, block_size, schedule):
    """Reference NELBO path: one forward per block over clean prefix plus the
    noisy block. Slow; exists to pin down the two-stream layout."""
    x = np.asarray(x)
    xt = np.asarray(xt)
    L = x.shape[0]
    n_blocks = L // block_size
    w = schedule.weight(t) / L
    total = None
    for b in range(n_blocks):
        hi = (b + 1) * block_size
        toks = np.concatenate([x[: b * block_size], xt[b * block_size: hi]])
        logits = model.forward(toks, build_block_mask(hi, block_size))
        weights = np.zeros(hi, dtype=model.dtype)
        blk = slice(b * block_size, hi)
        weights[b * block_size:][xt[blk] == model.config.mask_id] = w
        part = T.cross_entropy(logits, x[:hi], weights)
        total = part if total is None else T.add(total, part)
    return total


def nelbo_loss(model, x, block_size, rng, schedule=None, path="two_stream"):
    """Per-token NELBO of one sequence: draw t and a mask, then weighted
    masked CE summed over blocks. Both evaluation paths are exposed."""
    schedule = schedule or NoiseSchedule()
    x = np.asarray(x)
    t = schedule.sample_t(rng)
    xt = forward_mask(x, t, rng, model.config.mask_id, schedule)
    if path == "two_stream":
        return nelbo_two_stream(model, x[None], xt[None], [t], block_size, schedule)
    if path == "loop":
        return nelbo_loop(model, x, xt, t, block_size, schedule)
    raise ValueError(f"unknown nelbo path: {path}")


def mixed_loss(model, batch, cfg, rng, schedule=None, return_draws=False):
    """Mixed-scale objective: per sequence draw a block size, then its NELBO;
    average over the batch. Sequences are grouped by drawn block size so each
    group shares one two-stream forward."""
    schedule = schedule or NoiseSchedule()
    batch = np.asarray(batch)
    B, L = batch.shape
    draws = []
    for i in range(B):
        bs = sample_block_size(cfg, rng)
        t = schedule.sample_t(rng)
        xt = forward_mask(batch[i], t, rng, model.config.mask_id, schedule)
        draws.append((bs, t, xt))
    total = None
    for bs in sorted({d[0] for d in draws}):
        idx = [i for i, d in enumerate(draws) if d[0] == bs]
        part = nelbo_two_stream(
            model, batch[idx], np.stack([draws[i][2] for i in idx]),
            [draws[i][1] for i in idx], bs, schedule)
        total = part if total is None else T.add(total, part)
    loss = T.mul(total, 1.0 / B)
    if return_draws:
        return loss, draws
    return loss


def train_loop(model, data_iter, cfg, schedule=None, rng=None, on_step=None,
               on_checkpoint=None):
    """Run cfg.steps of mixed_loss -> backward -> AdamW with linear warmup.

    Returns the loss curve: one record per step with the draw summary.
    Aborts on a non-finite loss with the step diagnostics.
    """
    schedule = schedule or NoiseSchedule()
    if rng is None:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
    curve = []
    for step in range(cfg.steps):
        batch = next(data_iter)
        with T.Tape() as tape:
            loss, draws = mixed_loss(model, batch, cfg, rng, schedule,
                                     return_draws=True)
        val = float(loss.item())
        if not math.isfinite(val):
            detail = [(bs, round(t, 4)) for bs, t, _ in draws]
            raise RuntimeError(
                f"non-finite loss {val} at step {step}; (block, t) draws: {detail}")
        grads = T.backward(loss, tape)
        adamw_step(model.params, grads,
                   lr=warmup_lr(step, cfg.lr, cfg.warmup_steps),
                   weight_decay=cfg.weight_decay)
        rec = {
            "step": step,
            "loss": val,
            "n_draft": sum(1 for bs, _, _ in draws if bs == cfg.block_draft),
            "n_global": sum(1 for bs, _, _ in draws if bs == cfg.block_global),
            "mean_t": float(np.mean([t for _, t, _ in draws])),
        }
        curve.append(rec)
        if on_step is not None:
            on_step(rec)
        if on_checkpoint is not None and cfg.ckpt_every and \
                (step + 1) % cfg.ckpt_every == 0:
            on_checkpoint(step + 1)
    return curve
