"""Desk-scale trend calibration: trains bimodal + no-mix models on the
synthetic Markov benchmark and reports the four trend-criterion comparisons.
Not part of the package; a scratch experiment driver."""

import json
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from sbd.kernels import warmup
from sbd.model import DenoiserModel, DenoiserConfig
from sbd.training import TrainConfig, train_loop
from sbd.data import random_markov_spec, gen_markov, sequence_stream, entropy_rate
from sbd.evalsuite import (MarkovScorer, ablation_remask_strategy,
                           ablation_revision_scope, ablation_training_mix,
                           gen_ppl)
from sbd.checkpoint import save_checkpoint

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
V, L = 16, 64

warmup()
spec = random_markov_spec(V, 3, seed=0)
print("entropy rate", entropy_rate(spec), "e^h", np.exp(entropy_rate(spec)), flush=True)
rng = np.random.Generator(np.random.Philox(0))
seqs = gen_markov(spec, 4096, L, rng)
scorer = MarkovScorer(spec)

models = {}
for mix, lam in (("bimodal", 0.1), ("none", 0.0)):
    t0 = time.time()
    mcfg = DenoiserConfig(vocab_size=V, max_len=L, n_layers=2, n_heads=4, d_model=64)
    m = DenoiserModel(mcfg, seed=0)
    cfg = TrainConfig(seq_len=L, batch_size=16, steps=STEPS, lam=lam, mix=mix)
    curve = train_loop(m, sequence_stream(seqs, 16, 0), cfg,
                       on_step=lambda r: print(f"  [{mix}] {r['step']} {r['loss']:.4f}", flush=True)
                       if r["step"] % 250 == 0 else None)
    print(f"[{mix}] trained {STEPS} steps in {time.time()-t0:.0f}s, "
          f"final loss {np.mean([r['loss'] for r in curve[-50:]]):.4f}", flush=True)
    save_checkpoint(f"/tmp/trend_{mix}.sbd", m, step=STEPS)
    models[mix] = m

seeds = list(range(7))
n_samples = 24

print("== remask strategy (bimodal model) ==", flush=True)
rows = ablation_remask_strategy(models["bimodal"], L, scorer, seeds, n_samples)
by = {}
for r in rows:
    by.setdefault(r["policy"], []).append(r["gen_ppl"])
for pol, vals in by.items():
    print(f"  {pol:16s} median {np.median(vals):.4f}  per-seed {[round(v,3) for v in vals]}", flush=True)

print("== training mix ==", flush=True)
rows = ablation_training_mix(models, L, scorer, seeds, n_samples)
by = {}
for r in rows:
    by.setdefault(r["mix"], {"s1": [], "s2": []})
    by[r["mix"]]["s1"].append(r["stage1_ppl"])
    by[r["mix"]]["s2"].append(r["stage2_ppl"])
for mix, d in by.items():
    print(f"  {mix:8s} stage1 median {np.median(d['s1']):.4f} stage2 median {np.median(d['s2']):.4f}", flush=True)

print("== revision scope (bimodal): gamma=0.5, block2 in (4, 64) ==", flush=True)
rows = ablation_revision_scope(models["bimodal"], L, scorer, [4, 64], [0.5],
                               seeds, n_samples)
by = {}
for r in rows:
    key = "stage1" if r["role"] == "stage1" else f"b2={r['block2']}"
    by.setdefault(key, []).append(r["gen_ppl"])
for k, vals in by.items():
    print(f"  {k:10s} median {np.median(vals):.4f}", flush=True)
print("DONE", flush=True)
