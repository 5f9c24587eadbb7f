"""Run configuration: one JSON file, flag overrides, validated echo.

Schema (all sections optional unless a command needs them):

{
  "seed": 0,
  "out_dir": "runs/demo",
  "model":  {"n_layers": 2, "n_heads": 4, "d_model": 64},
  "data":   {"kind": "markov", "path": "chain.txt", "seq_len": 64,
             "n_train_sequences": 4096, "data_seed": 0}
         or {"kind": "text", "path": "corpus.txt", "mode": "char",
             "seq_len": 256, "heldout_frac": 0.1},
  "train":  {"block_draft": 4, "block_global": 0, "lam": 0.1,
             "mix": "bimodal", "batch_size": 16, "steps": 1000,
             "lr": 3e-4, "warmup_steps": 100, "weight_decay": 0.01,
             "ckpt_every": 0},
  "plan":   [{"block_size": 4},
             {"block_size": 64, "gamma": 0.5, "policy": "snapshot"}],
  "eval":   {"n_samples": 16, "n_mc": 4, "scorer": "markov"}
}
"""

import json
import os

from .model import DenoiserConfig
from .sampler import StageConfig, StagePlan
from .training import TrainConfig

_DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/out",
    "model": {"n_layers": 2, "n_heads": 4, "d_model": 64},
    "data": {},
    "train": {},
    "plan": [],
    "eval": {"n_samples": 16, "n_mc": 4, "scorer": "markov"},
}


def load_config(path):
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    merged = json.loads(json.dumps(_DEFAULTS))
    for key, val in cfg.items():
        if isinstance(val, dict) and isinstance(merged.get(key), dict):
            merged[key].update(val)
        else:
            merged[key] = val
    return merged


def apply_overrides(cfg, seed=None, out_dir=None):
    """CLI flags win over file values."""
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    return cfg


def resolve(cfg, need=()):
    """Validate referential integrity and shape constraints up front.

    Returns typed pieces {model_cfg?, train_cfg?, plan?}; raises ValueError
    before any work starts when something is inconsistent.
    """
    out = {}
    data = cfg.get("data", {})
    if "data" in need:
        kind = data.get("kind")
        if kind not in ("markov", "text"):
            raise ValueError(f"data.kind must be markov or text, got {kind!r}")
        if not data.get("path") or not os.path.exists(data["path"]):
            raise ValueError(f"data.path does not exist: {data.get('path')!r}")
        if int(data.get("seq_len", 0)) < 1:
            raise ValueError("data.seq_len must be set and positive")
    seq_len = int(data.get("seq_len", 0) or 0)
    if "train" in need:
        out["train_cfg"] = TrainConfig(seq_len=seq_len, seed=cfg["seed"],
                                       **cfg.get("train", {}))
    if "plan" in need:
        stages = [StageConfig(**s) for s in cfg.get("plan", [])]
        out["plan"] = StagePlan(seq_len, stages)
    return out


def make_model_config(cfg, vocab_size, seq_len):
    return DenoiserConfig(vocab_size=vocab_size, max_len=seq_len,
                          **cfg.get("model", {}))


def echo_config(cfg, out_dir):
    """Write the fully resolved config next to the outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
