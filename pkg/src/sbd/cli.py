"""Command-line entry points: train | sample | eval | ablate | oracle-check.

All randomness flows from --seed (or the config's seed); sub-streams are
derived through SeedSequence([seed, ...indices]) as documented per command.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data as datamod
from .checkpoint import load_model, save_checkpoint
from .evalsuite import (ARScorer, MarkovScorer, ablation_remask_strategy,
                        ablation_revision_scope, ablation_training_mix,
                        gen_ppl, nelbo_eval, nfe_audit, train_ar_scorer)
from .kernels import warmup
from .model import DenoiserModel
from .sampler import generate
from .training import train_loop


class DataSource:
    """Uniform access to the configured corpus (markov chain or text file)."""

    def __init__(self, cfg):
        d = cfg["data"]
        self.kind = d["kind"]
        self.seq_len = int(d["seq_len"])
        self.data_seed = int(d.get("data_seed", 0))
        if self.kind == "markov":
            self.spec = datamod.read_markov_spec(d["path"])
            self.vocab = None
            self.vocab_size = self.spec.n_states
            n = int(d.get("n_train_sequences", 4096))
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence([self.data_seed, 0])))
            self._train = datamod.gen_markov(self.spec, n, self.seq_len, rng)
        elif self.kind == "text":
            with open(d["path"], "rb") as f:
                raw = f.read()
            mode = d.get("mode", "char")
            corpus = raw.decode("utf-8") if mode == "char" else raw
            self.spec = None
            self.vocab = datamod.build_vocab(corpus, mode)
            self.vocab_size = self.vocab.size
            ids = self.vocab.encode(corpus)
            held = float(d.get("heldout_frac", 0.1))
            cut = int(len(ids) * (1.0 - held))
            cut -= cut % self.seq_len
            self._train_ids = ids[:cut]
            self._held_ids = ids[cut:]
        else:
            raise ValueError(f"unknown data kind {self.kind!r}")

    def stream(self, batch_size, seed):
        if self.kind == "markov":
            return datamod.sequence_stream(self._train, batch_size, seed)
        return datamod.epoch_stream(self._train_ids, self.seq_len, batch_size,
                                    seed)

    def heldout(self, n):
        if self.kind == "markov":
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence([self.data_seed, 1])))
            return datamod.gen_markov(self.spec, n, self.seq_len, rng)
        chunks = len(self._held_ids) // self.seq_len
        if chunks == 0:
            raise ValueError("held-out split shorter than one sequence")
        arr = self._held_ids[: chunks * self.seq_len].reshape(-1, self.seq_len)
        return arr[:n]

    def decode_line(self, ids):
        if self.vocab is None:
            return " ".join(str(int(i)) for i in ids)
        text = self.vocab.decode(ids)
        if isinstance(text, bytes):
            text = text.decode("latin-1")
        return text.replace("\\", "\\\\").replace("\n", "\\n")

    def encode_line(self, line):
        if self.vocab is None:
            return np.array([int(v) for v in line.split()], dtype=np.int64)
        text = line.replace("\\n", "\n").replace("\\\\", "\\")
        return self.vocab.encode(text)


def _write_csv(path, rows, fieldnames=None):
    if not rows:
        raise ValueError(f"no rows to write to {path}")
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    return path


def _load_cfg(args, need):
    cfg = cfgmod.load_config(args.config)
    cfgmod.apply_overrides(cfg, seed=args.seed, out_dir=args.out)
    resolved = cfgmod.resolve(cfg, need=need)
    return cfg, resolved


def cmd_train(args):
    cfg, res = _load_cfg(args, need=("data", "train"))
    warmup()
    ds = DataSource(cfg)
    train_cfg = res["train_cfg"]
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.echo_config(cfg, out_dir)
    mcfg = cfgmod.make_model_config(cfg, ds.vocab_size, ds.seq_len)
    model = DenoiserModel(mcfg, seed=cfg["seed"])
    stream = ds.stream(train_cfg.batch_size,
                       int(np.random.SeedSequence([cfg["seed"], 17]).generate_state(1)[0]))
    rng = np.random.Generator(np.random.Philox(cfg["seed"]))

    def on_checkpoint(step):
        save_checkpoint(os.path.join(out_dir, f"ckpt_step{step:06d}.sbd"),
                        model, step=step, rng_state=rng.bit_generator.state)

    def on_step(rec):
        if rec["step"] % 50 == 0 or rec["step"] == train_cfg.steps - 1:
            print(f"step {rec['step']:5d}  loss {rec['loss']:.4f}")

    curve = train_loop(model, stream, train_cfg, rng=rng, on_step=on_step,
                       on_checkpoint=on_checkpoint)
    save_checkpoint(os.path.join(out_dir, "model.sbd"), model,
                    step=train_cfg.steps, rng_state=rng.bit_generator.state)
    _write_csv(os.path.join(out_dir, "loss.csv"), curve)
    print(f"trained {train_cfg.steps} steps; final loss {curve[-1]['loss']:.4f}")
    print(f"checkpoint: {os.path.join(out_dir, 'model.sbd')}")


def cmd_sample(args):
    cfg, res = _load_cfg(args, need=("data", "plan"))
    warmup()
    ds = DataSource(cfg)
    plan = res["plan"]
    model, _ = load_model(args.ckpt)
    if model.config.vocab_size != ds.vocab_size:
        raise ValueError("checkpoint vocabulary does not match the data source")
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.echo_config(cfg, out_dir)
    lines = []
    rows = []
    for i in range(args.n):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([cfg["seed"], i])))
        x, _, metrics = generate(model, plan, rng)
        nfe_audit(metrics)
        lines.append(ds.decode_line(x))
        row = {"seed": cfg["seed"], "sample_id": i}
        for sm in metrics:
            row[f"nfe_stage{sm['stage']}"] = sm["nfes"] + sm["remask_nfes"]
        rows.append(row)
    spath = os.path.join(out_dir, "samples.txt")
    with open(spath, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    _write_csv(os.path.join(out_dir, "metrics.csv"), rows)
    print(f"wrote {args.n} samples to {spath}")


def _make_scorer(cfg, ds, args):
    which = cfg["eval"].get("scorer", "markov")
    if which == "markov":
        if ds.spec is None:
            raise ValueError("markov scorer needs a markov data source")
        return MarkovScorer(ds.spec)
    if which == "ar":
        ar_path = cfg["eval"].get("ar_ckpt") or os.path.join(
            cfg["out_dir"], "ar_scorer.sbd")
        if not os.path.exists(ar_path):
            print(f"training AR scorer -> {ar_path}")
            mcfg = cfgmod.make_model_config(cfg, ds.vocab_size, ds.seq_len)
            scorer_model = DenoiserModel(mcfg, seed=cfg["seed"] + 7919)
            steps = int(cfg["eval"].get("ar_steps", 500))
            stream = ds.stream(
                int(cfg.get("train", {}).get("batch_size", 16)),
                int(np.random.SeedSequence([cfg["seed"], 23]).generate_state(1)[0]))
            train_ar_scorer(scorer_model, stream, steps)
            save_checkpoint(ar_path, scorer_model, step=steps)
        scorer_model, _ = load_model(ar_path)
        return ARScorer(scorer_model)
    raise ValueError(f"unknown scorer {which!r}")


def cmd_eval(args):
    cfg, _ = _load_cfg(args, need=("data",))
    warmup()
    ds = DataSource(cfg)
    model, _ = load_model(args.ckpt)
    with open(args.samples, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise ValueError(f"samples file {args.samples} is empty")
    samples = np.stack([ds.encode_line(ln) for ln in lines])
    scorer = _make_scorer(cfg, ds, args)
    ppl, clamped = gen_ppl(scorer, samples, return_clamped=True)
    ev = cfg["eval"]
    nelbo_block = int(ev.get("nelbo_block",
                             cfg.get("train", {}).get("block_draft", 4)))
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([cfg["seed"], 29])))
    nelbo, se = nelbo_eval(model, ds.heldout(int(ev.get("n_samples", 16))),
                           nelbo_block, int(ev.get("n_mc", 4)), rng)
    row = {"gen_ppl": ppl, "nelbo_per_token": nelbo, "nelbo_se": se,
           "sample_count": len(samples), "seed": cfg["seed"],
           "clamped": clamped}
    if args.metrics and os.path.exists(args.metrics):
        with open(args.metrics, encoding="utf-8") as f:
            mrows = list(csv.DictReader(f))
        for key in mrows[0]:
            if key.startswith("nfe_stage"):
                row[key] = sum(int(r[key]) for r in mrows)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.echo_config(cfg, out_dir)
    path = _write_csv(os.path.join(out_dir, "eval.csv"), [row])
    print(f"gen_ppl {ppl:.4f}  nelbo/token {nelbo:.4f} (se {se:.4f})")
    print(f"report: {path}")


def cmd_ablate(args):
    cfg, _ = _load_cfg(args, need=("data",))
    warmup()
    ds = DataSource(cfg)
    scorer = _make_scorer(cfg, ds, args)
    ev = cfg["eval"]
    seeds = list(range(int(ev.get("n_seeds", 5))))
    n_samples = int(ev.get("n_samples", 16))
    L = ds.seq_len
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.echo_config(cfg, out_dir)
    if args.axis == "training_mix":
        ckpts = ev.get("mix_checkpoints")
        if not ckpts:
            raise ValueError("training_mix needs eval.mix_checkpoints "
                             "{label: checkpoint path}")
        models = {}
        for label, path in ckpts.items():
            if not os.path.exists(path):
                raise ValueError(f"missing checkpoint for {label!r}: {path}")
            models[label], _ = load_model(path)
        rows = ablation_training_mix(models, L, scorer, seeds, n_samples,
                                     master_seed=cfg["seed"])
    else:
        model, _ = load_model(args.ckpt)
        if args.axis == "revision_scope":
            block2 = ev.get("block2_list") or \
                [b for b in (4, 16, 64, 256, L) if b <= L and L % b == 0]
            gammas = ev.get("gamma_list") or [0.0, 0.1, 0.25, 0.5, 0.75, 1.0]
            rows = ablation_revision_scope(model, L, scorer, block2, gammas,
                                           seeds, n_samples,
                                           master_seed=cfg["seed"])
        elif args.axis == "remask_strategy":
            rows = ablation_remask_strategy(model, L, scorer, seeds, n_samples,
                                            gamma=float(ev.get("gamma", 0.5)),
                                            master_seed=cfg["seed"])
        else:
            raise ValueError(f"unknown ablation axis {args.axis!r}")
    path = _write_csv(os.path.join(out_dir, f"ablation_{args.axis}.csv"), rows)
    print(f"{len(rows)} rows -> {path}")


def cmd_oracle_check(args):
    from .oracle import run_all
    checks = run_all(corrupt_mask=args.corrupt_mask)
    failed = 0
    for name, passed, measured in checks:
        print(f"{'ok  ' if passed else 'FAIL'}  {name:24s}  {measured}")
        failed += 0 if passed else 1
    if failed:
        print(f"{failed} check(s) failed")
        return 1
    print("all checks passed")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="sbd",
        description="Structural block diffusion: train, sample, evaluate.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")
        if ckpt:
            p.add_argument("--ckpt", required=False, help="model checkpoint")

    p = sub.add_parser("train", help="train a denoiser")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate with a stage plan")
    common(p, ckpt=True)
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score a samples file")
    common(p, ckpt=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--metrics", default=None,
                   help="metrics CSV from `sample` for NFE totals")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p, ckpt=True)
    p.add_argument("--axis", required=True,
                   choices=["revision_scope", "remask_strategy", "training_mix"])
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("oracle-check", help="run the property/oracle suite")
    p.add_argument("--corrupt-mask", action="store_true",
                   help="negative control: damage the block-mask rule")
    p.set_defaults(fn=cmd_oracle_check, config=None, seed=None, out=None)

    args = ap.parse_args(argv)
    for name in ("ckpt",):
        if not hasattr(args, name):
            setattr(args, name, None)
    rc = args.fn(args)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
