"""Threshold sweep on synthetic traces: how often the decider would be called at each delta.

Random tabular worlds are decoded once in supervisor_only mode; every step
keeps its knee size and mixture margin, so the decider-call count at any
threshold can be replayed without decoding again. Prints plot-ready CSV.

    python scripts/delta_sweep_demo.py --worlds 200 --out sweep.csv
"""

import argparse
import sys

import numpy as np

from ecrd.backends import TabularModel
from ecrd.engine import DecodeConfig, decode
from ecrd.sweep import DEFAULT_GRID, sweep_frozen


def random_world(rng, V):
    vocab = ["<eos>"] + [f"w{chr(97 + i)}" for i in range(V - 1)]
    ids = np.arange(V)
    gen_entries, score_entries = {}, {}
    for t in range(V):
        n = int(rng.integers(2, V))
        keep = rng.choice(ids, size=n, replace=False)
        # diffuse heads are where the supervisor has work to do
        gen_entries[(t,)] = dict(zip(map(int, keep), map(float, rng.dirichlet(np.full(n, 2.0)))))
        score_entries[(t,)] = dict(zip(map(int, ids), map(float, rng.dirichlet(np.ones(V)))))
    gen = TabularModel(vocab, list(rng.dirichlet(np.ones(V))), gen_entries)
    scorer = TabularModel(vocab, [1.0 / V] * V, score_entries)
    desc = " ".join(vocab[int(t)] for t in rng.integers(1, V, size=6))
    return gen, scorer, desc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--worlds", type=int, default=100)
    ap.add_argument("--vocab", type=int, default=8)
    ap.add_argument("--max-tokens", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    traces = []
    for _ in range(args.worlds):
        gen, scorer, desc = random_world(rng, args.vocab)
        cfg = DecodeConfig(mode="supervisor_only", global_description=desc, stop_tokens=(0,),
                           max_tokens=args.max_tokens)
        traces.append(decode([1], None, cfg, gen, scorer=scorer))
    grid = sorted(set(DEFAULT_GRID) | {0.2, 0.3, 0.5, 1.0})
    text = sweep_frozen(traces, grid).to_csv()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


if __name__ == "__main__":
    main()
