"""Decode the bundled fixtures in every mode and print what each one commits.

    python scripts/run_cases.py [--trace-dir traces/]
"""

import argparse
from pathlib import Path

from ecrd.decider import ScriptedDecider
from ecrd.engine import MODES, Engine
from ecrd.fixtures import dress_case, peak_vs_sustained_case, price_tag_case

CASES = {"dress": dress_case, "price": price_tag_case, "peak": peak_vs_sustained_case}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trace-dir", type=Path)
    ap.add_argument("--delta", type=float, default=0.08)
    args = ap.parse_args()
    if args.trace_dir:
        args.trace_dir.mkdir(parents=True, exist_ok=True)

    print(f"{'case':6} {'mode':16} {'calls':>5} {'trig':>4}  output")
    for name, build in CASES.items():
        for mode in MODES:
            fx = build()
            decider = ScriptedDecider(fx.script) if mode == "ecrd" else None
            eng = Engine(fx.generator, fx.config(mode=mode, delta=args.delta), scorer=fx.scorer, decider=decider)
            trace = eng.decode(fx.prompt_ids, f"{name}-image")
            note = f"  [aborted: {trace.error}]" if trace.aborted else ""
            print(f"{name:6} {mode:16} {trace.decider_calls:5d} {trace.totals['triggers']:4d}  "
                  f"{trace.final_text}{note}")
            if args.trace_dir:
                trace.write(args.trace_dir / f"{name}_{mode}.jsonl")


if __name__ == "__main__":
    main()
