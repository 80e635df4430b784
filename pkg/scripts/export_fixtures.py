"""Write a fixture's tables, decider script, prompt and description to disk for the CLI.

    python scripts/export_fixtures.py dress out/
    ecrd decode --backend tabular:out/generator.json --scoring-backend tabular:out/scorer.json \\
        --decider script:out/verdicts.json --prompt-file out/prompt.txt \\
        --global-description-file out/description.txt --trace-out out/trace.jsonl
"""

import argparse
import json
from pathlib import Path

from ecrd.fixtures import dress_case, peak_vs_sustained_case, price_tag_case

CASES = {"dress": dress_case, "price": price_tag_case, "peak": peak_vs_sustained_case}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("case", choices=sorted(CASES))
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    fx = CASES[args.case]()
    args.out.mkdir(parents=True, exist_ok=True)
    fx.generator.save(args.out / "generator.json")
    fx.scorer.save(args.out / "scorer.json")
    (args.out / "verdicts.json").write_text(json.dumps({"verdicts": fx.script}, indent=1))
    (args.out / "prompt.txt").write_text(fx.prompt + "\n")
    (args.out / "description.txt").write_text(fx.global_description + "\n")
    print(f"wrote {args.case} fixture to {args.out}/")


if __name__ == "__main__":
    main()
