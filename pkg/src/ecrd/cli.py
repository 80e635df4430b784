"""Command-line entry points: decode, replay, sweep, fit-latency.

Backends and deciders are named as ``kind:target``::

    --backend tabular:model.json     --backend remote:http://host:8000/logprobs
    --decider script:verdicts.json   --decider remote:http://host:9000/decide

``--config FILE`` takes a JSON object whose keys (flag names, dashes or
underscores) override whatever was given on the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ecrd.backends import RemoteModelClient, TabularModel
from ecrd.decider import RemoteDecider, ScriptedDecider
from ecrd.engine import MODES, DecodeConfig, DecodeTrace, Engine, replay
from ecrd.latency import fit_latency_model, read_observations
from ecrd.sweep import DEFAULT_GRID, CorpusItem, read_corpus, sweep_decode, sweep_frozen

log = logging.getLogger("ecrd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _delta(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"delta must lie in [0, 1], got {v}")
    return v


def _grid(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="generation backend, tabular:PATH or remote:URL")
    p.add_argument("--scoring-backend", help="evidence scoring backend (defaults to --backend)")
    p.add_argument("--decider", help="script:PATH or remote:URL")
    p.add_argument("--mode", choices=MODES, default="ecrd")
    p.add_argument("--delta", type=_delta, default=0.08)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--tail", type=int, default=64, help="generated tokens shown to the decider")
    p.add_argument("--stop", action="append", default=None,
                   help="stop token surface (repeatable; default <eos> when the vocabulary has it)")
    p.add_argument("--template", default="{prefix}", help="wrapping for evidence prefixes")
    p.add_argument("--global-description")
    p.add_argument("--global-description-file")
    p.add_argument("--describe-with-backend", action="store_true")
    p.add_argument("--context-id")
    p.add_argument("--auth-env", help="environment variable holding the remote bearer token")
    p.add_argument("--wire", choices=("native", "completions"), default="native")
    p.add_argument("--vocab-file", help="JSON list of surfaces for a remote backend")
    p.add_argument("--no-cache", action="store_true", help="ask the remote scoring server to bypass caching")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", help="JSON file whose keys override flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecrd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="decode one prompt and write its trace")
    _add_model_flags(p)
    p.add_argument("--prompt")
    p.add_argument("--prompt-file")
    p.add_argument("--trace-out")

    p = sub.add_parser("replay", help="recount triggers of frozen traces at a new threshold")
    p.add_argument("traces", nargs="+")
    p.add_argument("--delta", type=_delta, default=0.08)
    p.add_argument("--out", help="write the replay summary as JSON")
    p.add_argument("--config")

    p = sub.add_parser("sweep", help="decider calls, time and score across a threshold grid")
    _add_model_flags(p)
    p.add_argument("--grid", type=_grid, default=list(DEFAULT_GRID), help="comma separated thresholds")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--frozen", nargs="+", help="replay these traces instead of decoding")
    src.add_argument("--corpus", help="JSONL prompts (id, prompt, context_id, global_description, answer, verdicts)")
    p.add_argument("--out", help="CSV destination (stdout when omitted)")

    p = sub.add_parser("fit-latency", help="least-squares fit of time per question against decider calls")
    p.add_argument("--observations", required=True, help="CSV (r,T or r,mean_time) or JSON")
    p.add_argument("--out", help="write the fitted model as JSON")
    p.add_argument("--config")
    return parser


def apply_config(args: argparse.Namespace) -> argparse.Namespace:
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        overrides = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(overrides, dict):
        raise UsageError("config must be a JSON object")
    for key, value in overrides.items():
        name = key.replace("-", "_")
        if not hasattr(args, name):
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, name, value)
    if hasattr(args, "delta"):
        try:
            _delta(str(args.delta))
        except (argparse.ArgumentTypeError, ValueError) as e:
            raise UsageError(str(e)) from e
    return args


def _split(uri: str, what: str) -> tuple[str, str]:
    kind, sep, target = uri.partition(":")
    if not sep or not target:
        raise UsageError(f"{what} must look like kind:target, got {uri!r}")
    return kind, target


def load_backend(uri: str, args, *, scoring: bool = False):
    kind, target = _split(uri, "backend")
    if kind == "tabular":
        try:
            return TabularModel.load(target)
        except OSError as e:
            raise UsageError(f"cannot read tabular model: {e}") from e
    if kind == "remote":
        vocab = json.loads(Path(args.vocab_file).read_text()) if args.vocab_file else None
        return RemoteModelClient(target, auth_env=args.auth_env, vocab=vocab, wire=args.wire,
                                 timeout=args.timeout, no_cache=scoring and args.no_cache)
    raise UsageError(f"unknown backend kind {kind!r}")


def load_decider(uri: str | None, verdicts=None):
    if verdicts is not None:
        return ScriptedDecider(verdicts)
    if uri is None:
        return None
    kind, target = _split(uri, "decider")
    if kind == "script":
        try:
            return ScriptedDecider.load(target)
        except OSError as e:
            raise UsageError(f"cannot read decider script: {e}") from e
    if kind == "remote":
        return RemoteDecider(target)
    raise UsageError(f"unknown decider kind {kind!r}")


def _read_text(inline: str | None, path: str | None, what: str) -> str | None:
    if inline is not None and path is not None:
        raise UsageError(f"give --{what} or --{what}-file, not both")
    if path is not None:
        try:
            return Path(path).read_text().strip()
        except OSError as e:
            raise UsageError(f"cannot read {what} file: {e}") from e
    return inline


def _stop_ids(args, generator) -> tuple[int, ...]:
    if args.stop:
        return tuple(generator.token_id(s) for s in args.stop)
    vocab = getattr(generator, "vocab", None) or []
    return (vocab.index("<eos>"),) if "<eos>" in vocab else ()


def decode_config(args, generator, description: str | None = None, delta: float | None = None) -> DecodeConfig:
    desc = description if description is not None else _read_text(
        args.global_description, args.global_description_file, "global-description")
    try:
        return DecodeConfig(
            mode=args.mode, delta=args.delta if delta is None else delta, max_tokens=args.max_tokens,
            stop_tokens=_stop_ids(args, generator), tail=args.tail, global_description=desc,
            describe_with_backend=args.describe_with_backend, template=args.template,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e


def _backends(args):
    if not args.backend:
        raise UsageError("--backend is required")
    gen = load_backend(args.backend, args)
    scorer = load_backend(args.scoring_backend, args, scoring=True) if args.scoring_backend else None
    return gen, scorer


def _engine(args, gen, scorer, cfg, decider) -> Engine:
    if cfg.mode == "ecrd" and decider is None:
        raise UsageError("--mode ecrd needs --decider")
    if cfg.needs_evidence and cfg.global_description is None and not cfg.describe_with_backend:
        raise UsageError(f"--mode {cfg.mode} needs a global description or --describe-with-backend")
    return Engine(gen, cfg, scorer=scorer, decider=decider)


def cmd_decode(args) -> int:
    gen, scorer = _backends(args)
    prompt = _read_text(args.prompt, args.prompt_file, "prompt")
    if prompt is None:
        raise UsageError("decode needs --prompt or --prompt-file")
    cfg = decode_config(args, gen)
    engine = _engine(args, gen, scorer, cfg, load_decider(args.decider))
    trace = engine.decode(gen.tokenize(prompt), args.context_id)
    if args.trace_out:
        trace.write(args.trace_out)
    print(trace.final_text)
    t = trace.totals
    print(f"tokens={t['tokens']} decider_calls={t['decider_calls']} triggers={t['triggers']} "
          f"wall_time={t['wall_time']:.3f}s", file=sys.stderr)
    if trace.aborted:
        print(f"error: decode aborted: {trace.error}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_replay(args) -> int:
    rows = []
    for path in args.traces:
        rep = replay(DecodeTrace.read(path), args.delta)
        rows.append({"trace": path, "delta": rep.delta, "triggers": rep.triggers,
                     "fired_steps": list(rep.fired_steps), "steps": rep.steps})
        print(f"{path}\tdelta={rep.delta}\ttriggers={rep.triggers}\tsteps={rep.steps}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.frozen:
        report = sweep_frozen([DecodeTrace.read(p) for p in args.frozen], args.grid)
    elif args.corpus:
        items = read_corpus(args.corpus)
        gen, scorer = _backends(args)

        def run(item: CorpusItem, delta: float) -> DecodeTrace:
            cfg = decode_config(args, gen, item.global_description, delta)
            engine = _engine(args, gen, scorer, cfg, load_decider(args.decider, item.verdicts))
            return engine.decode(gen.tokenize(item.prompt), item.context_id)

        report = sweep_decode(items, args.grid, run, jobs=args.jobs)
    else:
        raise UsageError("sweep needs --frozen or --corpus")
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fit_latency(args) -> int:
    model = fit_latency_model(read_observations(args.observations))
    print(f"t0={model.t0:.4f}s l0={model.l0:.4f}s/call residual={model.residual:.4f}s n={model.n}")
    if args.out:
        model.save(args.out)
    return EXIT_OK


COMMANDS = {"decode": cmd_decode, "replay": cmd_replay, "sweep": cmd_sweep, "fit-latency": cmd_fit_latency}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_config(args)
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.error(str(e))
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
