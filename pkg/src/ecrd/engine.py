"""The decode loop, per-step trace records and frozen-trace replay.

Each step: base distribution, knee truncation, evidence-induced
distribution, mass matching, negotiated mixture, trigger check, commit.
On a fired trigger the decider picks the token and its sentence joins the
evidence pool for every later step.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from ecrd.backends import BackendError, GenerationBackend, ScoringBackend, generate_greedy
from ecrd.decider import (
    DEFAULT_TAIL,
    Decider,
    DeciderError,
    InvalidVerdict,
    build_request,
    validate_verdict,
)
from ecrd.dist import TokenDistribution, knee_truncate, sort_descending
from ecrd.evidence import (
    Evidence,
    EvidencePool,
    EvidenceScorer,
    Provenance,
    evidence_distribution,
)
from ecrd.supervisor import (
    COMMITTED_CONFIDENT,
    DEFAULT_DELTA,
    TriggerDecision,
    decide_trigger,
    mass_match,
    negotiate,
)

log = logging.getLogger(__name__)

MODES = ("ecrd", "vdgd_baseline", "base_greedy", "supervisor_only")
GAIN_TAGS = ("none", "decider_direct_answer", "decider_midchain_grounding", "supervisor_reweight")
GLOBAL_ID = "global"


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "ecrd"
    delta: float = DEFAULT_DELTA
    max_tokens: int = 64
    stop_tokens: tuple[int, ...] = ()
    tail: int = DEFAULT_TAIL
    global_description: str | None = None
    # when no description text is given, ask the generation backend for one
    describe_with_backend: bool = False
    caption_prompt: str = "Describe the image ."
    caption_max_tokens: int = 48
    template: str = "{prefix}"
    trace_topk: int = 10
    cache_precision: str = "float64"
    scoring_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stop_tokens", tuple(int(t) for t in self.stop_tokens))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")
        if self.tail < 0:
            raise ValueError("tail must be non-negative")

    @property
    def needs_evidence(self) -> bool:
        return self.mode != "base_greedy"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stop_tokens"] = list(self.stop_tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class StepRecord:
    step: int
    mode: str
    committed: int
    committed_by: str
    base_topk: list = field(default_factory=list)
    base_residual: float = 0.0
    knee_index: int | None = None
    covered_mass: float | None = None
    pool_size: int = 0
    pooled_means: list | None = None
    r: list | None = None
    r_tilde: list | None = None
    alpha: float | None = None
    p_mix_topk: list | None = None
    raw_mass: float | None = None
    margin: float | None = None
    trigger: dict | None = None
    support_fallback: bool = False
    vdgd_scores: list | None = None
    verdict_id: str | None = None
    verdict_violation: bool = False
    timings: dict = field(default_factory=lambda: {"base_ms": 0.0, "scoring_ms": 0.0, "decider_ms": 0.0})
    gain_tag: str | None = None

    @property
    def fired(self) -> bool:
        return bool(self.trigger and self.trigger["fired"])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        known = {f.name for f in dataclasses.fields(cls)}
        missing = {"step", "mode", "committed", "committed_by"} - d.keys()
        if missing:
            raise ValueError(f"step record lacks {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class DecodeTrace:
    config: DecodeConfig
    prompt: list[int]
    context_id: str | None
    steps: list[StepRecord]
    tokens: list[int]
    final_text: str
    pool: EvidencePool
    totals: dict
    aborted: bool = False
    error: str | None = None

    @property
    def decider_calls(self) -> int:
        return self.totals["decider_calls"]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "header", "config": self.config.to_dict(), "prompt": self.prompt,
                             "context_id": self.context_id})]
        lines += [json.dumps({"kind": "step", **s.to_dict()}) for s in self.steps]
        lines.append(json.dumps({
            "kind": "footer", "tokens": self.tokens, "final_text": self.final_text,
            "pool": self.pool.to_dict(), "totals": self.totals,
            "aborted": self.aborted, "error": self.error,
        }))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "DecodeTrace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if len(rows) < 2 or rows[0].get("kind") != "header" or rows[-1].get("kind") != "footer":
            raise ValueError("trace must start with a header line and end with a footer line")
        head, foot = rows[0], rows[-1]
        steps = []
        for row in rows[1:-1]:
            if row.get("kind") != "step":
                raise ValueError(f"unexpected trace line kind {row.get('kind')!r}")
            steps.append(StepRecord.from_dict({k: v for k, v in row.items() if k != "kind"}))
        return cls(
            DecodeConfig.from_dict(head["config"]), head["prompt"], head.get("context_id"), steps,
            foot["tokens"], foot["final_text"], EvidencePool.from_dict(foot["pool"]), foot["totals"],
            foot.get("aborted", False), foot.get("error"),
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "DecodeTrace":
        return cls.from_jsonl(Path(path).read_text())


def _pairs(d) -> list:
    return [[int(t), float(p)] for t, p in d]


class Engine:
    """Binds backends, an optional decider and a config into a reusable decoder.

    ``scorer`` defaults to the generation backend but is queried through its
    own handle and cache. ``clock`` returns seconds; pass a fixed clock to
    get timing-free, byte-reproducible traces.
    """

    def __init__(self, generator: GenerationBackend, config: DecodeConfig = DecodeConfig(), *,
                 scorer: ScoringBackend | None = None, decider: Decider | None = None,
                 clock: Callable[[], float] = time.perf_counter):
        if config.mode == "ecrd" and decider is None:
            raise ValueError("ecrd mode needs a decider")
        self.generator = generator
        self.scorer_backend = scorer if scorer is not None else generator
        self.decider = decider
        self.config = config
        self.clock = clock

    def _global_description(self, ctx: str | None) -> str:
        cfg = self.config
        if cfg.global_description is not None:
            return cfg.global_description
        if cfg.describe_with_backend:
            prompt = self.generator.tokenize(cfg.caption_prompt)
            toks = generate_greedy(self.generator, prompt, ctx, cfg.caption_max_tokens, cfg.stop_tokens)
            return self.generator.detokenize(toks)
        raise ValueError(f"mode {cfg.mode!r} needs a global description (text or describe_with_backend)")

    def decode(self, prompt: Sequence[int], ctx: str | None = None) -> DecodeTrace:
        cfg = self.config
        start = self.clock()
        prompt = [int(t) for t in prompt]
        pool = EvidencePool()
        scorer = EvidenceScorer(self.scorer_backend, template=cfg.template, ctx=ctx,
                                precision=cfg.cache_precision, max_workers=cfg.scoring_workers)
        steps: list[StepRecord] = []
        generated: list[int] = []
        aborted, error = False, None
        stop = set(cfg.stop_tokens)
        try:
            if cfg.needs_evidence:
                text = self._global_description(ctx)
                pool.append(Evidence.from_text(GLOBAL_ID, text, self.scorer_backend,
                                               Provenance.global_description()))
            for i in range(cfg.max_tokens):
                rec = self._step(i, prompt, generated, ctx, pool, scorer)
                steps.append(rec)
                generated.append(rec.committed)
                if rec.committed in stop:
                    break
        except (BackendError, DeciderError) as e:
            log.warning("decode aborted: %s", e)
            aborted, error = True, f"{type(e).__name__}: {e}"
        body = generated[:-1] if generated and generated[-1] in stop else generated
        totals = {
            "tokens": len(generated),
            "decider_calls": sum(1 for s in steps if s.verdict_id is not None),
            "triggers": sum(1 for s in steps if s.fired),
            "wall_time": self.clock() - start,
        }
        return DecodeTrace(cfg, prompt, ctx, steps, generated, self.generator.detokenize(body), pool,
                           totals, aborted, error)

    def _step(self, i: int, prompt: list[int], generated: list[int], ctx: str | None,
              pool: EvidencePool, scorer: EvidenceScorer) -> StepRecord:
        cfg = self.config
        t0 = self.clock()
        base = self.generator.next_distribution(prompt + generated, ctx)
        t1 = self.clock()
        ranked = sort_descending(base)
        timings = {"base_ms": (t1 - t0) * 1000.0, "scoring_ms": 0.0, "decider_ms": 0.0}

        if cfg.mode == "base_greedy":
            return StepRecord(i, cfg.mode, ranked[0][0], "base", _pairs(ranked[: cfg.trace_topk]),
                              base.residual_mass, pool_size=pool.N, timings=timings)

        cands = knee_truncate(base)
        base_topk = _pairs(ranked[: max(cfg.trace_topk, cands.knee_index)])
        rec = StepRecord(i, cfg.mode, -1, "", base_topk, base.residual_mass, cands.knee_index,
                         cands.covered_mass, pool.N, timings=timings)

        if cfg.mode == "vdgd_baseline":
            scores = scorer.vdgd_scores(cands.ids, pool[0])
            rec.vdgd_scores = [[t, scores[t]] for t in cands.ids]
            probs = _softmax_neg(scores, cands.ids)
            rec.r = [[t, probs[t]] for t in cands.ids]
            rec.committed = max(cands.ids, key=lambda t: probs[t])
            rec.committed_by = "vdgd"
            timings["scoring_ms"] = (self.clock() - t1) * 1000.0
            return rec

        ed = evidence_distribution(cands, pool, scorer)
        r_tilde = mass_match(ed.r, cands)
        out = negotiate(base, r_tilde, cands)
        t2 = self.clock()
        timings["scoring_ms"] = (t2 - t1) * 1000.0
        rec.pooled_means = [[t, ed.pooled[t]] for t in cands.ids]
        rec.r = [[t, ed.r[t]] for t in cands.ids]
        rec.r_tilde = [[t, r_tilde[t]] for t in cands.ids]
        rec.support_fallback = ed.fallback
        rec.alpha = out.alpha
        rec.p_mix_topk = _pairs(sort_descending(out.p_mix)[: max(cfg.trace_topk, cands.knee_index)])
        rec.raw_mass = out.raw_mass
        rec.margin = out.margin

        if cfg.mode == "supervisor_only":
            decision = TriggerDecision(False, COMMITTED_CONFIDENT, cfg.delta)
        else:
            decision = decide_trigger(out, cands, cfg.delta)
        rec.trigger = {"fired": decision.fired, "reason": decision.reason, "delta": decision.delta}
        rec.committed, rec.committed_by = out.top1[0], "mixture"

        if decision.fired:
            req = build_request(generated, cands, self.generator.surface, ctx, cfg.tail)
            verdict = self.decider.decide(req)
            timings["decider_ms"] = (self.clock() - t2) * 1000.0
            try:
                validate_verdict(verdict, req)
            except InvalidVerdict as e:
                log.warning("step %d: %s; committing mixture argmax", i, e)
                rec.verdict_violation = True
            else:
                ev = Evidence.from_text(f"decider-{i}", verdict.sentence, self.scorer_backend,
                                        Provenance.decider(i), verdict.annotations)
                pool.append(ev)
                rec.verdict_id = ev.id
                rec.committed, rec.committed_by = verdict.chosen, "decider"
        return rec


def _softmax_neg(scores: dict[int, float], order: Sequence[int]) -> dict[int, float]:
    finite = [scores[t] for t in order if math.isfinite(scores[t])]
    if not finite:
        return {t: 1.0 / len(order) for t in order}
    lo = min(finite)
    w = {t: math.exp(-(scores[t] - lo)) if math.isfinite(scores[t]) else 0.0 for t in order}
    z = sum(w.values())
    return {t: v / z for t, v in w.items()}


def decode(prompt: Sequence[int], ctx: str | None, cfg: DecodeConfig, generator: GenerationBackend, *,
           scorer: ScoringBackend | None = None, decider: Decider | None = None,
           clock: Callable[[], float] = time.perf_counter) -> DecodeTrace:
    return Engine(generator, cfg, scorer=scorer, decider=decider, clock=clock).decode(prompt, ctx)


# -- trace analysis ----------------------------------------------------------


@dataclass(frozen=True)
class ReplayReport:
    delta: float
    triggers: int
    fired_steps: tuple[int, ...]
    steps: int


def replay(trace: DecodeTrace | Iterable[StepRecord], new_delta: float) -> ReplayReport:
    """Re-apply the trigger rule to frozen (knee, margin) pairs.

    Nothing is re-decoded, so steps after a newly fired (or no longer fired)
    trigger keep their original trajectory.
    """
    records = trace.steps if isinstance(trace, DecodeTrace) else list(trace)
    fired = []
    for rec in records:
        if rec.knee_index is None or rec.margin is None:
            raise ValueError(f"step {rec.step} lacks knee_index/margin; was it decoded in {rec.mode!r} mode?")
        if decide_trigger(rec.margin, rec.knee_index, new_delta).fired:
            fired.append(rec.step)
    return ReplayReport(new_delta, len(fired), tuple(fired), len(records))


def check_step_integrity(rec: StepRecord, tol: float = 1e-6) -> None:
    """Recompute the recorded mixture entries from base probabilities, r and covered mass."""
    if rec.p_mix_topk is None:
        return
    base = {t: p for t, p in rec.base_topk}
    r = {t: p for t, p in rec.r}
    z = sum(r.values())
    m = rec.covered_mass
    alpha = rec.alpha
    if abs(alpha - rec.base_topk[0][1]) > tol:
        raise AssertionError(f"step {rec.step}: alpha {alpha} is not the base top-1 probability")
    raw = m + alpha * (1.0 - m)
    if abs(raw - rec.raw_mass) > tol:
        raise AssertionError(f"step {rec.step}: raw mass {rec.raw_mass} != {raw}")
    for t, pm in rec.p_mix_topk:
        if t not in base:
            raise AssertionError(f"step {rec.step}: mixture token {t} missing from recorded base top-k")
        u = alpha * base[t]
        if t in r:
            u += (1.0 - alpha) * r[t] * m / z
        if abs(u / raw - pm) > tol:
            raise AssertionError(f"step {rec.step}: p_mix[{t}] = {pm}, recomputed {u / raw}")


def tag_gains(trace: DecodeTrace, answer_start: int | None = None) -> DecodeTrace:
    """Label steps by where a gain could come from.

    Decider steps at or after ``answer_start`` (a step index) count as
    direct answers, earlier ones as mid-chain grounding. Untriggered steps
    where the mixture overturned the base argmax are supervisor reweights.
    """
    steps = []
    for rec in trace.steps:
        if rec.verdict_id is not None:
            tag = ("decider_direct_answer" if answer_start is not None and rec.step >= answer_start
                   else "decider_midchain_grounding")
        elif rec.committed_by == "mixture" and rec.committed != rec.base_topk[0][0]:
            tag = "supervisor_reweight"
        else:
            tag = "none"
        steps.append(dataclasses.replace(rec, gain_tag=tag))
    return dataclasses.replace(trace, steps=steps)
