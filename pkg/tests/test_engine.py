import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecrd.backends import TabularModel, TransportError
from ecrd.decider import ScriptedDecider
from ecrd.engine import (
    DecodeConfig,
    DecodeTrace,
    Engine,
    StepRecord,
    check_step_integrity,
    decode,
    replay,
    tag_gains,
)
from ecrd.fixtures import DRESS_SENTENCE, dress_case, peak_vs_sustained_case, price_tag_case

from conftest import fixed_clock


def run(fx, mode="ecrd", decider=None, **cfg):
    if mode == "ecrd" and decider is None:
        decider = fx.decider()
    eng = Engine(fx.generator, fx.config(mode=mode, **cfg), scorer=fx.scorer, decider=decider, clock=fixed_clock)
    return eng.decode(fx.prompt_ids, "img-0"), decider


def words(fx, trace):
    return [fx.generator.surface(t) for t in trace.tokens]


def test_dress_case_control_flow():
    fx = dress_case()
    trace, decider = run(fx)
    s = fx.generator.surface
    fired = [rec for rec in trace.steps if rec.fired]
    assert len(fired) == 1
    step = fired[0]
    assert {s(t) for t, _ in step.r} == {"blue", "red"}
    assert step.margin <= 0.08
    # base leans red, evidence leans blue
    assert s(step.base_topk[0][0]) == "red"
    assert s(max(step.r, key=lambda p: p[1])[0]) == "blue"
    assert s(step.committed) == "blue" and step.committed_by == "decider"
    assert trace.pool.N == 2 and trace.pool[1].text == DRESS_SENTENCE
    assert trace.pool[1].provenance.step == step.step
    assert trace.pool[1].annotations[0].label == "dress"
    assert trace.decider_calls == 1 and decider.calls == 1
    # later steps read the grown pool, and the new sentence flips "visible" to "hidden"
    later = [rec for rec in trace.steps if rec.step > step.step and rec.pooled_means]
    assert all(rec.pool_size == 2 for rec in later)
    flip = next(rec for rec in later if rec.knee_index > 1)
    assert s(flip.base_topk[0][0]) == "visible" and s(flip.committed) == "hidden" and not flip.fired
    assert trace.final_text == "It is blue , partially hidden by the tree ."


def test_dress_case_without_decider_drifts():
    fx = dress_case()
    ecrd, _ = run(fx)
    sup, _ = run(fx, mode="supervisor_only")
    assert words(fx, sup)[:2] == words(fx, ecrd)[:2]
    assert words(fx, sup)[2] == "red" and words(fx, ecrd)[2] == "blue"
    assert sup.final_text == "It is red and bright ."


def test_decider_request_excludes_prompt():
    fx = dress_case()
    trace, decider = run(fx)
    req = decider.requests[0]
    assert req.prefix_tail == ("It", "is")
    assert req.context_id == "img-0"
    assert {s for _, s in req.candidates} == {"blue", "red"}


def test_price_case_supervisor_finishes_answer():
    fx = price_tag_case()
    trace, decider = run(fx)
    assert trace.final_text == "The number is 300 ."
    assert decider.calls == 1 and trace.decider_calls == 1
    s = fx.generator.surface
    three = next(rec for rec in trace.steps if rec.fired)
    assert s(three.committed) == "3" and s(three.base_topk[0][0]) == "5"
    assert s(max(three.r, key=lambda p: p[1])[0]) == "3"
    zeros = trace.steps[three.step + 1: three.step + 3]
    assert [s(rec.committed) for rec in zeros] == ["0", "0"]
    assert all(rec.committed_by == "mixture" and not rec.fired and s(rec.base_topk[0][0]) == "5" for rec in zeros)


def test_base_greedy_follows_argmax_chain():
    vocab = ["<eos>", "a", "b", "c"]
    gen = TabularModel(vocab, [1, 0, 0, 0], {(1,): {2: 1.0}, (2,): {3: 1.0}, (3,): {0: 1.0}})
    trace = decode([1], None, DecodeConfig(mode="base_greedy", stop_tokens=(0,)), gen)
    assert trace.tokens == [2, 3, 0]
    assert trace.final_text == "b c"
    assert trace.decider_calls == 0 and trace.pool.N == 0


def test_delta_zero_never_triggers_and_matches_supervisor_only():
    for fx in (dress_case(), price_tag_case(), peak_vs_sustained_case()):
        ecrd, _ = run(fx, delta=0.0, decider=ScriptedDecider([]))
        sup, _ = run(fx, mode="supervisor_only")
        assert ecrd.totals["triggers"] == 0 and ecrd.decider_calls == 0
        assert ecrd.tokens == sup.tokens


def test_vdgd_and_ecrd_disagree_on_peak_fixture():
    fx = peak_vs_sustained_case()
    v, _ = run(fx, mode="vdgd_baseline")
    e, _ = run(fx, decider=ScriptedDecider([]))
    assert v.final_text == "a" and e.final_text == "b"
    assert e.decider_calls == 0


def test_invalid_verdict_falls_back_to_mixture():
    fx = dress_case()
    bad = ScriptedDecider([{"chosen": "green", "sentence": "It is green."}])
    trace, _ = run(fx, decider=bad)
    rec = next(r for r in trace.steps if r.fired)
    assert rec.verdict_violation and rec.verdict_id is None
    assert rec.committed == rec.p_mix_topk[0][0] and rec.committed_by == "mixture"
    assert trace.pool.N == 1 and trace.decider_calls == 0


def test_decider_failure_aborts_with_partial_trace():
    fx = dress_case()
    trace, _ = run(fx, decider=ScriptedDecider([]))
    assert trace.aborted and "exhausted" in trace.error
    assert len(trace.steps) == 2


def test_backend_failure_aborts():
    class Failing(TabularModel):
        def next_distribution(self, prefix, ctx=None):
            if len(prefix) > 12:
                raise TransportError("gone")
            return super().next_distribution(prefix, ctx)

    fx = dress_case()
    gen = Failing(fx.generator.vocab, fx.generator.to_dict()["default"], fx.generator._entries_raw)
    trace = Engine(gen, fx.config(mode="supervisor_only"), scorer=fx.scorer).decode(fx.prompt_ids)
    assert trace.aborted and trace.error.startswith("TransportError")


def test_mode_requirements():
    fx = dress_case()
    with pytest.raises(ValueError, match="decider"):
        Engine(fx.generator, fx.config(mode="ecrd"))
    Engine(fx.generator, fx.config(mode="vdgd_baseline"))
    eng = Engine(fx.generator, DecodeConfig(mode="supervisor_only"))
    with pytest.raises(ValueError, match="global description"):
        eng.decode(fx.prompt_ids)


@pytest.mark.parametrize("kw", [dict(delta=1.5), dict(delta=-0.1), dict(max_tokens=0), dict(mode="beam")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DecodeConfig(**kw)


def test_backend_generated_description():
    vocab = ["<eos>", "Describe", "the", "image", ".", "a", "cat", "Q"]
    gen = TabularModel(vocab, [1] + [0] * 7, {(4,): {5: 1.0}, (5,): {6: 1.0}, (6,): {0: 1.0}})
    cfg = DecodeConfig(mode="supervisor_only", describe_with_backend=True, stop_tokens=(0,), max_tokens=3)
    trace = Engine(gen, cfg).decode([7])
    assert trace.pool[0].text == "a cat" and trace.pool[0].provenance.kind == "global_description"


def test_timings_recorded():
    fx = dress_case()
    trace = Engine(fx.generator, fx.config(), scorer=fx.scorer, decider=fx.decider()).decode(fx.prompt_ids)
    for rec in trace.steps:
        assert set(rec.timings) == {"base_ms", "scoring_ms", "decider_ms"}
        assert all(v >= 0 for v in rec.timings.values())
    assert trace.totals["wall_time"] > 0


def test_trace_roundtrip_bit_exact(tmp_path):
    fx = dress_case()
    trace = Engine(fx.generator, fx.config(), scorer=fx.scorer, decider=fx.decider()).decode(fx.prompt_ids, "img")
    p = tmp_path / "t.jsonl"
    trace.write(p)
    again = DecodeTrace.read(p)
    assert again.to_jsonl() == p.read_text()
    assert again.steps == trace.steps and again.pool == trace.pool and again.config == trace.config
    lines = p.read_text().splitlines()
    assert json.loads(lines[0])["kind"] == "header" and json.loads(lines[-1])["kind"] == "footer"
    assert len(lines) == len(trace.steps) + 2


def test_trace_reader_rejects_garbage():
    with pytest.raises(ValueError):
        DecodeTrace.from_jsonl('{"kind": "step"}\n')


# replay ----------------------------------------------------------------------


def frozen(margins, knees):
    return [StepRecord(i, "ecrd", 0, "mixture", [[0, 0.5]], knee_index=k, margin=m)
            for i, (m, k) in enumerate(zip(margins, knees))]


@pytest.mark.parametrize("delta, count", [(0.08, 1), (1.0, 2), (0.0, 0)])
def test_replay_examples(delta, count):
    rep = replay(frozen([0.30, 0.02, 0.10], [1, 2, 2]), delta)
    assert rep.triggers == count
    if delta == 0.08:
        assert rep.fired_steps == (1,)


def test_replay_needs_margins():
    fx = dress_case()
    trace, _ = run(fx, mode="base_greedy")
    with pytest.raises(ValueError, match="knee_index"):
        replay(trace, 0.08)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 4)), max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_replay_monotone(steps, d1, d2):
    lo, hi = sorted((d1, d2))
    recs = frozen([m for m, _ in steps], [k for _, k in steps])
    assert replay(recs, lo).triggers <= replay(recs, hi).triggers


# properties on random tabular worlds -------------------------------------------


def random_world(rng, V=7, uniform_scoring=False):
    vocab = ["<eos>"] + [f"w{chr(96 + i)}" for i in range(1, V)]
    entries = {}
    for t in range(1, V):
        n = int(rng.integers(1, V))
        ids = rng.choice(np.arange(V), size=n, replace=False)
        p = rng.dirichlet(np.full(n, 0.5))
        entries[(int(t),)] = {int(i): float(x) for i, x in zip(ids, p)}
    gen = TabularModel(vocab, list(rng.dirichlet(np.ones(V))), entries)
    if uniform_scoring:
        scorer = TabularModel(vocab, [1.0 / V] * V)
    else:
        scorer = TabularModel(vocab, list(rng.dirichlet(np.ones(V))),
                              {(int(t),): dict(enumerate(map(float, rng.dirichlet(np.ones(V))))) for t in range(V)})
    return gen, scorer


def test_uninformative_evidence_preserves_greedy(rng):
    for _ in range(50):
        gen, scorer = random_world(rng, uniform_scoring=True)
        cfg = dict(global_description="wa wb wc", stop_tokens=(0,), max_tokens=10)
        g = decode([1], None, DecodeConfig(mode="base_greedy", **cfg), gen, scorer=scorer)
        s = decode([1], None, DecodeConfig(mode="supervisor_only", **cfg), gen, scorer=scorer)
        assert g.tokens == s.tokens


def test_step_records_self_consistent(rng):
    for _ in range(50):
        gen, scorer = random_world(rng)
        trace = decode([1], None, DecodeConfig(mode="supervisor_only", global_description="wb wc wa wd",
                                               stop_tokens=(0,), max_tokens=10, trace_topk=3), gen, scorer=scorer)
        for rec in trace.steps:
            check_step_integrity(rec)


def test_integrity_check_catches_tampering():
    fx = dress_case()
    trace, _ = run(fx, mode="supervisor_only")
    rec = next(r for r in trace.steps if r.knee_index > 1)
    rec.p_mix_topk[0][1] += 1e-3
    with pytest.raises(AssertionError):
        check_step_integrity(rec)


def test_concurrent_streams_are_independent():
    fx = price_tag_case()
    eng = Engine(fx.generator, fx.config(mode="supervisor_only"), scorer=fx.scorer, clock=fixed_clock)
    ref = eng.decode(fx.prompt_ids).to_jsonl()
    with ThreadPoolExecutor(4) as ex:
        outs = list(ex.map(lambda _: eng.decode(fx.prompt_ids).to_jsonl(), range(8)))
    assert all(o == ref for o in outs)


def test_tag_gains():
    fx = price_tag_case()
    trace, _ = run(fx)
    three = next(r for r in trace.steps if r.fired).step
    tagged = tag_gains(trace, answer_start=three)
    tags = [r.gain_tag for r in tagged.steps]
    assert tags[three] == "decider_direct_answer"
    assert tags[three + 1] == tags[three + 2] == "supervisor_reweight"
    assert tag_gains(trace).steps[three].gain_tag == "decider_midchain_grounding"
    assert trace.steps[0].gain_tag is None
