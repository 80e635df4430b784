import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecrd.dist import CandidateSet, DistributionError, TokenDistribution, knee_truncate
from ecrd.supervisor import (
    DEFAULT_DELTA,
    FIRED,
    KNEE_SINGLETON,
    MARGIN_ABOVE_DELTA,
    decide_trigger,
    mass_match,
    negotiate,
)

import oracles

A, B, C = 0, 1, 2


def cset(*pairs):
    return CandidateSet(tuple(pairs), len(pairs))


@pytest.mark.parametrize(
    "r, pairs, expected",
    [
        ({A: 0.75, B: 0.25}, [(A, 0.5), (B, 0.3)], {A: 0.6, B: 0.2}),
        ({A: 0.75, B: 0.25}, [(A, 0.75), (B, 0.25)], {A: 0.75, B: 0.25}),
        ({A: 1.0}, [(A, 0.7)], {A: 0.7}),
    ],
)
def test_mass_match(r, pairs, expected):
    out = mass_match(r, cset(*pairs))
    assert out == pytest.approx(expected, abs=1e-12)
    assert sum(out.values()) == pytest.approx(cset(*pairs).covered_mass, abs=1e-9)


def test_mass_match_degenerate():
    with pytest.raises(DistributionError, match="degenerate candidate mass"):
        mass_match({A: 1.0}, cset((A, 0.0)))


def test_negotiate_worked_example():
    base = TokenDistribution({A: 0.4, B: 0.35, C: 0.25})
    cs = knee_truncate(base)
    assert cs.knee_index == 2
    out = negotiate(base, {A: 0.15, B: 0.60}, cs)
    assert out.alpha == 0.4
    assert out.unnormalized == pytest.approx({A: 0.25, B: 0.50, C: 0.10}, abs=1e-12)
    assert out.raw_mass == pytest.approx(0.85, abs=1e-12)
    assert out.p_mix.probs == pytest.approx({A: 0.25 / 0.85, B: 0.5 / 0.85, C: 0.1 / 0.85}, abs=1e-12)
    assert out.top1[0] == B and out.top2[0] == A
    assert out.margin == pytest.approx(0.2941, abs=1e-4)
    assert decide_trigger(out, cs, 0.08).reason == MARGIN_ABOVE_DELTA


def test_one_hot_base_is_fixed_point():
    base = TokenDistribution({A: 1.0})
    cs = knee_truncate(base)
    out = negotiate(base, mass_match({A: 1.0}, cs), cs)
    assert out.alpha == 1.0
    assert out.p_mix == base
    assert out.margin == 1.0


def test_single_token_margin_never_triggers():
    base = TokenDistribution({A: 0.6}, 0.4)
    cs = knee_truncate(base)
    out = negotiate(base, {A: 0.6}, cs)
    assert out.top2 is None and out.margin == out.top1[1]
    assert not decide_trigger(out, cs, 0.99).fired


def test_trigger_examples():
    assert decide_trigger(0.2941, 2, 0.08).reason == MARGIN_ABOVE_DELTA
    d = decide_trigger(0.02, 2, 0.08)
    assert d.fired and d.reason == FIRED and d.delta == 0.08
    d = decide_trigger(0.0, 1, 0.08)
    assert not d.fired and d.reason == KNEE_SINGLETON
    assert DEFAULT_DELTA == 0.08


def test_trigger_rejects_bad_delta():
    with pytest.raises(ValueError):
        decide_trigger(0.1, 2, 1.5)


@given(st.floats(0, 1), st.integers(1, 6), st.floats(0, 1), st.floats(0, 1))
def test_trigger_monotone_in_delta(margin, k, d1, d2):
    lo, hi = sorted((d1, d2))
    if decide_trigger(margin, k, lo).fired:
        assert decide_trigger(margin, k, hi).fired


def random_step(rng, V=8):
    n = int(rng.integers(1, V + 1))
    w = rng.dirichlet(np.full(n + 1, 0.6))
    residual = float(w[-1]) if rng.random() < 0.5 else 0.0
    w = w[:n] / w[:n].sum() * (1 - residual)
    probs = {int(t): float(p) for t, p in zip(rng.permutation(V)[:n], w)}
    residual = max(0.0, 1.0 - sum(probs.values())) if residual else 0.0
    base = TokenDistribution(probs, residual, V)
    cs = knee_truncate(base)
    r = rng.dirichlet(np.ones(cs.knee_index))
    return base, cs, {t: float(p) for t, p in zip(cs.ids, r)}


def brute_mix(base, cs, r):
    C = set(cs.ids)
    mass_p = sum(base.probs[u] for u in C)
    r_tilde = {w: r[w] * mass_p / sum(r.values()) for w in C}
    alpha = max(base.probs.values())
    u = {w: (alpha * p + (1 - alpha) * r_tilde[w]) if w in C else alpha * p for w, p in base.probs.items()}
    total = sum(u.values()) + alpha * base.residual_mass
    return u, {w: v / total for w, v in u.items()}


def test_negotiate_matches_brute_force(rng):
    for _ in range(10_000):
        base, cs, r = random_step(rng)
        out = negotiate(base, mass_match(r, cs), cs)
        u, p_mix = brute_mix(base, cs, r)
        for w in base.probs:
            assert abs(out.unnormalized[w] - u[w]) <= 1e-9
            assert abs(out.p_mix.probs[w] - p_mix[w]) <= 1e-9
        # candidate mass is conserved before normalization
        assert abs(sum(out.unnormalized[w] for w in cs.ids) - cs.covered_mass) <= 1e-9
        # normalization never reorders
        order_u = sorted(u, key=lambda t: (-out.unnormalized[t], t))
        order_p = sorted(u, key=lambda t: (-out.p_mix.probs[t], t))
        assert order_u == order_p
        assert abs(sum(out.p_mix.probs.values()) + out.p_mix.residual_mass - 1) <= 1e-6
        assert out.margin >= 0


def test_evidence_proportional_to_base_is_fixed_point_on_candidates(rng):
    for _ in range(2000):
        base, cs, _ = random_step(rng)
        r = {t: base.probs[t] / cs.covered_mass for t in cs.ids}
        out = negotiate(base, mass_match(r, cs), cs)
        for t in cs.ids:
            assert abs(out.unnormalized[t] - base.probs[t]) <= 1e-12
            assert abs(out.p_mix.probs[t] / sum(out.p_mix.probs[u] for u in cs.ids) - base.probs[t] / cs.covered_mass) <= 1e-9
        if abs(cs.covered_mass - 1.0) < 1e-15:
            for t, p in base.probs.items():
                assert abs(out.p_mix.probs[t] - p) <= 1e-9


def test_trigger_grid_exhaustive():
    margins = [0.0, 0.01, 0.02, 0.0799, 0.08, 0.0801, 0.3, 1.0]
    deltas = [0.0, 0.02, 0.08, 0.16, 1.0]
    for k, m, d in itertools.product([1, 2, 3, 5, 16], margins, deltas):
        assert decide_trigger(m, k, d).fired == oracles.trigger(k, m, d)
