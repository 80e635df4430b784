"""Mass matching, the negotiated mixture and the decider trigger."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from ecrd.dist import CandidateSet, DistributionError, TokenDistribution, sort_descending

DEFAULT_DELTA = 0.08

# trigger reasons
FIRED = "uncertain_margin"
KNEE_SINGLETON = "knee_singleton"
MARGIN_ABOVE_DELTA = "margin_above_delta"
COMMITTED_CONFIDENT = "committed_confident"


@dataclass(frozen=True)
class MixtureOutcome:
    p_mix: TokenDistribution
    alpha: float
    margin: float
    raw_mass: float
    top1: tuple[int, float]
    top2: tuple[int, float] | None
    unnormalized: dict[int, float]


@dataclass(frozen=True)
class TriggerDecision:
    fired: bool
    reason: str
    delta: float


def mass_match(r: Mapping[int, float], cands: CandidateSet) -> dict[int, float]:
    """Rescale ``r`` on the candidate set so it carries the base model's candidate mass."""
    m = cands.covered_mass
    if m <= 0.0:
        raise DistributionError("degenerate candidate mass")
    z = sum(r.get(t, 0.0) for t in cands.ids)
    if z <= 0.0:
        raise DistributionError("evidence distribution has no mass on the candidates")
    return {t: r.get(t, 0.0) * (m / z) for t in cands.ids}


def negotiate(base: TokenDistribution, r_tilde: Mapping[int, float], cands: CandidateSet) -> MixtureOutcome:
    """Mix base and mass-matched evidence with weight alpha = base top-1 probability.

    The raw mixture only sums to ``covered + alpha * (1 - covered)``; it is
    renormalized over the full vocabulary (residual mass included) and the
    margin is read from the normalized distribution.
    """
    ranked = sort_descending(base)
    alpha = ranked[0][1]
    in_c = set(cands.ids)
    if not in_c <= base.probs.keys():
        raise DistributionError("candidate set not drawn from the base distribution")
    u = {}
    for tok, p in base.probs.items():
        u[tok] = alpha * p + (1.0 - alpha) * r_tilde.get(tok, 0.0) if tok in in_c else alpha * p
    residual = alpha * base.residual_mass
    raw_mass = sum(u.values()) + residual
    p_mix = TokenDistribution({t: v / raw_mass for t, v in u.items()}, residual / raw_mass, base.vocab_size)
    mix_ranked = sort_descending(p_mix)
    top1 = mix_ranked[0]
    if len(mix_ranked) > 1:
        top2 = mix_ranked[1]
        margin = top1[1] - top2[1]
    else:
        top2 = None
        margin = top1[1]
    return MixtureOutcome(p_mix, alpha, margin, raw_mass, top1, top2, u)


def decide_trigger(outcome: MixtureOutcome | float, cands: CandidateSet | int, delta: float = DEFAULT_DELTA) -> TriggerDecision:
    """Fire when the knee kept more than one candidate and the mixture margin is within ``delta``.

    Accepts the full objects or the bare (margin, knee index) pair, which is
    what trace replay has on hand.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    margin = outcome.margin if isinstance(outcome, MixtureOutcome) else float(outcome)
    k = cands.knee_index if isinstance(cands, CandidateSet) else int(cands)
    if k <= 1:
        return TriggerDecision(False, KNEE_SINGLETON, delta)
    if margin <= delta:
        return TriggerDecision(True, FIRED, delta)
    return TriggerDecision(False, MARGIN_ABOVE_DELTA, delta)
