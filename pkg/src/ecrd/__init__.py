"""Evidence-constrained reweighting decoding.

A training-free decoding loop that reweights each next-token choice with a
growing pool of textual evidence and calls an external decider when the
reweighted choice stays ambiguous.
"""

from ecrd.dist import CandidateSet, TokenDistribution, knee_truncate, sort_descending
from ecrd.evidence import (
    Evidence,
    EvidencePool,
    EvidenceScorer,
    Provenance,
    RegionAnnotation,
    evidence_distribution,
    pooled_score,
    prefix_mean_support,
    vdgd_min_kl,
)
from ecrd.supervisor import MixtureOutcome, TriggerDecision, decide_trigger, mass_match, negotiate
from ecrd.backends import RemoteModelClient, TabularModel
from ecrd.decider import DeciderRequest, DeciderVerdict, RemoteDecider, ScriptedDecider, build_request
from ecrd.engine import DecodeConfig, DecodeTrace, Engine, StepRecord, decode, replay
from ecrd.latency import LatencyModel, fit_latency_model

__version__ = "0.1.0"
