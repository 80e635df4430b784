"""The external decider consulted on ambiguous steps.

A request carries the conditioning handle, the tail of the generated text
and the candidate tokens. There is deliberately no slot for the user's
question: the decider resolves the current step only.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from ecrd.dist import CandidateSet
from ecrd.evidence import RegionAnnotation

log = logging.getLogger(__name__)

DEFAULT_TAIL = 64


class DeciderError(RuntimeError):
    retryable = False


class DeciderTimeout(DeciderError):
    retryable = True


class InvalidVerdict(ValueError):
    def __init__(self, message: str, verdict: "DeciderVerdict"):
        super().__init__(message)
        self.verdict = verdict


@dataclass(frozen=True)
class DeciderRequest:
    context_id: str | None
    prefix_tail: tuple[str, ...]
    candidates: tuple[tuple[int, str], ...]

    @property
    def candidate_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.candidates)

    def to_wire(self) -> dict:
        return {
            "context_id": self.context_id,
            "prefix_tail": list(self.prefix_tail),
            "candidates": [{"id": i, "surface": s} for i, s in self.candidates],
        }


@dataclass(frozen=True)
class DeciderVerdict:
    chosen: int
    sentence: str
    annotations: tuple[RegionAnnotation, ...] = ()
    latency: float = 0.0

    def to_wire(self) -> dict:
        return {
            "chosen_id": self.chosen,
            "sentence": self.sentence,
            "annotations": [a.to_dict() for a in self.annotations],
        }


class Decider(Protocol):
    def decide(self, req: DeciderRequest) -> DeciderVerdict: ...


def build_request(generated: Sequence[int], cands: CandidateSet, surface: Callable[[int], str],
                  context_id: str | None = None, tail: int = DEFAULT_TAIL) -> DeciderRequest:
    """Request for the current step from the tokens generated so far (prompt excluded)."""
    if tail < 0:
        raise ValueError("tail length must be non-negative")
    window = list(generated)[-tail:] if tail else []
    return DeciderRequest(
        context_id,
        tuple(surface(t) for t in window),
        tuple((t, surface(t)) for t in cands.ids),
    )


def validate_verdict(verdict: DeciderVerdict, req: DeciderRequest) -> DeciderVerdict:
    if verdict.chosen not in req.candidate_ids:
        raise InvalidVerdict(f"decider chose token {verdict.chosen} outside the candidate set", verdict)
    if not verdict.sentence.strip():
        raise InvalidVerdict("decider returned an empty evidence sentence", verdict)
    return verdict


def _annotations(raw) -> tuple[RegionAnnotation, ...]:
    return tuple(RegionAnnotation.from_dict(a) for a in (raw or []))


class ScriptedDecider:
    """Replays a fixed list of verdicts, one per call.

    Entries name the chosen token either by ``chosen_id`` or by surface under
    ``chosen``; a surface that is not among the request's candidates yields
    an out-of-set verdict (id -1) so the engine's fallback can be exercised.
    """

    def __init__(self, script: Sequence[Mapping], latency: float = 0.0):
        self.script = [dict(s) for s in script]
        self.latency = latency
        self.calls = 0
        self.requests: list[DeciderRequest] = []

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedDecider":
        data = json.loads(Path(path).read_text())
        if isinstance(data, Mapping):
            data = data["verdicts"]
        return cls(data)

    def decide(self, req: DeciderRequest) -> DeciderVerdict:
        if self.calls >= len(self.script):
            raise DeciderError(f"script exhausted after {self.calls} verdicts")
        entry = self.script[self.calls]
        self.calls += 1
        self.requests.append(req)
        if "chosen_id" in entry:
            chosen = int(entry["chosen_id"])
        else:
            by_surface = {s: i for i, s in req.candidates}
            chosen = by_surface.get(entry["chosen"], -1)
        return DeciderVerdict(chosen, entry["sentence"], _annotations(entry.get("annotations")),
                              float(entry.get("latency", self.latency)))


class RemoteDecider:
    """HTTP decider: POST the request's wire form, read ``chosen_id``/``sentence``/``annotations``."""

    def __init__(self, endpoint: str, timeout: float = 30.0, transport: httpx.BaseTransport | None = None,
                 headers: Mapping[str, str] | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self._client = httpx.Client(timeout=timeout, transport=transport, headers=dict(headers or {}))
        self.calls = 0

    def close(self) -> None:
        self._client.close()

    def decide(self, req: DeciderRequest) -> DeciderVerdict:
        self.calls += 1
        start = time.perf_counter()
        try:
            resp = self._client.post(self.endpoint, json=req.to_wire())
        except httpx.TimeoutException as e:
            raise DeciderTimeout(f"decider timed out after {self.timeout}s") from e
        except httpx.TransportError as e:
            raise DeciderError(f"decider transport failure: {e}") from e
        if resp.status_code != 200:
            raise DeciderError(f"decider returned status {resp.status_code}")
        try:
            payload = resp.json()
            chosen = payload["chosen_id"]
            sentence = payload["sentence"]
            annotations = _annotations(payload.get("annotations"))
        except (ValueError, KeyError, TypeError) as e:
            raise DeciderError(f"malformed decider response: {e}") from e
        if not isinstance(chosen, int) or not isinstance(sentence, str):
            raise DeciderError("decider response has wrong field types")
        return DeciderVerdict(chosen, sentence, annotations, time.perf_counter() - start)
