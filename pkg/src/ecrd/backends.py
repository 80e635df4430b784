"""Next-token and evidence-conditional providers.

Two roles are kept apart even when one model serves both: a generation
backend produces the next-token distribution of the decode, a scoring
backend answers ``p(w | evidence prefix)`` queries for the supervisor.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import httpx

from ecrd.dist import DistributionError, TokenDistribution

log = logging.getLogger(__name__)

MISSING_TOKEN_FLOOR = 1e-6
DEFAULT_TIMEOUT = 30.0


class BackendError(RuntimeError):
    """Base class for provider failures. ``retryable`` tells callers whether a retry could help."""

    retryable = False

    def __init__(self, message: str, *, attempts: int = 1, endpoint: str | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.endpoint = endpoint


class BackendTimeout(BackendError):
    retryable = True


class TransportError(BackendError):
    retryable = True


class MalformedResponse(BackendError):
    pass


class TokenizationError(BackendError):
    pass


@dataclass(frozen=True)
class Capabilities:
    max_top_k: int | None
    concurrent: bool
    tokenizer: str


@runtime_checkable
class GenerationBackend(Protocol):
    capabilities: Capabilities

    def next_distribution(self, prefix: Sequence[int], ctx: str | None = None) -> TokenDistribution: ...

    def tokenize(self, text: str) -> list[int]: ...

    def detokenize(self, tokens: Sequence[int]) -> str: ...

    def surface(self, token: int) -> str: ...


@runtime_checkable
class ScoringBackend(Protocol):
    capabilities: Capabilities

    def score_conditionals(
        self, tokens: Iterable[int], prefix: Sequence[int], ctx: str | None = None
    ) -> dict[int, float]: ...

    def tokenize(self, text: str) -> list[int]: ...


def generate_greedy(backend: GenerationBackend, prompt: Sequence[int], ctx: str | None,
                    max_tokens: int, stop: Iterable[int] = ()) -> list[int]:
    """Plain greedy continuation, used for backend-written global descriptions."""
    stop = set(stop)
    out: list[int] = []
    for _ in range(max_tokens):
        tok = backend.next_distribution(list(prompt) + out, ctx).argmax()
        if tok in stop:
            break
        out.append(tok)
    return out


# digits split one per token, words and punctuation stay whole
_TOKEN_RE = re.compile(r"\d|[^\W\d_]+|_+|[^\w\s]")


class TabularModel:
    """Deterministic lookup-table language model.

    Contexts are matched exactly, then by longest suffix, then fall back to
    ``default``. The conditioning context handle is ignored. Tokens not
    enumerated in a stored distribution share its residual mass evenly.
    """

    def __init__(self, vocab: Sequence[str], default: Sequence[float],
                 entries: Mapping[tuple[int, ...], Mapping[int, float]] | None = None,
                 name: str = "tabular"):
        self.vocab = list(vocab)
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("duplicate vocabulary surfaces")
        self._ids = {s: i for i, s in enumerate(self.vocab)}
        if len(default) != len(self.vocab):
            raise ValueError("default distribution must list one probability per vocabulary entry")
        self._default_raw = {i: float(p) for i, p in enumerate(default)}
        self.default = self._make_dist(self._default_raw)
        self.entries: dict[tuple[int, ...], TokenDistribution] = {}
        self._entries_raw: dict[tuple[int, ...], dict[int, float]] = {}
        self._longest = 0
        for ctx, probs in (entries or {}).items():
            self.add_entry(ctx, probs)
        self.capabilities = Capabilities(max_top_k=None, concurrent=True, tokenizer=f"{name}:{len(self.vocab)}")

    def _make_dist(self, probs: Mapping[int, float]) -> TokenDistribution:
        for t in probs:
            if not 0 <= t < len(self.vocab):
                raise DistributionError(f"token id {t} outside vocabulary")
        total = sum(probs.values())
        return TokenDistribution(dict(probs), max(1.0 - total, 0.0), len(self.vocab))

    def add_entry(self, context: Sequence[int], probs: Mapping[int, float]) -> None:
        key = tuple(int(t) for t in context)
        raw = {int(k): float(v) for k, v in probs.items()}
        self.entries[key] = self._make_dist(raw)
        self._entries_raw[key] = raw
        self._longest = max(self._longest, len(key))

    # tokenizer -------------------------------------------------------------

    def token_id(self, surface: str) -> int:
        try:
            return self._ids[surface]
        except KeyError:
            if "<unk>" in self._ids:
                return self._ids["<unk>"]
            raise TokenizationError(f"surface {surface!r} not in vocabulary") from None

    def tokenize(self, text: str) -> list[int]:
        return [self.token_id(piece) for piece in _TOKEN_RE.findall(text)]

    def surface(self, token: int) -> str:
        return self.vocab[token]

    def detokenize(self, tokens: Sequence[int]) -> str:
        out = ""
        prev = None
        for t in tokens:
            s = self.vocab[t]
            if out and not (prev is not None and prev.isdigit() and s.isdigit()):
                out += " "
            out += s
            prev = s
        return out

    # lookups ---------------------------------------------------------------

    def lookup(self, prefix: Sequence[int]) -> TokenDistribution:
        prefix = tuple(prefix)
        if not prefix:
            return self.entries.get((), self.default)
        for n in range(min(len(prefix), self._longest), 0, -1):
            dist = self.entries.get(prefix[-n:])
            if dist is not None:
                return dist
        return self.default

    def next_distribution(self, prefix: Sequence[int], ctx: str | None = None) -> TokenDistribution:
        return self.lookup(prefix)

    def score_conditionals(self, tokens: Iterable[int], prefix: Sequence[int],
                           ctx: str | None = None) -> dict[int, float]:
        dist = self.lookup(prefix)
        unlisted = len(self.vocab) - len(dist.probs)
        share = dist.residual_mass / unlisted if unlisted > 0 else 0.0
        return {t: dist.probs.get(t, share) for t in tokens}

    # file format -----------------------------------------------------------

    def to_dict(self) -> dict:
        default = [self._default_raw[i] for i in range(len(self.vocab))]
        return {
            "vocab": list(self.vocab),
            "default": default,
            "entries": [
                {"context": list(ctx), "probs": {str(t): p for t, p in probs.items()}}
                for ctx, probs in self._entries_raw.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping, name: str = "tabular") -> "TabularModel":
        entries = {
            tuple(e["context"]): {int(t): float(p) for t, p in e["probs"].items()}
            for e in data.get("entries", [])
        }
        return cls(data["vocab"], data["default"], entries, name=name)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "TabularModel":
        return cls.from_dict(json.loads(Path(path).read_text()), name=Path(path).stem)

    def __eq__(self, other):
        return isinstance(other, TabularModel) and self.to_dict() == other.to_dict()


class CountingBackend:
    """Wraps a scoring backend and counts calls and per-token conditional queries."""

    def __init__(self, inner: ScoringBackend):
        self.inner = inner
        self.capabilities = inner.capabilities
        self.calls = 0
        self.queries = 0
        self._lock = threading.Lock()

    def score_conditionals(self, tokens, prefix, ctx=None):
        tokens = list(tokens)
        with self._lock:
            self.calls += 1
            self.queries += len(tokens)
        return self.inner.score_conditionals(tokens, prefix, ctx)

    def reset(self) -> None:
        self.calls = self.queries = 0

    def __getattr__(self, name):
        return getattr(self.inner, name)


def parse_logprob_response(payload: Mapping) -> dict[int, float]:
    """Native wire response ``{"tokens": [...], "logprobs": [...]}`` to probabilities."""
    try:
        tokens = payload["tokens"]
        logprobs = payload["logprobs"]
    except (KeyError, TypeError):
        raise MalformedResponse("response lacks 'tokens'/'logprobs'") from None
    if not isinstance(tokens, list) or not isinstance(logprobs, list) or len(tokens) != len(logprobs):
        raise MalformedResponse("'tokens' and 'logprobs' must be equal-length lists")
    out: dict[int, float] = {}
    for t, lp in zip(tokens, logprobs):
        if isinstance(t, bool) or not isinstance(t, int) or not isinstance(lp, (int, float)):
            raise MalformedResponse(f"bad entry ({t!r}, {lp!r})")
        if lp > 1e-9 or math.isnan(lp):
            raise MalformedResponse(f"logprob {lp} is not a log-probability")
        out[t] = math.exp(min(lp, 0.0))
    return out


def completions_to_native(payload: Mapping, vocab: Mapping[str, int]) -> dict:
    """Translate an OpenAI-style completions response with ``logprobs`` into the native shape.

    Only the first choice and first generated position are read.
    """
    try:
        top = payload["choices"][0]["logprobs"]["top_logprobs"][0]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("completions response lacks choices[0].logprobs.top_logprobs[0]") from None
    tokens, logprobs = [], []
    for surface, lp in top.items():
        if surface not in vocab:
            log.debug("dropping unknown surface %r", surface)
            continue
        tokens.append(vocab[surface])
        logprobs.append(lp)
    return {"tokens": tokens, "logprobs": logprobs}


class RemoteModelClient:
    """HTTP client for a remote next-token provider.

    Native wire: POST ``{"prefix_tokens", "context_id", "top_k", "no_cache"}``
    and receive ``{"tokens", "logprobs"}``. With ``wire="completions"`` the
    request and response follow the completions-with-logprobs convention and
    ``vocab`` maps returned surfaces back to ids.
    """

    def __init__(self, endpoint: str, *, top_k: int = 20, timeout: float = DEFAULT_TIMEOUT,
                 max_retries: int = 2, backoff: float = 0.5, auth_env: str | None = None,
                 vocab: Sequence[str] | None = None, wire: str = "native", model: str | None = None,
                 no_cache: bool = False, transport: httpx.BaseTransport | None = None,
                 floor: float = MISSING_TOKEN_FLOOR):
        if wire not in ("native", "completions"):
            raise ValueError(f"unknown wire format {wire!r}")
        if wire == "completions" and vocab is None:
            raise ValueError("completions wire needs a vocabulary to map surfaces to ids")
        self.endpoint = endpoint
        self.top_k = top_k
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.auth_env = auth_env
        self.vocab = list(vocab) if vocab is not None else None
        self._ids = {s: i for i, s in enumerate(self.vocab)} if self.vocab else {}
        self.wire = wire
        self.model = model
        self.no_cache = no_cache
        self.floor = floor
        headers = {}
        if auth_env:
            token = os.environ.get(auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            else:
                log.warning("credential variable %s is not set", auth_env)
        self._client = httpx.Client(
            timeout=timeout, headers=headers, transport=transport,
            limits=httpx.Limits(max_connections=16, max_keepalive_connections=8),
        )
        self.capabilities = Capabilities(max_top_k=top_k, concurrent=True, tokenizer=f"remote:{endpoint}")

    def close(self) -> None:
        self._client.close()

    def _post(self, url: str, body: dict) -> dict:
        last: BackendError | None = None
        for attempt in range(1, self.max_retries + 2):
            try:
                resp = self._client.post(url, json=body)
            except httpx.TimeoutException as e:
                last = BackendTimeout(f"timeout after {self.timeout}s: {e}", attempts=attempt, endpoint=url)
            except httpx.TransportError as e:
                last = TransportError(f"transport failure: {e}", attempts=attempt, endpoint=url)
            else:
                if resp.status_code >= 500:
                    last = TransportError(f"server error {resp.status_code}", attempts=attempt, endpoint=url)
                elif resp.status_code >= 400:
                    raise TransportError(f"request rejected with {resp.status_code}", attempts=attempt,
                                         endpoint=url)
                else:
                    try:
                        return resp.json()
                    except ValueError:
                        raise MalformedResponse("response is not JSON", attempts=attempt, endpoint=url) from None
            if attempt <= self.max_retries:
                time.sleep(self.backoff * attempt)
        assert last is not None
        raise last

    def _request_body(self, prefix: Sequence[int], ctx: str | None) -> dict:
        if self.wire == "completions":
            body = {"prompt": list(prefix), "max_tokens": 1, "logprobs": self.top_k, "temperature": 0}
            if self.model:
                body["model"] = self.model
            return body
        body = {"prefix_tokens": list(prefix), "context_id": ctx, "top_k": self.top_k}
        if self.no_cache:
            body["no_cache"] = True
        return body

    def _top_probs(self, prefix: Sequence[int], ctx: str | None) -> dict[int, float]:
        payload = self._post(self.endpoint, self._request_body(prefix, ctx))
        if self.wire == "completions":
            payload = completions_to_native(payload, self._ids)
        return parse_logprob_response(payload)

    def next_distribution(self, prefix: Sequence[int], ctx: str | None = None) -> TokenDistribution:
        probs = self._top_probs(prefix, ctx)
        if not probs:
            raise MalformedResponse("empty top-k response", endpoint=self.endpoint)
        return TokenDistribution.from_topk(probs, len(self.vocab) if self.vocab else None)

    def score_conditionals(self, tokens: Iterable[int], prefix: Sequence[int],
                           ctx: str | None = None) -> dict[int, float]:
        probs = self._top_probs(prefix, ctx)
        return {t: probs.get(t, self.floor) for t in tokens}

    def tokenize(self, text: str) -> list[int]:
        url = self.endpoint.rstrip("/") + "/tokenize"
        payload = self._post(url, {"text": text})
        toks = payload.get("tokens") if isinstance(payload, dict) else None
        if not isinstance(toks, list) or not all(isinstance(t, int) for t in toks):
            raise MalformedResponse("tokenize response lacks integer 'tokens'", endpoint=url)
        return toks

    def surface(self, token: int) -> str:
        if self.vocab is not None and 0 <= token < len(self.vocab):
            return self.vocab[token]
        return str(token)

    def detokenize(self, tokens: Sequence[int]) -> str:
        return "".join(self.surface(t) for t in tokens)
