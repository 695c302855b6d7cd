"""Text-generation backends behind a single ``chat`` call.

``http`` speaks the OpenAI-compatible chat-completions protocol. The scripted,
oracle and threshold kinds are deterministic stand-ins that read the
structured ``state`` attached to each request (live models only ever see the
messages). ``replay`` serves responses recorded in a transcript, keyed by the
request tag.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import httpx

from .domain import AFLError, BackendSpec

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class BackendError(AFLError):
    def __init__(self, msg: str, status: int | None = None):
        super().__init__(msg)
        self.status = status


class ReplayError(BackendError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int | None = None
    tag: Mapping[str, Any] = field(default_factory=dict)
    state: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def tag_key(self) -> str:
        return tag_key(self.tag)

    def prompt_hash(self) -> str:
        blob = json.dumps([list(m) for m in self.messages], ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def tag_key(tag: Mapping[str, Any]) -> str:
    return json.dumps(dict(tag), sort_keys=True, separators=(",", ":"))


class Backend:
    kind = "base"

    def chat(self, request: ChatRequest) -> str:
        raise NotImplementedError


def chat(backend: Backend, request: ChatRequest, log: list | None = None) -> str:
    """Call ``backend`` and append a call record to ``log`` (the run transcript)."""
    text = backend.chat(request)
    if log is not None:
        log.append(
            {
                "type": "call",
                "tag": dict(request.tag),
                "backend": backend.kind,
                "prompt_hash": request.prompt_hash(),
                "response": text,
            }
        )
    return text


class HttpBackend(Backend):
    """OpenAI-compatible client with bounded concurrency and retry on 429/5xx/timeouts."""

    kind = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        max_in_flight: int = 4,
        attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._lock = threading.Lock()
        self.attempt_log: list[dict[str, Any]] = []

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _note(self, request: ChatRequest, attempt: int, status: int | str) -> None:
        with self._lock:
            self.attempt_log.append({"tag": dict(request.tag), "attempt": attempt, "status": status})

    def chat(self, request: ChatRequest) -> str:
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        last_status: int | None = None
        for attempt in range(1, self.attempts + 1):
            if attempt > 1:
                time.sleep(self.backoff * 2 ** (attempt - 2))
            try:
                with self._slots:
                    resp = self._client.post(self.url, json=payload, headers=self._headers())
            except httpx.TimeoutException:
                self._note(request, attempt, "timeout")
                logger.warning("chat timeout (attempt %d/%d)", attempt, self.attempts)
                last_status = None
                continue
            except httpx.HTTPError as exc:
                self._note(request, attempt, "transport-error")
                raise BackendError(f"transport error: {exc}") from exc
            self._note(request, attempt, resp.status_code)
            if resp.status_code == 200:
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise BackendError(f"malformed completion body: {exc}", 200) from exc
            last_status = resp.status_code
            if resp.status_code not in RETRYABLE_STATUS:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
            logger.warning("chat HTTP %d (attempt %d/%d)", resp.status_code, attempt, self.attempts)
        raise BackendError(f"gave up after {self.attempts} attempts", last_status)

    def close(self) -> None:
        self._client.close()


def _format_score(x: float) -> str:
    return f"{x:.4f}"


def scripted_rec_response(state: Mapping[str, Any]) -> str:
    """Deterministic recommender reply: best-scoring candidate not yet rejected.

    In list mode (``state["mode"] == "list"``) it emits the top ``n`` candidates
    by score, one ``Item:`` line each.
    """
    cands = list(state["candidates"])
    titles = dict(zip(cands, state["titles"]))
    scores = dict(zip(cands, state["scores"]))
    order = sorted(cands, key=lambda c: (-scores[c], c))
    if state.get("mode") == "list":
        n = int(state.get("n", 5))
        lines = [f"Item: {titles[c]}" for c in order[:n]]
        return "Reason: Ranked by the model score of each candidate.\n" + "\n".join(lines)
    rejected = set(state.get("rejected", ()))
    fresh = [c for c in order if c not in rejected]
    pick = fresh[0] if fresh else order[0]
    return (
        f"Reason: {titles[pick]} has the highest model score ({_format_score(scores[pick])}) "
        f"among candidates not yet declined.\nItem: {titles[pick]}"
    )


def oracle_user_response(state: Mapping[str, Any], ground_truth: int | None) -> str:
    if ground_truth is not None and state["item"] == ground_truth:
        return "Reason: This is exactly what I want next.\nDecision: yes"
    return "Reason: This is not what I want next.\nDecision: no"


def threshold_user_response(state: Mapping[str, Any], tau: float = 0.5) -> str:
    normalized = state.get("normalized")
    if normalized is None:
        return "Reason: No relevance score is available.\nDecision: no"
    if normalized >= tau:
        return f"Reason: The relevance score {_format_score(normalized)} clears my bar.\nDecision: yes"
    return f"Reason: The relevance score {_format_score(normalized)} is too low.\nDecision: no"


class ScriptedRecBackend(Backend):
    kind = "scripted-rec"

    def chat(self, request):
        return scripted_rec_response(request.state)


class OracleUserBackend(Backend):
    kind = "oracle-user"

    def chat(self, request):
        return oracle_user_response(request.state, request.state.get("ground_truth"))


class ThresholdUserBackend(Backend):
    kind = "threshold-user"

    def __init__(self, tau: float = 0.5):
        self.tau = tau

    def chat(self, request):
        return threshold_user_response(request.state, self.tau)


class ReplayBackend(Backend):
    """Serves recorded responses by request tag from transcript ``call`` records."""

    kind = "replay"

    def __init__(self, records: Iterable[Mapping[str, Any]]):
        self.responses: dict[str, str] = {}
        for rec in records:
            if rec.get("type") == "call":
                self.responses[tag_key(rec["tag"])] = rec["response"]

    @classmethod
    def from_paths(cls, paths: str | Path | Sequence[str | Path]) -> ReplayBackend:
        if isinstance(paths, (str, Path)):
            paths = [paths]
        records = []
        for p in paths:
            p = Path(p)
            files = sorted(p.rglob("*.jsonl")) if p.is_dir() else [p]
            for f in files:
                with open(f, encoding="utf-8") as fh:
                    records.extend(json.loads(line) for line in fh if line.strip())
        return cls(records)

    def chat(self, request):
        try:
            return self.responses[request.tag_key]
        except KeyError:
            raise ReplayError(f"no recorded response for tag {request.tag_key}") from None


def build_backend(spec: BackendSpec, concurrency: int = 4, retry_budget: int = 3) -> Backend:
    s = spec.settings
    if spec.kind == "http":
        return HttpBackend(
            base_url=s["base_url"],
            model=s["model"],
            api_key_env=s.get("api_key_env", "OPENAI_API_KEY"),
            max_in_flight=int(s.get("max_in_flight", concurrency)),
            attempts=int(s.get("attempts", retry_budget)),
            backoff=float(s.get("backoff", 1.0)),
            timeout=float(s.get("timeout", 60.0)),
        )
    if spec.kind == "scripted-rec":
        return ScriptedRecBackend()
    if spec.kind == "oracle-user":
        return OracleUserBackend()
    if spec.kind == "threshold-user":
        return ThresholdUserBackend(float(s.get("tau", 0.5)))
    if spec.kind == "replay":
        return ReplayBackend.from_paths(s["path"])
    raise BackendError(f"unknown backend kind {spec.kind!r}")
