"""Chat-completion backends: a live OpenAI-compatible HTTP client and a
deterministic replay backend, plus call/token accounting.

Every model call in the pipeline goes through :func:`complete`, which records
one ledger entry per completed call and optionally appends a transcript line.
Transcript files double as replay scripts: a run recorded once can be replayed
offline with zero HTTP calls and byte-identical results.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import requests


class BackendUnavailable(RuntimeError):
    """The backend failed and retries (if any) are exhausted."""


class ContextOverflow(RuntimeError):
    """The provider rejected the request for exceeding its token limit."""


class MissingScript(KeyError):
    """The replay backend has no recorded response for this fingerprint."""


class IoFailure(OSError):
    """A transcript file could not be written or read."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    """One chat call. The fingerprint is a pure function of model, messages
    and temperature, stable across processes."""

    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a request needs at least one message")

    @property
    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "model": self.model,
                "messages": [{"role": m.role, "content": m.content} for m in self.messages],
                "temperature": self.temperature,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens_in: int = 0
    tokens_out: int = 0
    latency_ms: int = 0


@dataclass(frozen=True)
class ModelSettings:
    """Generation parameters shared by every stage of a run."""

    model: str = "replay-model"
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def request(self, messages: Sequence[ChatMessage]) -> ChatRequest:
        return ChatRequest(self.model, tuple(messages), self.temperature, self.max_output_tokens)


@dataclass(frozen=True)
class LedgerEntry:
    fingerprint: str
    example_id: str
    stage_label: str
    tokens_in: int
    tokens_out: int
    latency_ms: int


class CallLedger:
    """Append-only record of every completed model call. Thread-safe."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []

    def record(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def count(self, stage_label: str | None = None, example_id: str | None = None) -> int:
        return sum(
            1
            for e in self.entries
            if (stage_label is None or e.stage_label == stage_label)
            and (example_id is None or e.example_id == example_id)
        )

    def totals(self) -> dict:
        entries = self.entries
        return {
            "n_calls": len(entries),
            "tokens_in": sum(e.tokens_in for e in entries),
            "tokens_out": sum(e.tokens_out for e in entries),
            "latency_ms": sum(e.latency_ms for e in entries),
        }


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


_OVERFLOW_RE = re.compile(
    r"context[ _-]?length|maximum context|token limit|too many tokens|max[ _]?tokens? exceed",
    re.IGNORECASE,
)


def _is_context_overflow(status: int, body: str) -> bool:
    if status not in (400, 413, 422):
        return False
    try:
        error = json.loads(body).get("error") or {}
    except (json.JSONDecodeError, AttributeError):
        error = {}
    if isinstance(error, dict) and error.get("code") == "context_length_exceeded":
        return True
    return bool(_OVERFLOW_RE.search(body))


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    Transient failures (HTTP 429/5xx, timeouts, connection errors) retry with
    exponential backoff up to ``max_retries`` attempts. The credential is read
    from the environment, never passed as an argument.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        api_key_env: str = "TABGEN_API_KEY",
        timeout: float = 120.0,
        max_retries: int = 4,
        backoff_s: float = 0.5,
    ) -> None:
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_s = backoff_s

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env) or os.environ.get("OPENAI_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def send(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last_error: str = "no attempt made"
        for attempt in range(self.max_retries):
            if attempt:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                resp = requests.post(
                    self.endpoint, json=body, headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            if resp.status_code == 200:
                return self._parse(resp.text, latency_ms)
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                continue
            if _is_context_overflow(resp.status_code, resp.text):
                raise ContextOverflow(f"HTTP {resp.status_code}: {resp.text[:500]}")
            raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:500]}")
        raise BackendUnavailable(
            f"retries exhausted after {self.max_retries} attempts; last error: {last_error}"
        )

    @staticmethod
    def _parse(body: str, latency_ms: int) -> ChatResponse:
        try:
            payload = json.loads(body)
            text = payload["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion payload: {exc}") from exc
        usage = payload.get("usage") or {}
        return ChatResponse(
            text=text,
            tokens_in=int(usage.get("prompt_tokens", 0)),
            tokens_out=int(usage.get("completion_tokens", 0)),
            latency_ms=latency_ms,
        )


class ReplayBackend:
    """Answers requests from a recorded script keyed by request fingerprint.

    Responses depend only on the fingerprint, never on call order or thread
    interleaving; lookups are read-only after load.
    """

    def __init__(self, script: Mapping[str, ChatResponse]) -> None:
        self._script = dict(script)

    @classmethod
    def from_transcript(cls, path: str | Path) -> "ReplayBackend":
        return cls(load_transcript(path))

    def __len__(self) -> int:
        return len(self._script)

    def send(self, request: ChatRequest) -> ChatResponse:
        fp = request.fingerprint
        if fp not in self._script:
            head = request.messages[-1].content.splitlines()[0][:80]
            raise MissingScript(
                f"no scripted response for fingerprint {fp[:12]}... "
                f"(model={request.model!r}, last message starts {head!r})"
            )
        return self._script[fp]


TRANSCRIPT_FIELDS = (
    "fingerprint",
    "stage_label",
    "example_id",
    "prompt_messages",
    "response_text",
    "tokens_in",
    "tokens_out",
    "latency_ms",
)


class TranscriptWriter:
    """Appends one JSONL line per call; safe for concurrent appends."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def record(
        self,
        request: ChatRequest,
        response: ChatResponse,
        *,
        example_id: str = "",
        stage_label: str = "",
    ) -> None:
        line = json.dumps(
            {
                "fingerprint": request.fingerprint,
                "stage_label": stage_label,
                "example_id": example_id,
                "prompt_messages": [
                    {"role": m.role, "content": m.content} for m in request.messages
                ],
                "response_text": response.text,
                "tokens_in": response.tokens_in,
                "tokens_out": response.tokens_out,
                "latency_ms": response.latency_ms,
            },
            ensure_ascii=True,
        )
        try:
            with self._lock:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot append transcript line to {self.path}: {exc}") from exc


def load_transcript(path: str | Path) -> dict[str, ChatResponse]:
    """Load a transcript as a replay script. First recording of a fingerprint wins."""
    script: dict[str, ChatResponse] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    fp = obj["fingerprint"]
                    response = ChatResponse(
                        text=obj["response_text"],
                        tokens_in=int(obj["tokens_in"]),
                        tokens_out=int(obj["tokens_out"]),
                        latency_ms=int(obj["latency_ms"]),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise IoFailure(f"{path} line {line_no}: {exc}") from exc
                script.setdefault(fp, response)
    except OSError as exc:
        raise IoFailure(f"cannot read transcript {path}: {exc}") from exc
    return script


def complete(
    backend: Backend,
    request: ChatRequest,
    ledger: CallLedger,
    *,
    example_id: str = "",
    stage_label: str = "",
    transcript: TranscriptWriter | None = None,
) -> ChatResponse:
    """Send one request, record one ledger entry, optionally transcribe."""
    response = backend.send(request)
    ledger.record(
        LedgerEntry(
            fingerprint=request.fingerprint,
            example_id=example_id,
            stage_label=stage_label,
            tokens_in=response.tokens_in,
            tokens_out=response.tokens_out,
            latency_ms=response.latency_ms,
        )
    )
    if transcript is not None:
        transcript.record(request, response, example_id=example_id, stage_label=stage_label)
    return response
