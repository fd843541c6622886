"""Completion backends: the wire client, prompt assembly, and test doubles.

Wire protocol (native dialect): POST {base}/v1/completions with a JSON body
{"prompt", "max_new_tokens", "sampling", "stream"}. With stream=true the
response is line-delimited JSON, one {"token": "..."} object per generated
chunk followed by a final {"done": true}; with stream=false it is a single
{"text": "..."} object. An adapter layer maps the same request onto other
local-server dialects (currently an OpenAI-completions shim).

Timing is always measured client side with a monotonic clock: one timestamp
when the request goes out, one per received chunk. The scripted test backend
synthesizes those timestamps from its script instead of sleeping, so latency
shapes of any size replay instantly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .errors import CwekitError


class BackendError(CwekitError):
    pass


class BackendTransportError(BackendError):
    """Connection, timeout, or HTTP status failure. Carries elapsed seconds."""

    def __init__(self, message: str, elapsed: float):
        super().__init__(f"{message} (after {elapsed:.3f}s)")
        self.elapsed = elapsed


class BackendProtocolError(BackendError):
    """The server answered, but not in the expected shape."""

    def __init__(self, message: str, received: str = ""):
        super().__init__(message)
        self.received = received


class PromptError(CwekitError):
    pass


# ---------------------------------------------------------------------------
# Prompt assembly

_INSTRUCTION_MARK = "### Instruction:"
_INPUT_MARK = "### Input:"
_OUTPUT_MARK = "### Output:"


def assemble_prompt(instruction: str, code: str) -> str:
    """Render the single prompt layout shared by training and inference.

    The layout is byte-stable: same instruction and code always produce the
    same prompt, ending with the output marker the model completes after.
    """
    if not code or not code.strip():
        raise PromptError("cannot assemble a prompt for an empty code snippet")
    return (
        f"{_INSTRUCTION_MARK}\n{instruction}\n\n"
        f"{_INPUT_MARK}\n{code}\n\n"
        f"{_OUTPUT_MARK}\n"
    )


# ---------------------------------------------------------------------------
# Requests, traces, results

GREEDY = {"temperature": 0.0}


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_new_tokens: int = 32
    sampling: Mapping[str, object] = field(default_factory=lambda: dict(GREEDY))
    stream: bool = True

    def __post_init__(self) -> None:
        if not isinstance(self.prompt, str) or not self.prompt:
            raise BackendError("prompt must be a non-empty string")
        if not isinstance(self.max_new_tokens, int) or self.max_new_tokens < 1:
            raise BackendError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        object.__setattr__(self, "sampling", dict(self.sampling))


@dataclass(frozen=True)
class TimingTrace:
    """Client-side timestamps for one completion, monotonic seconds."""

    request_sent_at: float
    token_arrivals: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_arrivals", tuple(self.token_arrivals))
        previous = self.request_sent_at
        for arrival in self.token_arrivals:
            if arrival < previous:
                raise BackendError("token arrivals must be non-decreasing and follow the request")
            previous = arrival

    @property
    def token_count(self) -> int:
        return len(self.token_arrivals)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    trace: TimingTrace
    backend: str


class Backend(Protocol):
    id: str

    def complete(self, request: CompletionRequest) -> CompletionResult: ...


# ---------------------------------------------------------------------------
# Dialect adapters

_STREAM_END = object()


class NativeAdapter:
    name = "native"

    def build(self, request: CompletionRequest) -> tuple[str, dict]:
        return "/v1/completions", {
            "prompt": request.prompt,
            "max_new_tokens": request.max_new_tokens,
            "sampling": dict(request.sampling),
            "stream": request.stream,
        }

    def parse_stream_line(self, line: str):
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendProtocolError(f"bad stream line: {exc}", received=line) from exc
        if data.get("done") is True:
            return _STREAM_END
        token = data.get("token")
        if not isinstance(token, str):
            raise BackendProtocolError("stream line lacks a token string", received=line)
        return token

    def parse_body(self, data) -> str:
        if not isinstance(data, dict) or not isinstance(data.get("text"), str):
            raise BackendProtocolError("response body lacks a text field", received=repr(data))
        return data["text"]


class OpenAIAdapter:
    """Maps requests onto the OpenAI-style completions dialect (SSE stream)."""

    name = "openai"

    def build(self, request: CompletionRequest) -> tuple[str, dict]:
        payload = {
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "stream": request.stream,
        }
        payload.update(request.sampling)
        return "/v1/completions", payload

    def parse_stream_line(self, line: str):
        if not line.startswith("data:"):
            return None  # SSE comments and keep-alives
        body = line[len("data:"):].strip()
        if body == "[DONE]":
            return _STREAM_END
        try:
            data = json.loads(body)
            text = data["choices"][0]["text"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"bad SSE chunk: {exc}", received=line) from exc
        if not isinstance(text, str):
            raise BackendProtocolError("SSE chunk text is not a string", received=line)
        return text

    def parse_body(self, data) -> str:
        try:
            text = data["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"bad response body: {exc}", received=repr(data)) from exc
        if not isinstance(text, str):
            raise BackendProtocolError("response text is not a string", received=repr(data))
        return text


ADAPTERS = {"native": NativeAdapter, "openai": OpenAIAdapter}


def get_adapter(name: str):
    try:
        return ADAPTERS[name]()
    except KeyError:
        raise BackendError(f"unknown backend adapter {name!r}; known: {sorted(ADAPTERS)}")


# ---------------------------------------------------------------------------
# HTTP backend


class HttpBackend:
    def __init__(self, base_url: str, adapter: str = "native", *,
                 timeout: float = 60.0, api_key: str | None = None,
                 client: httpx.Client | None = None):
        self._base = base_url.rstrip("/")
        self._adapter = get_adapter(adapter)
        self._own_client = client is None
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.id = f"{self._adapter.name}:{self._base}"

    def close(self) -> None:
        if self._own_client:
            self._client.close()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        path, payload = self._adapter.build(request)
        url = self._base + path
        sent = time.monotonic()
        try:
            if request.stream:
                text, arrivals = self._stream(url, payload, sent)
            else:
                response = self._client.post(url, json=payload, headers=self._headers)
                arrived = time.monotonic()
                if response.status_code != 200:
                    raise BackendTransportError(
                        f"backend returned HTTP {response.status_code}", elapsed=arrived - sent)
                text, arrivals = self._adapter.parse_body(response.json()), [arrived]
        except httpx.HTTPError as exc:
            raise BackendTransportError(
                f"transport failure talking to {url}: {exc}",
                elapsed=time.monotonic() - sent) from exc
        except json.JSONDecodeError as exc:
            raise BackendProtocolError(f"response is not JSON: {exc}") from exc
        trace = TimingTrace(request_sent_at=sent, token_arrivals=tuple(arrivals))
        return CompletionResult(text=text, trace=trace, backend=self.id)

    def _stream(self, url: str, payload: dict, sent: float) -> tuple[str, list[float]]:
        texts: list[str] = []
        arrivals: list[float] = []
        received = ""
        with self._client.stream("POST", url, json=payload, headers=self._headers) as response:
            if response.status_code != 200:
                raise BackendTransportError(
                    f"backend returned HTTP {response.status_code}",
                    elapsed=time.monotonic() - sent)
            for line in response.iter_lines():
                now = time.monotonic()
                if not line.strip():
                    continue
                received += line + "\n"
                try:
                    token = self._adapter.parse_stream_line(line)
                except BackendProtocolError as exc:
                    exc.received = received
                    raise
                if token is _STREAM_END:
                    break
                if token is None:
                    continue
                texts.append(token)
                arrivals.append(now)
        return "".join(texts), arrivals


# ---------------------------------------------------------------------------
# Test backends (no network, no sleeping)


def _normalize_script(script: Mapping, where: str) -> list[tuple[str, float]]:
    tokens = script.get("tokens")
    if not isinstance(tokens, list) or not tokens:
        raise BackendError(f"{where}: script needs a non-empty token list")
    first = float(script.get("first_delay_ms", 0.0)) / 1000.0
    gap = float(script.get("gap_ms", 0.0)) / 1000.0
    out: list[tuple[str, float]] = []
    for i, tok in enumerate(tokens):
        if isinstance(tok, str):
            out.append((tok, first if i == 0 else gap))
        elif isinstance(tok, dict) and isinstance(tok.get("text"), str):
            out.append((tok["text"], float(tok.get("delay_ms", 0.0)) / 1000.0))
        else:
            raise BackendError(f"{where}: token {i} must be a string or {{text, delay_ms}}")
    return out


class ScriptedBackend:
    """Replays canned token streams with scripted inter-token delays.

    Timestamps are synthesized on a virtual monotonic clock, so a script with
    a 253 ms first-token delay produces exactly that TTFT without waiting.
    Scripts cycle across requests in order.
    """

    def __init__(self, scripts: Sequence[Mapping], backend_id: str = "scripted"):
        if not scripts:
            raise BackendError("at least one script is required")
        self._scripts = [_normalize_script(s, f"script {i}") for i, s in enumerate(scripts)]
        self._cursor = 0
        self._clock = 0.0
        self.id = backend_id

    @classmethod
    def from_dir(cls, path: str | Path) -> "ScriptedBackend":
        path = Path(path)
        files = sorted(path.glob("*.json"))
        if not files:
            raise BackendError(f"no *.json scripts in {path}")
        scripts = []
        for file in files:
            try:
                scripts.append(json.loads(file.read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError) as exc:
                raise BackendError(f"bad script {file}: {exc}") from exc
        return cls(scripts, backend_id=f"script:{path}")

    def complete(self, request: CompletionRequest) -> CompletionResult:
        script = self._scripts[self._cursor % len(self._scripts)]
        self._cursor += 1
        steps = script[: request.max_new_tokens]
        sent = self._clock
        text = "".join(tok for tok, _ in steps)
        if request.stream:
            arrivals = []
            now = sent
            for _, delay in steps:
                now += delay
                arrivals.append(now)
        else:
            arrivals = [sent + sum(delay for _, delay in steps)]
        self._clock = arrivals[-1] + 0.001
        trace = TimingTrace(request_sent_at=sent, token_arrivals=tuple(arrivals))
        return CompletionResult(text=text, trace=trace, backend=self.id)


class ResponderBackend:
    """Computes the completion text from the prompt; trace shape is minimal.

    Useful when a test cares about content, not timing: the whole response
    arrives as a single chunk on the virtual clock.
    """

    def __init__(self, responder: Callable[[str], str], backend_id: str = "responder",
                 delay_ms: float = 0.0):
        self._responder = responder
        self._delay = delay_ms / 1000.0
        self._clock = 0.0
        self.id = backend_id

    def complete(self, request: CompletionRequest) -> CompletionResult:
        text = self._responder(request.prompt)
        if not isinstance(text, str):
            raise BackendProtocolError(f"responder returned {type(text).__name__}, wanted str")
        sent = self._clock
        arrival = sent + self._delay
        self._clock = arrival + 0.001
        trace = TimingTrace(request_sent_at=sent, token_arrivals=(arrival,))
        return CompletionResult(text=text, trace=trace, backend=self.id)


def make_backend(url: str, *, adapter: str = "native", timeout: float = 60.0,
                 api_key: str | None = None) -> Backend:
    """Build a backend from a URL. http(s):// is the wire client; script:<dir>
    replays canned scripts from a directory."""
    if url.startswith("script:"):
        return ScriptedBackend.from_dir(url[len("script:"):])
    if url.startswith("http://") or url.startswith("https://"):
        return HttpBackend(url, adapter=adapter, timeout=timeout, api_key=api_key)
    raise BackendError(f"unsupported backend url {url!r} (expected http(s):// or script:<dir>)")
