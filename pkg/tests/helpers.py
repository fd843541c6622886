"""Shared test machinery: deterministic snippet corpora, canned teacher
responses, and a live wire-protocol server on an ephemeral port."""

from __future__ import annotations

import json
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import uvicorn
from fastapi import FastAPI
from fastapi.responses import Response, StreamingResponse

from cwekit.catalog import CweId, load_catalog
from cwekit.dataset import PairedExample, Provenance, ReviewState, Snippet
from cwekit.review.store import ACCEPT, CHECK_NAMES, CheckSet, Decision, ReviewQueue

FIXED_TIME = "2025-06-01T00:00:00+00:00"


def pair_code(cwe_number: int, index: int) -> tuple[str, str]:
    """A deterministic (vulnerable, fixed) snippet pair; both sides parse."""
    vulnerable = (
        f"def handle_{cwe_number}_{index}(request):\n"
        f"    selector = request.args.get('selector')\n"
        f"    return run_query_{cwe_number}(selector, page={index})\n"
    )
    fixed = (
        f"def handle_{cwe_number}_{index}(request):\n"
        f"    selector = sanitize(request.args.get('selector'))\n"
        f"    return run_query_{cwe_number}(selector, page={index})\n"
    )
    return vulnerable, fixed


def make_provenance(backend: str = "test-backend") -> Provenance:
    return Provenance(backend=backend, template_version="tmpl-abc12345",
                      generated_at=FIXED_TIME)


def make_pair(cwe_number: int, index: int = 0,
              state: ReviewState | None = None) -> PairedExample:
    vulnerable, fixed = pair_code(cwe_number, index)
    return PairedExample(
        cwe=CweId(cwe_number),
        vulnerable=Snippet(vulnerable),
        fixed=Snippet(fixed),
        provenance=make_provenance(),
        review_state=state or ReviewState(),
    )


def teacher_response(cwe_number: int, count: int, start: int = 0) -> str:
    """A canned teacher reply: a JSON array of pair records."""
    records = []
    for i in range(start, start + count):
        vulnerable, fixed = pair_code(cwe_number, i)
        records.append({"vulnerable": vulnerable, "fixed": fixed,
                        "note": f"scenario {i} leaves the selector unsanitized"})
    return json.dumps(records)


def write_fixture_corpus(directory: Path, pairs_per_cwe: int = 10) -> None:
    """One canned teacher response file per catalog CWE."""
    directory.mkdir(parents=True, exist_ok=True)
    for entry in load_catalog():
        path = directory / f"{entry.id.canonical}.0.txt"
        path.write_text(teacher_response(entry.id.number, pairs_per_cwe),
                        encoding="utf-8")


def full_checks() -> CheckSet:
    return CheckSet.from_dict({name: True for name in CHECK_NAMES})


def accept_everything(queue: ReviewQueue) -> int:
    page = queue.list_pending(page_size=100000)
    for item in page.items:
        queue.submit_decision(item.item_id, Decision(kind=ACCEPT, checks=full_checks()))
    return len(page.items)


# ---------------------------------------------------------------------------
# Live servers


@dataclass
class RawResponse:
    """Returned by a responder to force an exact HTTP response."""

    body: str
    status: int = 200
    media_type: str = "application/x-ndjson"


def completion_app(responder: Callable[[str], object],
                   chunker: Callable[[str], list[str]] | None = None) -> FastAPI:
    """A minimal server speaking the native completion dialect."""
    app = FastAPI()

    @app.post("/v1/completions")
    def complete(body: dict):
        reply = responder(body["prompt"])
        if isinstance(reply, RawResponse):
            return Response(content=reply.body, status_code=reply.status,
                            media_type=reply.media_type)
        chunks = chunker(reply) if chunker else [reply]
        if body.get("stream", True):
            def lines():
                for chunk in chunks:
                    yield json.dumps({"token": chunk}) + "\n"
                yield json.dumps({"done": True}) + "\n"
            return StreamingResponse(lines(), media_type="application/x-ndjson")
        return {"text": reply}

    return app


@contextmanager
def serve_app(app: FastAPI) -> Iterator[str]:
    """Run an app on an ephemeral port in a thread; yields the base URL."""
    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if not thread.is_alive():
            raise RuntimeError("test server thread died during startup")
        if time.time() > deadline:
            raise RuntimeError("test server did not start in time")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=10)


@contextmanager
def wire_server(responder: Callable[[str], object],
                chunker: Callable[[str], list[str]] | None = None) -> Iterator[str]:
    with serve_app(completion_app(responder, chunker)) as url:
        yield url
