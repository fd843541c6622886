"""JSON HTTP API over the review queue, plus static hosting for the web UI.

Every error response carries a machine-readable code:
  not_found | conflict | validation_error | bad_request
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from ..catalog import CatalogError
from ..errors import CwekitError
from .diff import diff_hunks
from .store import (
    CheckSet,
    ConflictError,
    Decision,
    GateError,
    NotFoundError,
    ReviewItem,
    ReviewQueue,
)

_FALLBACK_PAGE = """<!doctype html>
<title>review queue</title>
<h1>Review queue</h1>
<p>No web UI assets are configured. The JSON API is live:</p>
<ul>
<li>GET /api/items?cwe=&amp;page=&amp;page_size=</li>
<li>GET /api/items/{id}</li>
<li>POST /api/items/{id}/decision</li>
<li>GET /api/progress</li>
</ul>
"""


def _summary(item: ReviewItem) -> dict:
    first_line = item.pair.vulnerable.code.strip().splitlines()[0]
    return {
        "item_id": item.item_id,
        "cwe": item.pair.cwe.canonical,
        "state": item.state,
        "position": item.position,
        "enqueued_at": item.enqueued_at,
        "vulnerable_lines": item.pair.vulnerable.line_count,
        "fixed_lines": item.pair.fixed.line_count,
        "preview": first_line[:120],
    }


def _detail(item: ReviewItem) -> dict:
    pair = item.pair
    return {
        **_summary(item),
        "reason": pair.review_state.reason,
        "vulnerable": pair.vulnerable.code,
        "fixed": pair.fixed.code,
        "provenance": {
            "backend": pair.provenance.backend,
            "template_version": pair.provenance.template_version,
            "generated_at": pair.provenance.generated_at,
        },
        "checks": item.checks.to_dict() if item.checks else None,
        "reviewer": item.reviewer,
        "decided_at": item.decided_at,
        "diff": diff_hunks(pair.vulnerable.code, pair.fixed.code),
    }


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def create_app(queue: ReviewQueue, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="review queue", docs_url=None, redoc_url=None)

    @app.exception_handler(NotFoundError)
    async def _not_found(request: Request, exc: NotFoundError):
        return _error(404, "not_found", str(exc))

    @app.exception_handler(ConflictError)
    async def _conflict(request: Request, exc: ConflictError):
        return _error(409, "conflict", str(exc))

    @app.exception_handler(CwekitError)
    async def _validation(request: Request, exc: CwekitError):
        return _error(422, "validation_error", str(exc))

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return _error(400, "bad_request", str(exc))

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok", "items": len(queue)}

    @app.get("/api/items")
    def list_items(cwe: str | None = None, page: int = 1, page_size: int = 20) -> dict:
        try:
            result = queue.list_pending(cwe=cwe, page=page, page_size=page_size)
        except CatalogError as exc:
            raise GateError(f"bad cwe filter: {exc}") from exc
        return {
            "items": [_summary(item) for item in result.items],
            "page": result.page,
            "page_size": result.page_size,
            "total_pending": result.total_pending,
            "pages": result.pages,
        }

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str) -> dict:
        return _detail(queue.get(item_id))

    @app.post("/api/items/{item_id}/decision")
    def decide(item_id: str, body: dict) -> dict:
        if not isinstance(body, dict):
            raise GateError("decision body must be a JSON object")
        kind = body.get("kind")
        if not isinstance(kind, str):
            raise GateError("decision needs a string 'kind'")
        checks = None
        if body.get("checks") is not None:
            checks = CheckSet.from_dict(body["checks"])
        replacement = body.get("replacement") or {}
        if replacement and not isinstance(replacement, dict):
            raise GateError("replacement must be an object")
        decision = Decision(
            kind=kind,
            reviewer=str(body.get("reviewer") or "reviewer"),
            checks=checks,
            reason=body.get("reason"),
            replacement_vulnerable=replacement.get("vulnerable"),
            replacement_fixed=replacement.get("fixed"),
        )
        return _detail(queue.submit_decision(item_id, decision))

    @app.get("/api/progress")
    def progress() -> dict:
        return queue.progress()

    ui_path = Path(ui_dir) if ui_dir else None
    if ui_path and ui_path.is_dir():
        app.mount("/", StaticFiles(directory=ui_path, html=True), name="ui")
    else:
        @app.get("/", response_class=HTMLResponse)
        def index() -> str:
            return _FALLBACK_PAGE

    return app
