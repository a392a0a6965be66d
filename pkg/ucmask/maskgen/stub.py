"""Deterministic chat-completion endpoint for offline experiments and tests."""
from __future__ import annotations

import asyncio
import json
import logging
import os
from typing import Optional, Sequence

from fastapi import FastAPI, HTTPException, Request, status

from ..schemas import ChatChoice, ChatMessage, ChatRequest, ChatResponse

LOGGER = logging.getLogger(__name__)


def create_stub_app(
    replies: Sequence[str],
    *,
    delay: float = 0.0,
    status_codes: Sequence[int] = (),
    token: Optional[str] = None,
) -> FastAPI:
    """Serve ``POST /v1/chat/completions`` replaying ``replies`` in order (the last one repeats).

    ``status_codes`` makes the first calls fail with those HTTP codes; ``token``
    requires a matching bearer header. Received requests are kept on
    ``app.state.requests``.
    """

    if not replies:
        raise ValueError("the stub needs at least one canned reply")
    app = FastAPI(title="ucmask chat stub")
    app.state.requests = []
    app.state.calls = 0

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "requests": len(app.state.requests)}

    @app.post("/v1/chat/completions", response_model=ChatResponse)
    async def complete(payload: ChatRequest, request: Request) -> ChatResponse:
        call = app.state.calls
        app.state.calls += 1
        if token is not None and request.headers.get("authorization") != f"Bearer {token}":
            raise HTTPException(status_code=status.HTTP_401_UNAUTHORIZED, detail="Unauthorized")
        if call < len(status_codes):
            raise HTTPException(status_code=status_codes[call], detail="scripted failure")
        app.state.requests.append(payload)
        if delay:
            await asyncio.sleep(delay)
        reply = replies[min(len(app.state.requests), len(replies)) - 1]
        LOGGER.debug("Stub reply %s: %s", len(app.state.requests), reply)
        return ChatResponse(
            model=payload.model,
            choices=[ChatChoice(message=ChatMessage(role="assistant", content=reply))],
        )

    return app


def app_from_env() -> FastAPI:
    """Factory for ``uvicorn --factory``: replies come from ``UCMASK_STUB_REPLIES`` (a JSON list of strings)."""

    raw = os.getenv("UCMASK_STUB_REPLIES", '["[]"]')
    replies = json.loads(raw)
    if not isinstance(replies, list) or not all(isinstance(item, str) for item in replies):
        raise ValueError("UCMASK_STUB_REPLIES must be a JSON list of strings")
    return create_stub_app(replies, delay=float(os.getenv("UCMASK_STUB_DELAY", "0")))
