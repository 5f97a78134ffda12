"""HTTP front-end over the same request handler as the socket server."""
from __future__ import annotations

import asyncio
from collections.abc import AsyncIterator
from contextlib import asynccontextmanager
from typing import Any

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .schemas import WireReply
from .state import ServiceState


def create_app(state: ServiceState) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncIterator[None]:
        yield
        state.storage.flush()

    app = FastAPI(title="reml information access service", lifespan=lifespan)
    lock = asyncio.Lock()

    @app.post("/rpc", response_model=WireReply, response_model_exclude_none=True)
    async def rpc(message: dict[str, Any]) -> JSONResponse:
        # raw dict in, so malformed messages get the protocol's error reply
        async with lock:
            reply = state.handle(message)
        return JSONResponse(reply, status_code=200 if reply["ok"] else 400)

    @app.get("/stats")
    async def stats() -> dict[str, Any]:
        async with lock:
            reply = state.handle({"op": "stats", "model_id": "_http", "request_id": 0})
        return reply["body"]

    return app
