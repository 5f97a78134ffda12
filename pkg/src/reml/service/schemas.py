"""Wire messages shared by the socket transport and the HTTP app."""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

OPS = ("query", "store", "feedback", "stats")
ERROR_CODES = ("bad_request", "quota")


class WireMessage(BaseModel):
    model_config = ConfigDict(extra="forbid")

    op: str
    model_id: str = Field(min_length=1)
    session_id: str | None = None
    body: dict[str, Any] | None = None
    request_id: str | int


class WireReply(BaseModel):
    request_id: str | int | None
    ok: bool
    op: str | None = None
    body: dict[str, Any] | None = None
    code: Literal["bad_request", "quota"] | None = None
    detail: str | None = None


def ok_reply(request_id: Any, op: str, body: dict[str, Any]) -> dict[str, Any]:
    return {"request_id": request_id, "ok": True, "op": op, "body": body}


def error_reply(request_id: Any, code: str, detail: str) -> dict[str, Any]:
    return {"request_id": request_id, "ok": False, "code": code, "detail": detail}
