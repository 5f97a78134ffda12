"""Blocking NDJSON client used by the CLI and the tests."""
from __future__ import annotations

import itertools
import json
import socket
from typing import Any

from ..core import dumps


class ServiceClient:
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rb")
        self._ids = itertools.count()

    def send_raw(self, line: str) -> None:
        self._sock.sendall(line.encode("utf-8") + b"\n")

    def read_reply(self) -> dict[str, Any]:
        line = self._file.readline()
        if not line:
            raise ConnectionError("service closed the connection")
        return json.loads(line)

    def read_reply_line(self) -> str:
        line = self._file.readline()
        if not line:
            raise ConnectionError("service closed the connection")
        return line.decode("utf-8").rstrip("\n")

    def message(self, op: str, model_id: str, body: dict[str, Any] | None = None, session_id: str | None = None) -> dict[str, Any]:
        msg: dict[str, Any] = {"op": op, "model_id": model_id, "request_id": next(self._ids)}
        if session_id is not None:
            msg["session_id"] = session_id
        if body is not None:
            msg["body"] = body
        return msg

    def request(self, op: str, model_id: str, body: dict[str, Any] | None = None, session_id: str | None = None) -> dict[str, Any]:
        self.send_raw(dumps(self.message(op, model_id, body, session_id)))
        return self.read_reply()

    def close(self) -> None:
        self._file.close()
        self._sock.close()

    def __enter__(self) -> ServiceClient:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
