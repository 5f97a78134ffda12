"""Newline-delimited JSON over TCP.

Each connection has a reader that enqueues requests and a sender that
writes replies in request order. One writer task drains the shared
queue, so every request (queries included, since they move the LRU
order and the clock) is applied in a single total order.
"""
from __future__ import annotations

import asyncio
import contextlib
import json
import logging
from typing import Any

from ..core import dumps
from .schemas import error_reply
from .state import ServiceState

log = logging.getLogger(__name__)

MAX_LINE = 16 * 1024 * 1024


def parse_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"listen address must look like host:port, got {listen!r}")
    return host, int(port)


class NdjsonServer:
    def __init__(self, state: ServiceState, host: str = "127.0.0.1", port: int = 0):
        self.state = state
        self.host = host
        self.port = port
        self._queue: asyncio.Queue[tuple[str, asyncio.Future[str]]] | None = None
        self._server: asyncio.base_events.Server | None = None
        self._writer: asyncio.Task[None] | None = None
        self._connections: set[asyncio.Task[Any]] = set()

    async def start(self) -> int:
        self._queue = asyncio.Queue()
        self._server = await asyncio.start_server(self._connection, self.host, self.port, limit=MAX_LINE)
        self.port = self._server.sockets[0].getsockname()[1]
        self._writer = asyncio.create_task(self._drain())
        return self.port

    async def _drain(self) -> None:
        assert self._queue is not None
        while True:
            line, fut = await self._queue.get()
            try:
                reply = self.state.handle_line(line)
            except Exception as exc:  # never let one request kill the writer
                log.exception("request failed")
                reply = dumps(error_reply(None, "bad_request", f"internal error: {exc}"))
            if not fut.cancelled():
                fut.set_result(reply)

    async def _connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._connections.add(task)
        replies: asyncio.Queue[asyncio.Future[str] | None] = asyncio.Queue()
        sender = asyncio.create_task(self._send(writer, replies))
        seen: set[Any] = set()
        loop = asyncio.get_running_loop()
        try:
            while True:
                try:
                    line = await reader.readline()
                except (asyncio.LimitOverrunError, ValueError):
                    fut = loop.create_future()
                    fut.set_result(dumps(error_reply(None, "bad_request", "message too long")))
                    await replies.put(fut)
                    break
                if not line:
                    break
                text = line.decode("utf-8", errors="replace").strip()
                if not text:
                    continue
                fut = loop.create_future()
                rid = _request_id(text)
                if rid is not None and rid in seen:
                    fut.set_result(dumps(error_reply(rid, "bad_request", "duplicate request_id on this connection")))
                else:
                    if rid is not None:
                        seen.add(rid)
                    await self._queue.put((text, fut))
                await replies.put(fut)
        except ConnectionError:
            pass
        finally:
            await replies.put(None)
            with contextlib.suppress(Exception):
                await sender
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()
            self._connections.discard(task)

    @staticmethod
    async def _send(writer: asyncio.StreamWriter, replies: asyncio.Queue[asyncio.Future[str] | None]) -> None:
        while True:
            fut = await replies.get()
            if fut is None:
                return
            reply = await fut
            writer.write(reply.encode("utf-8") + b"\n")
            await writer.drain()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for t in list(self._connections):
            t.cancel()
        if self._writer is not None:
            # let queued requests finish before shutting the writer down
            while self._queue is not None and not self._queue.empty():
                await asyncio.sleep(0)
            self._writer.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._writer
        self.state.storage.flush()


def _request_id(text: str) -> Any:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError:
        return None
    rid = raw.get("request_id") if isinstance(raw, dict) else None
    return rid if isinstance(rid, (str, int)) else None


async def serve_forever(state: ServiceState, host: str, port: int, ready: Any = None) -> None:
    server = NdjsonServer(state, host, port)
    await server.start()
    if ready is not None:
        ready(server.port)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    import signal

    for sig in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError, RuntimeError):
            loop.add_signal_handler(sig, stop.set)
    try:
        await stop.wait()
    finally:
        await server.stop()
