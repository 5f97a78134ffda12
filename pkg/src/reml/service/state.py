"""Request handling against one shared collection.

``ServiceState.handle`` is synchronous and not reentrant; the transports
call it from a single writer so requests apply in one total order.
"""
from __future__ import annotations

import json
from collections import defaultdict
from typing import Any

import numpy as np
from pydantic import ValidationError

from ..core import DenseVector, Document, Feedback, Query, QuotaExceeded, RemlError, dumps
from ..retrieval import DenseRetriever
from ..storage import StorageHandler
from .schemas import OPS, WireMessage, error_reply, ok_reply

GLOBAL_OWNER = "_global"


class BadRequest(RemlError):
    pass


class ServiceState:
    def __init__(self, storage: StorageHandler, scoring: str = "cosine", personalization_rate: float = 0.01):
        self.storage = storage
        self.retriever = DenseRetriever(storage.collection, scoring)
        self.personalization: dict[str, np.ndarray] = {}
        self.personalization_rate = personalization_rate
        self.feedback_log: dict[str, list[Feedback]] = defaultdict(list)
        self.journal: list[dict[str, Any]] = []

    @property
    def dimension(self) -> int:
        return self.storage.collection.dimension

    def handle_line(self, line: str | bytes) -> str:
        try:
            raw = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return dumps(error_reply(None, "bad_request", f"invalid JSON: {exc}"))
        return dumps(self.handle(raw))

    def handle(self, raw: Any) -> dict[str, Any]:
        rid = raw.get("request_id") if isinstance(raw, dict) else None
        try:
            msg = WireMessage.model_validate(raw)
        except ValidationError as exc:
            err = exc.errors()[0]
            where = ".".join(str(p) for p in err["loc"]) or "message"
            return error_reply(rid, "bad_request", f"{where}: {err['msg']}")
        self.journal.append(msg.model_dump())
        try:
            if msg.op not in OPS:
                raise BadRequest(f"unknown op {msg.op!r}")
            body = getattr(self, f"_{msg.op}")(msg)
        except QuotaExceeded as exc:
            return error_reply(msg.request_id, "quota", str(exc))
        except (RemlError, ValueError, KeyError, TypeError) as exc:
            return error_reply(msg.request_id, "bad_request", str(exc))
        return ok_reply(msg.request_id, msg.op, body)

    def _need_body(self, msg: WireMessage) -> dict[str, Any]:
        if msg.body is None:
            raise BadRequest(f"{msg.op} needs a body")
        return msg.body

    def _query(self, msg: WireMessage) -> dict[str, Any]:
        q = Query.from_dict(self._need_body(msg))
        if q.model_id != msg.model_id:
            raise BadRequest(f"query model_id {q.model_id!r} differs from sender {msg.model_id!r}")
        if not isinstance(q.payload, DenseVector):
            raise BadRequest("the service answers dense vector queries only")
        offset = self.personalization.get(msg.model_id)
        if offset is not None:
            q = Query(q.query_id, q.session_id, q.model_id, DenseVector(q.payload.vector + offset), q.k, q.meta)
        self.storage.evict_expired()
        result = self.retriever.retrieve_topk(q)
        self.storage.record_query([h.document.id for h in result.items])
        return result.to_dict()

    def _store(self, msg: WireMessage) -> dict[str, Any]:
        body = dict(self._need_body(msg))
        if body.get("id") is None:
            body["id"] = self.storage.next_id()
        doc = Document.from_dict(body)
        self.storage.evict_expired()
        doc_id = self.storage.store(msg.model_id, doc)
        return {"id": doc_id, "size": len(self.storage)}

    def _feedback(self, msg: WireMessage) -> dict[str, Any]:
        fb = Feedback.from_dict(self._need_body(msg))
        if fb.model_id != msg.model_id:
            raise BadRequest(f"feedback model_id {fb.model_id!r} differs from sender {msg.model_id!r}")
        self.feedback_log[msg.model_id].append(fb)
        if fb.kind == "gradient":
            g = np.asarray(fb.value, dtype=np.float64)
            if g.shape != (self.dimension,):
                raise BadRequest(f"gradient feedback must have length {self.dimension}")
            offset = self.personalization.setdefault(msg.model_id, np.zeros(self.dimension))
            offset -= self.personalization_rate * g
        elif fb.kind == "per_document_utility" and fb.document_ids:
            for doc_id, u in zip(fb.document_ids, np.atleast_1d(fb.value)):
                self.storage.record_utility(int(doc_id), float(u))
        return {"accepted": True, "count": len(self.feedback_log[msg.model_id])}

    def _stats(self, msg: WireMessage) -> dict[str, Any]:
        usage = self.storage.usage()
        return {
            "size": len(self.storage),
            "capacity": self.storage.policy.capacity,
            "usage": {GLOBAL_OWNER if k is None else k: v for k, v in sorted(usage.items(), key=lambda kv: str(kv[0]))},
            "clock": self.storage.clock,
        }

    def close(self) -> None:
        self.storage.flush()
        self.storage.close()
