"""Storage handling: the write path into a collection.

All mutations take the handler lock, so a handler has a single writer at
a time. Time is a logical clock that advances by one on every store and
every recorded query.
"""
from __future__ import annotations

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Any

import numpy as np

from .core import Collection, Document, QuotaExceeded, RemlError, dumps
from .retrieval import read_snapshot, write_snapshot

EVICTION_POLICIES = ("lru", "lowest_utility")


@dataclass(frozen=True)
class StoragePolicy:
    capacity: int | None = None
    eviction: str = "lru"
    ttl: int | None = None
    quota: int | None = None
    quantize: bool = False

    def __post_init__(self) -> None:
        if self.eviction not in EVICTION_POLICIES:
            raise ValueError(f"eviction must be one of {EVICTION_POLICIES}, got {self.eviction!r}")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if self.quota is not None:
            if self.quota < 0:
                raise ValueError("quota must be non-negative")
            if self.capacity is not None and self.quota > self.capacity:
                raise ValueError(f"quota {self.quota} exceeds capacity {self.capacity}")
        if self.ttl is not None and self.ttl < 0:
            raise ValueError("ttl must be non-negative")


@dataclass
class _Meta:
    owner: str | None
    write_tick: int
    utility: float | None = None
    n_ratings: int = 0


class StorageHandler:
    def __init__(
        self,
        collection: Collection,
        policy: StoragePolicy | None = None,
        log_path: str | Path | None = None,
    ):
        self.collection = collection
        self.policy = policy or StoragePolicy(capacity=collection.capacity)
        if self.policy.capacity is not None and collection.capacity is None:
            collection.capacity = self.policy.capacity
        self.clock = 0
        self._meta: dict[int, _Meta] = {}
        self._recency: OrderedDict[int, None] = OrderedDict()
        self._lock = threading.RLock()
        self._log: IO[str] | None = None
        self.log_path = None if log_path is None else Path(log_path)
        for doc in collection:
            self._meta[doc.id] = _Meta(collection.owner(doc), 0)
            self._recency[doc.id] = None
        if self.log_path is not None:
            self._log = open(self.log_path, "a", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.collection)

    # -- access rules -------------------------------------------------

    def check_access(self, model_id: str | None, doc: Document) -> bool:
        return self.collection.visible(doc, model_id)

    def usage(self, model_id: str | None = None) -> dict[str | None, int] | int:
        counts: dict[str | None, int] = {}
        for meta in self._meta.values():
            counts[meta.owner] = counts.get(meta.owner, 0) + 1
        return counts if model_id is None else counts.get(model_id, 0)

    def write_tick(self, doc_id: int) -> int:
        return self._meta[doc_id].write_tick

    def utility(self, doc_id: int) -> float | None:
        return self._meta[doc_id].utility

    def lru_order(self) -> list[int]:
        """Document ids from least to most recently used."""
        return list(self._recency)

    def next_id(self) -> int:
        return max(self._meta, default=-1) + 1

    # -- writes -------------------------------------------------------

    def store(self, model_id: str, doc: Document) -> int:
        with self._lock:
            self.collection.check(doc)
            if doc.namespace is not None and doc.namespace != model_id:
                raise RemlError(f"model {model_id!r} cannot write into namespace {doc.namespace!r}")
            if self.policy.quantize and doc.vector is not None:
                doc = replace(doc, vector=doc.vector.astype(np.float16).astype(np.float64))
            existing = self._meta.get(doc.id)
            if existing is not None:
                if existing.owner != model_id and existing.owner is not None:
                    raise RemlError(f"document {doc.id} belongs to {existing.owner!r}")
            else:
                self._make_room(model_id)
            self.collection.add(doc)
            self._meta[doc.id] = _Meta(model_id, self.clock)
            self._recency[doc.id] = None
            self._recency.move_to_end(doc.id)
            self._emit({"event": "store", "tick": self.clock, "model_id": model_id, "document": doc.to_dict()})
            self.clock += 1
            return doc.id

    def _make_room(self, model_id: str) -> None:
        quota = self.policy.quota
        if quota is not None and self.usage(model_id) >= quota:
            own = [i for i, m in self._meta.items() if m.owner == model_id]
            if not own:
                raise QuotaExceeded(f"model {model_id!r} has no storage quota left")
            self._evict(self._victim(own), "quota")
            return
        cap = self.policy.capacity
        if cap is not None and len(self.collection) >= cap:
            self._evict(self._victim(list(self._meta)), "capacity")

    def _victim(self, candidates: list[int]) -> int:
        if self.policy.eviction == "lru":
            pool = set(candidates)
            return next(i for i in self._recency if i in pool)

        def key(i: int) -> tuple[float, int, int]:
            m = self._meta[i]
            return (-np.inf if m.utility is None else m.utility, m.write_tick, i)

        return min(candidates, key=key)

    def _evict(self, doc_id: int, reason: str) -> None:
        self.collection.remove(doc_id)
        del self._meta[doc_id]
        self._recency.pop(doc_id, None)
        self._emit({"event": "evict", "tick": self.clock, "id": doc_id, "reason": reason})

    def remove(self, doc_id: int) -> None:
        with self._lock:
            self._evict(doc_id, "delete")

    def evict_expired(self, now: int | None = None) -> int:
        if self.policy.ttl is None:
            return 0
        now = self.clock if now is None else now
        with self._lock:
            expired = [i for i, m in self._meta.items() if m.write_tick + self.policy.ttl < now]
            for doc_id in sorted(expired):
                self._evict(doc_id, "ttl")
            return len(expired)

    def record_query(self, doc_ids: list[int]) -> None:
        """Advance the clock for one query and mark its results as used."""
        with self._lock:
            present = [i for i in doc_ids if i in self._recency]
            for doc_id in present:
                self._recency.move_to_end(doc_id)
            self._emit({"event": "touch", "tick": self.clock, "ids": present})
            self.clock += 1

    def record_utility(self, doc_id: int, value: float) -> None:
        """Fold one utility observation into a document's running mean."""
        with self._lock:
            meta = self._meta.get(doc_id)
            if meta is None:
                return
            n = meta.n_ratings + 1
            meta.utility = value if meta.utility is None else meta.utility + (value - meta.utility) / n
            meta.n_ratings = n
            self._emit({"event": "utility", "tick": self.clock, "id": doc_id, "value": float(value)})

    # -- persistence --------------------------------------------------

    def _emit(self, event: dict[str, Any]) -> None:
        if self._log is not None:
            self._log.write(dumps(event) + "\n")

    def flush(self) -> None:
        if self._log is not None:
            self._log.flush()

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None

    def compact(self, snapshot_path: str | Path) -> None:
        """Write the current collection as an index snapshot and restart the log."""
        with self._lock:
            write_snapshot(snapshot_path, self.collection)
            if self.log_path is not None:
                self.close()
                self.log_path.write_text("", encoding="utf-8")
                self._log = open(self.log_path, "a", encoding="utf-8")

    def replay(self, log_path: str | Path) -> int:
        """Apply a previously written event log; returns the number of events."""
        count = 0
        with self._lock, open(log_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                ev = json.loads(line)
                kind = ev["event"]
                if kind == "store":
                    doc = Document.from_dict(ev["document"])
                    self.collection.add(doc)
                    self._meta[doc.id] = _Meta(ev["model_id"], ev["tick"])
                    self._recency[doc.id] = None
                    self._recency.move_to_end(doc.id)
                    self.clock = ev["tick"] + 1
                elif kind == "evict":
                    if ev["id"] in self._meta:
                        self.collection.remove(ev["id"])
                        del self._meta[ev["id"]]
                        self._recency.pop(ev["id"], None)
                elif kind == "touch":
                    for doc_id in ev["ids"]:
                        if doc_id in self._recency:
                            self._recency.move_to_end(doc_id)
                    self.clock = ev["tick"] + 1
                elif kind == "utility":
                    meta = self._meta.get(ev["id"])
                    if meta is not None:
                        n = meta.n_ratings + 1
                        v = ev["value"]
                        meta.utility = v if meta.utility is None else meta.utility + (v - meta.utility) / n
                        meta.n_ratings = n
                else:
                    raise RemlError(f"{log_path}: unknown event {kind!r}")
                count += 1
        return count

    @classmethod
    def open(
        cls,
        dimension: int,
        policy: StoragePolicy | None = None,
        snapshot_path: str | Path | None = None,
        log_path: str | Path | None = None,
    ) -> StorageHandler:
        """Restore from an optional snapshot plus the log, then keep logging."""
        policy = policy or StoragePolicy()
        if snapshot_path is not None and Path(snapshot_path).exists():
            collection = read_snapshot(snapshot_path, capacity=policy.capacity)
            if collection.dimension != dimension:
                raise RemlError(f"snapshot dimension {collection.dimension} != configured {dimension}")
        else:
            collection = Collection(dimension, capacity=policy.capacity)
        handler = cls(collection, policy)
        if log_path is not None:
            if Path(log_path).exists():
                handler.replay(log_path)
            handler.log_path = Path(log_path)
            handler._log = open(log_path, "a", encoding="utf-8")
        return handler


def store(handler: StorageHandler, model_id: str, doc: Document) -> int:
    return handler.store(model_id, doc)


def evict_expired(handler: StorageHandler, now: int) -> int:
    return handler.evict_expired(now)


def check_access(handler: StorageHandler, model_id: str, doc: Document) -> bool:
    return handler.check_access(model_id, doc)
