import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reml.core import Collection, Document

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def unit_corpus():
    """e1=[1,0], e2=[0,1], e3=[0.6,0.8]."""
    docs = [
        Document(1, vector=[1.0, 0.0]),
        Document(2, vector=[0.0, 1.0]),
        Document(3, vector=[0.6, 0.8]),
    ]
    return Collection(2, docs)


def random_collection(rng, n, d, labels=False, classes=None):
    docs = []
    for i in range(n):
        label = None
        if labels:
            label = int(rng.integers(classes)) if classes else float(rng.normal())
        docs.append(Document(i, vector=rng.normal(size=d), payload_label=label))
    return Collection(d, docs)


class ServerThread:
    """Runs an NdjsonServer on its own event loop in a daemon thread."""

    def __init__(self, state):
        import asyncio
        import threading

        from reml.service import NdjsonServer

        self.loop = asyncio.new_event_loop()
        self.server = NdjsonServer(state, "127.0.0.1", 0)
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()
        self.port = asyncio.run_coroutine_threadsafe(self.server.start(), self.loop).result(10)

    def stop(self):
        import asyncio

        asyncio.run_coroutine_threadsafe(self.server.stop(), self.loop).result(10)
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(10)


_ACCEPTANCE: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    name = report.nodeid.split("::")[-1]
    label = props.get("criterion", f"AC{int(name[7:9])}" if name.startswith("test_ac") else name)
    verdict = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE.append(f"{label} {verdict}: {props.get('detail', '')}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
