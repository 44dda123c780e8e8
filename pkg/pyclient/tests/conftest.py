"""A live deployment for client tests: real HTTP, real worker subprocesses."""

from __future__ import annotations

import sys

import pytest

kotta = pytest.importorskip("kotta")

from enclave import Enclave, LogicalClock
from enclave.auth import write_token_file

RUNNER = [sys.executable, "-m", "kotta.runner"]

HELLO_SCRIPT = "#!/bin/bash\necho 'Hello world'\n"


@pytest.fixture
def clock():
    return LogicalClock()


@pytest.fixture
def enclave(tmp_path, clock):
    e = Enclave(str(tmp_path / "enclave"), clock=clock, persist_jobs=False)
    yield e
    e.close()


@pytest.fixture
def deployment(enclave, tmp_path):
    """(connection, enclave): gateway over HTTP plus two canned-capable workers."""
    enclave.add_role("analyst")
    stops = [enclave.start_worker_thread(
                 enclave.spawn_worker("Test", runners={"canned_function": RUNNER}))
             for _ in range(2)]
    port = enclave.start_gateway("127.0.0.1", 0)
    refresh = enclave.add_user("clara", {"analyst"})
    token_file = tmp_path / "token"
    write_token_file(str(token_file), refresh)
    conn = kotta.Connection(f"http://127.0.0.1:{port}", token_file=str(token_file),
                            poll_initial=0.05, poll_cap=0.5)
    yield conn, enclave
    for stop in stops:
        stop.set()
