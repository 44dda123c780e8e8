"""Futures over submitted jobs.

A future caches its outcome: result() blocks until the job is terminal the
first time, then answers from memory forever, so calling it repeatedly never
re-polls or resubmits. Failures raise RemoteExecutionError (or its
WalltimeExceeded subtype) with the remote streams attached.
"""

from __future__ import annotations

import pickle
import time

from .connection import TERMINAL_STATUSES, Connection
from .errors import KottaError, RemoteExecutionError, WalltimeExceeded

PENDING = "pending"
DONE = "done"
FAILED = "failed"

_UNSET = object()


class KottaFuture:
    def __init__(self, conn: Connection, job_id: str):
        self.conn = conn
        self.job_id = job_id
        self._value = _UNSET
        self._error: Exception | None = None

    def __repr__(self):
        return f"KottaFuture(job_id={self.job_id!r}, state={self.state!r})"

    @property
    def state(self) -> str:
        if self._value is not _UNSET:
            return DONE
        if self._error is not None:
            return FAILED
        status = self.conn.job(self.job_id)["status"]
        if status == "completed":
            return DONE
        if status in TERMINAL_STATUSES:
            return FAILED
        return PENDING

    def done(self) -> bool:
        return self.state != PENDING

    def result(self, timeout: float | None = None):
        """Block until terminal; return the remote value or raise its error."""
        if self._value is not _UNSET:
            return self._value
        if self._error is not None:
            raise self._error
        record = self._wait(timeout)
        if record["status"] == "completed":
            self._value = pickle.loads(self.conn.result_bytes(self.job_id))
            return self._value
        stdout = self._text("stdout")
        stderr = self._text("stderr")
        message = record.get("error") or f"job {record['status']}"
        kind = WalltimeExceeded if "walltime" in message.lower() else RemoteExecutionError
        self._error = kind(f"{message}\n--- remote stderr ---\n{stderr}",
                           stdout=stdout, stderr=stderr)
        raise self._error

    def _wait(self, timeout: float | None) -> dict:
        deadline = None if timeout is None else time.monotonic() + timeout
        delay = self.conn.poll_initial
        while True:
            record = self.conn.job(self.job_id)
            if record["status"] in TERMINAL_STATUSES:
                return record
            if deadline is not None and time.monotonic() >= deadline:
                raise TimeoutError(f"job {self.job_id} still {record['status']} "
                                   f"after {timeout}s")
            time.sleep(delay if deadline is None
                       else min(delay, max(deadline - time.monotonic(), 0.0)))
            delay = min(delay * 2, self.conn.poll_cap)

    def _text(self, name: str) -> str:
        return self.conn.stream(self.job_id, name).decode("utf-8", "replace")

    @property
    def stdout(self) -> str:
        self._require_terminal()
        return self._text("stdout")

    @property
    def stderr(self) -> str:
        self._require_terminal()
        return self._text("stderr")

    def _require_terminal(self) -> None:
        if self.state == PENDING:
            raise KottaError(f"job {self.job_id} is not terminal yet")
