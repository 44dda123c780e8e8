"""Script jobs as plain objects.

KottaJob mirrors the wire description for jobtype="script": the executable
line, the script file name, and the script body travel with the job and the
worker materialises the script in the sandbox before running the executable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .connection import TERMINAL_STATUSES, Connection
from .errors import NotSubmitted


@dataclass
class KottaJob:
    jobtype: str = "script"
    jobname: str = "job"
    executable: str = ""
    script_name: str = ""
    script: str = ""
    queue: str = "Test"
    walltime_minutes: int = 10
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)

    job_id: str | None = field(default=None, init=False)
    _conn: Connection | None = field(default=None, init=False, repr=False)

    def to_description(self) -> dict:
        if self.jobtype == "script":
            for name in ("executable", "script_name", "script"):
                if not getattr(self, name):
                    raise ValueError(f"script job requires {name}")
        description = {
            "jobtype": self.jobtype,
            "jobname": self.jobname,
            "queue": self.queue,
            "walltime_minutes": self.walltime_minutes,
            "executable": self.executable,
            "script_name": self.script_name,
            "script": self.script,
        }
        if self.inputs:
            description["inputs"] = list(self.inputs)
        if self.outputs:
            description["outputs"] = list(self.outputs)
        return description

    def submit(self, conn: Connection) -> str:
        self.job_id = conn.submit(self.to_description())
        self._conn = conn
        return self.job_id

    def _bound(self, conn: Connection | None) -> Connection:
        conn = conn or self._conn
        if self.job_id is None or conn is None:
            raise NotSubmitted("job has not been submitted")
        return conn

    def status(self, conn: Connection | None = None) -> str:
        return self._bound(conn).job(self.job_id)["status"]

    def wait(self, conn: Connection | None = None,
             timeout: float | None = None) -> str:
        """Poll until terminal; returns the final status."""
        conn = self._bound(conn)
        deadline = None if timeout is None else time.monotonic() + timeout
        delay = conn.poll_initial
        while True:
            status = conn.job(self.job_id)["status"]
            if status in TERMINAL_STATUSES:
                return status
            if deadline is not None and time.monotonic() >= deadline:
                raise TimeoutError(f"job {self.job_id} still {status}")
            time.sleep(delay)
            delay = min(delay * 2, conn.poll_cap)

    @property
    def stdout(self) -> str:
        conn = self._bound(None)
        return conn.stream(self.job_id, "stdout").decode("utf-8", "replace")

    @property
    def stderr(self) -> str:
        conn = self._bound(None)
        return conn.stream(self.job_id, "stderr").decode("utf-8", "replace")
