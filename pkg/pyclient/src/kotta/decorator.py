"""The @kottajob decorator: run a plain function as an enclave job.

The decorated function keeps its signature. Two keyword-only extras are
recognised at call time and stripped before canning:

    inputs=[...]    object URIs staged into the sandbox before execution
    outputs=[...]   sandbox-relative files shipped back to storage afterwards

With block=True (the default) a call submits, waits, and returns the remote
return value, so the call site reads exactly like a local call. With
block=False it returns a KottaFuture immediately.
"""

from __future__ import annotations

import functools

from .canning import CannedTask
from .connection import Connection
from .futures import KottaFuture


def kottajob(conn: Connection, queue: str = "Test", walltime_minutes: int = 10,
             block: bool = True, requirements: str = ""):
    def decorate(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            inputs = kwargs.pop("inputs", None)
            outputs = kwargs.pop("outputs", None)
            task = CannedTask.create(func, args=args, kwargs=kwargs,
                                     inputs=inputs, outputs=outputs,
                                     requirements=requirements)
            job_id = conn.submit(task.to_description(queue, walltime_minutes))
            future = KottaFuture(conn, job_id)
            if block:
                return future.result()
            return future

        return wrapper

    return decorate
