"""Canning: serializing a function call into a portable envelope.

The envelope is a versioned dict of opaque blobs; the service stores and
ships it without interpretation, and only the worker-side runner opens it.
Functions must be self-contained: builtins, closure cells, defaults, and
arguments travel with the code object, module-level globals do not, so
anything else should be imported inside the function body.
"""

from __future__ import annotations

import base64
import builtins
import marshal
import pickle
import types
from dataclasses import dataclass, field

from .errors import DeserializationError, VersionMismatch

FORMAT_VERSION = 1


def can(func, args: tuple = (), kwargs: dict | None = None) -> bytes:
    """Serialize `func(*args, **kwargs)` into envelope bytes."""
    closure = [cell.cell_contents for cell in (func.__closure__ or ())]
    function_blob = pickle.dumps({
        "code": marshal.dumps(func.__code__),
        "name": func.__name__,
        "defaults": func.__defaults__,
        "closure": closure,
    })
    return pickle.dumps({
        "format_version": FORMAT_VERSION,
        "function_blob": function_blob,
        "args_blob": pickle.dumps(tuple(args)),
        "kwargs_blob": pickle.dumps(dict(kwargs or {})),
    })


def uncan(blob: bytes):
    """Reverse of can(): returns (func, args, kwargs) ready to call."""
    try:
        envelope = pickle.loads(blob)
    except Exception as exc:
        raise DeserializationError(f"envelope does not unpickle: {exc}") from exc
    if not isinstance(envelope, dict) or "format_version" not in envelope:
        raise DeserializationError("envelope is not a versioned task dict")
    version = envelope["format_version"]
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"envelope version {version}, supported {FORMAT_VERSION}")
    try:
        meta = pickle.loads(envelope["function_blob"])
        code = marshal.loads(meta["code"])
        cells = tuple(types.CellType(v) for v in meta["closure"])
        func = types.FunctionType(
            code, {"__builtins__": builtins}, meta["name"],
            meta["defaults"], cells or None)
        args = pickle.loads(envelope["args_blob"])
        kwargs = pickle.loads(envelope["kwargs_blob"])
    except (VersionMismatch, DeserializationError):
        raise
    except Exception as exc:
        raise DeserializationError(f"envelope contents malformed: {exc}") from exc
    return func, args, kwargs


@dataclass
class CannedTask:
    """One remote call: envelope plus its staging and environment needs."""

    envelope: bytes
    jobname: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    requirements: str = ""

    @classmethod
    def create(cls, func, args=(), kwargs=None, *, inputs=None, outputs=None,
               requirements: str = "") -> "CannedTask":
        return cls(
            envelope=can(func, args, kwargs),
            jobname=getattr(func, "__name__", "canned"),
            inputs=list(inputs or []),
            outputs=list(outputs or []),
            requirements=requirements,
        )

    def to_description(self, queue: str, walltime_minutes: int) -> dict:
        description = {
            "jobtype": "canned_function",
            "jobname": self.jobname,
            "queue": queue,
            "walltime_minutes": walltime_minutes,
            "payload_b64": base64.b64encode(self.envelope).decode("ascii"),
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        if self.requirements:
            description["requirements"] = self.requirements
        return description
