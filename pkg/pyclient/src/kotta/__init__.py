"""Python client for the enclave REST API.

Typical use::

    import kotta

    conn = kotta.Connection("https://enclave.example", token_file="~/.kotta/token")

    @kotta.kottajob(conn=conn, queue="Test", walltime_minutes=5)
    def my_sum(seq):
        return sum(seq)

    my_sum(range(100))   # runs remotely, returns 4950

Decorated functions must be self-contained: any imports they need go inside
the function body, because only builtins travel with the canned payload.
"""

from .canning import FORMAT_VERSION, CannedTask, can, uncan
from .connection import Connection
from .decorator import kottajob
from .errors import (
    AuthFailure,
    DeserializationError,
    KottaError,
    NotSubmitted,
    RemoteExecutionError,
    RequestFailed,
    VersionMismatch,
    WalltimeExceeded,
)
from .futures import KottaFuture
from .jobs import KottaJob

__version__ = "0.1.0"

__all__ = [
    "AuthFailure",
    "CannedTask",
    "Connection",
    "DeserializationError",
    "FORMAT_VERSION",
    "KottaError",
    "KottaFuture",
    "KottaJob",
    "NotSubmitted",
    "RemoteExecutionError",
    "RequestFailed",
    "VersionMismatch",
    "WalltimeExceeded",
    "can",
    "kottajob",
    "uncan",
    "__version__",
]
