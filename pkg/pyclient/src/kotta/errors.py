"""Client-side error taxonomy."""

from __future__ import annotations


class KottaError(Exception):
    pass


class AuthFailure(KottaError):
    """Refresh token rejected, token file unreadable, or 401 after retry."""


class RequestFailed(KottaError):
    """Any non-auth API error; carries the server's error code and status."""

    def __init__(self, message: str, code: str = "", status: int = 0):
        super().__init__(message)
        self.code = code
        self.status = status


class NotSubmitted(KottaError):
    """Job inspected before submit() assigned it an id."""


class RemoteExecutionError(KottaError):
    """The remote function failed; the message carries the remote stderr."""

    def __init__(self, message: str, stdout: str = "", stderr: str = ""):
        super().__init__(message)
        self.stdout = stdout
        self.stderr = stderr


class WalltimeExceeded(RemoteExecutionError):
    """The job was terminated for running past its walltime."""


class VersionMismatch(KottaError):
    """Envelope written by an incompatible client version."""


class DeserializationError(KottaError):
    """Envelope bytes do not decode to a callable task."""
