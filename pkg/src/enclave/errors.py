"""Exception hierarchy shared by all enclave services.

Every error carries a stable ``code`` (its class name) which the gateway maps
onto HTTP statuses and the CLI prints verbatim.
"""

from __future__ import annotations


class EnclaveError(Exception):
    """Base class for all enclave service errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- auth ------------------------------------------------------------------

class AuthError(EnclaveError):
    pass


class UnknownPrincipal(AuthError):
    pass


class AlreadyRegistered(AuthError):
    pass


class UnknownToken(AuthError):
    pass


class ExpiredToken(AuthError):
    pass


class RevokedToken(AuthError):
    pass


class GrantConflict(AuthError):
    pass


class NoActiveGrant(AuthError):
    pass


class AuthFailure(AuthError):
    """Credential rejected at a service boundary (wraps the specific cause)."""


# --- catalog ---------------------------------------------------------------

class CatalogError(EnclaveError):
    pass


class AccessDenied(CatalogError):
    pass


class InvalidUri(CatalogError):
    pass


class BadSignature(CatalogError):
    pass


class ExpiredSignature(CatalogError):
    pass


class UnknownObject(CatalogError):
    pass


# --- broker ----------------------------------------------------------------

class BrokerError(EnclaveError):
    pass


class UnknownQueue(BrokerError):
    pass


class UnknownJob(BrokerError):
    pass


class MalformedJob(BrokerError):
    pass


class UnknownInstance(BrokerError):
    pass


class NoLiveDelivery(BrokerError):
    pass


class AlreadyTerminal(BrokerError):
    pass


class TooEarly(BrokerError):
    pass


# --- worker ----------------------------------------------------------------

class WorkerError(EnclaveError):
    pass


class ChecksumMismatch(WorkerError):
    pass


class StagingConflict(WorkerError):
    pass


class UnknownRequirement(WorkerError):
    pass


class RunnerMissing(WorkerError):
    pass


class MissingOutput(WorkerError):
    pass


class WorkerCrash(RuntimeError):
    """Simulated hard death of a worker instance (fault injection in tests)."""


# --- autoscaler ------------------------------------------------------------

class AutoscalerError(EnclaveError):
    pass


class BidTooLow(AutoscalerError):
    pass
