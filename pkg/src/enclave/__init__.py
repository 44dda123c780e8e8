"""Secure data enclave: authenticated job execution over protected datasets.

Jobs enter through a REST gateway into tiered queues, workers assume the
submitting user's role for exactly the duration of their job, every data
access and status change lands in a hash-chained audit log, and object
storage moves bytes between cold and hot tiers under an LRU policy. Elastic
capacity comes from a simulated cloud with a warm on-demand pool and a
cheapest-of-four-zones spot market.
"""

from .audit import ALLOWED, DENIED, AuditEvent, AuditLog, verify_events
from .auth import AuthService, Role
from .autoscaler import Autoscaler, Pool, SpotMarket, build_pools
from .broker import Broker, JobRecord, UtilizationSample
from .catalog import Catalog, SignedRequest
from .clock import LogicalClock, SystemClock
from .errors import EnclaveError
from .gateway import Gateway
from .service import Enclave
from .worker import WorkerAgent

__all__ = [
    "ALLOWED",
    "DENIED",
    "AuditEvent",
    "AuditLog",
    "AuthService",
    "Autoscaler",
    "Broker",
    "Catalog",
    "Enclave",
    "EnclaveError",
    "Gateway",
    "JobRecord",
    "LogicalClock",
    "Pool",
    "Role",
    "SignedRequest",
    "SpotMarket",
    "SystemClock",
    "UtilizationSample",
    "WorkerAgent",
    "build_pools",
    "verify_events",
]

__version__ = "0.1.0"
