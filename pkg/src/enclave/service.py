"""Composition root: wires auth, catalog, broker, autoscaler, and gateway
around one shared clock and audit chain, and offers the seeding and worker
plumbing that tests, demos, and the CLI's `serve` verb all use.
"""

from __future__ import annotations

import os
import secrets
import threading
from typing import Optional

from .audit import AuditLog
from .auth import AuthService, Role
from .autoscaler import Autoscaler, build_pools
from .broker import Broker
from .catalog import Catalog
from .clock import LogicalClock
from .gateway import EGRESS_ENCLAVE_ONLY, Gateway
from .worker import WorkerAgent

INSTANCE_ROLE = "enclave-worker"


class Enclave:
    """One in-process deployment of every service over a shared clock."""

    def __init__(self, data_dir: str, *, clock=None,
                 egress: str = EGRESS_ENCLAVE_ONLY,
                 admin_key: Optional[str] = None,
                 hot_capacity_bytes: int = 64 * 1024 * 1024,
                 persist_jobs: bool = True,
                 fsync: bool = False,
                 audit_file: bool = False,
                 autoscaler_config: Optional[dict] = None,
                 runners: Optional[dict[str, list[str]]] = None,
                 requirements_mirror: Optional[str] = None):
        os.makedirs(data_dir, exist_ok=True)
        self.data_dir = data_dir
        self.clock = clock if clock is not None else LogicalClock()
        self.admin_key = admin_key or secrets.token_urlsafe(16)
        audit_path = os.path.join(data_dir, "audit.jsonl") if audit_file else None
        self.audit = AuditLog(self.clock, path=audit_path)
        self.auth = AuthService(self.clock, self.audit)
        self.catalog = Catalog(self.clock, self.audit, self.auth,
                               data_dir=os.path.join(data_dir, "objects"),
                               hot_capacity_bytes=hot_capacity_bytes)
        store = os.path.join(data_dir, "jobs.jsonl") if persist_jobs else None
        self.broker = Broker(self.clock, self.audit, self.auth,
                             store_path=store, fsync=fsync)
        self.auth.bind_job_resolver(self.broker.resolve_for_grant)
        self.market, self.pools = build_pools(autoscaler_config)
        self.autoscaler = Autoscaler(self.clock, self.market, self.pools,
                                     broker=self.broker)
        self.gateway = Gateway(auth=self.auth, catalog=self.catalog,
                               broker=self.broker, audit=self.audit,
                               egress=egress, admin_key=self.admin_key)
        self._runners = dict(runners or {})
        self._mirror = requirements_mirror
        self._worker_serial = 0
        self._worker_threads: list[tuple[threading.Thread, threading.Event]] = []
        self.auth.add_role(Role(INSTANCE_ROLE, "instance default (no data access)",
                                is_instance_default=True))

    # --- seeding -----------------------------------------------------------------

    def add_role(self, role_id: str, description: str = "",
                 auditor: bool = False) -> Role:
        return self.auth.add_role(Role(role_id, description, is_auditor=auditor))

    def add_user(self, principal_id: str, roles: set[str],
                 register: bool = True) -> Optional[str]:
        """Seed a principal; returns their refresh token when registering."""
        self.auth.add_principal(principal_id, roles=roles)
        if not register:
            return None
        return self.auth.register_client(principal_id, approved=True).token_id

    def access_token_for(self, refresh_token: str) -> str:
        return self.auth.refresh_access_token(refresh_token).token_id

    # --- workers ------------------------------------------------------------------

    def spawn_worker(self, pool: str = "Test", instance_id: Optional[str] = None,
                     register: bool = True, **kwargs) -> WorkerAgent:
        if instance_id is None:
            self._worker_serial += 1
            instance_id = f"w-{self._worker_serial:04d}"
        if register:
            self.broker.register_instance(instance_id, pool)
        kwargs.setdefault("runners", self._runners)
        kwargs.setdefault("requirements_mirror", self._mirror)
        return WorkerAgent(
            instance_id, pool, broker=self.broker, catalog=self.catalog,
            auth=self.auth, clock=self.clock,
            sandbox_root=os.path.join(self.data_dir, "sandboxes"), **kwargs)

    def start_worker_thread(self, agent: WorkerAgent) -> threading.Event:
        stop = threading.Event()
        thread = threading.Thread(target=agent.run_loop, args=(stop,),
                                  name=f"worker-{agent.instance_id}", daemon=True)
        thread.start()
        self._worker_threads.append((thread, stop))
        return stop

    # --- lifecycle ---------------------------------------------------------------

    def start_gateway(self, host: str = "127.0.0.1", port: int = 0) -> int:
        return self.gateway.start(host, port)

    def close(self) -> None:
        for _, stop in self._worker_threads:
            stop.set()
        for thread, _ in self._worker_threads:
            thread.join(timeout=5)
        self._worker_threads.clear()
        self.gateway.stop()
        self.broker.close()
