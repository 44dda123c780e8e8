"""Execution agent.

Each agent owns one instance identity bound to a pool and processes one job at
a time: dequeue, assume the job owner's role, stage inputs into an isolated
sandbox (files appear under their URI basename), resolve requirements against
the offline package mirror, execute the payload with streams captured, stage
declared outputs and the result object back into the catalog, report terminal
status, release the role. Any step failure turns into ``fail_job`` with the
diagnostic on stderr; the role grant is always released unless the instance
dies outright.

Script jobs run their ``executable`` in the sandbox after the ``script`` text
is written to ``script_name``. Canned-function payloads are opaque: they are
handed to an external runner command as ``<runner> <payload-file> <args-file>
<result-file>``; exit 0 with the result file written means success.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import shutil
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import broker as _broker
from .broker import Broker, JobRecord, UtilizationSample
from .catalog import Catalog
from .errors import (
    ChecksumMismatch,
    EnclaveError,
    MissingOutput,
    RunnerMissing,
    StagingConflict,
    UnknownRequirement,
    WorkerCrash,
)

RESULT_BUCKET = "kotta-results"

# sandbox-internal names kept out of the user's basename namespace
PAYLOAD_FILE = ".payload.bin"
ARGS_FILE = ".job.json"
RESULT_FILE = ".result.bin"

OK = "ok"
TIMEOUT = "timeout"
CRASHED = "crashed"

DEFAULT_SAMPLE_INTERVAL = 30.0


@dataclass
class Sandbox:
    job_id: str
    working_dir: str
    staged_inputs: list[tuple[str, str]] = field(default_factory=list)   # (uri, basename)
    produced_outputs: list[str] = field(default_factory=list)


@dataclass
class ExecutionResult:
    exit_status: str            # "ok" | "nonzero(<code>)" | "crashed" | "timeout"
    stdout: bytes
    stderr: bytes
    result_blob: Optional[bytes] = None
    wall_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.exit_status == OK


def nonzero(code: int) -> str:
    return f"nonzero({code})"


class RequirementsMirror:
    """Offline package mirror: <root>/<name>/<version>/ directories.

    A spec line ``name`` resolves to the newest version present;
    ``name==version`` requires that exact version. Activation means the
    resolved directories are prepended to the job's PYTHONPATH.
    """

    def __init__(self, root: Optional[str]):
        self.root = root

    def resolve(self, requirements: str) -> list[str]:
        paths = []
        for line in requirements.splitlines():
            line = line.strip()
            if not line:
                continue
            name, _, version = line.partition("==")
            name = name.strip()
            version = version.strip()
            entry = os.path.join(self.root, name) if self.root else None
            if not entry or not os.path.isdir(entry):
                raise UnknownRequirement(line)
            versions = sorted(os.listdir(entry))
            if version:
                if version not in versions:
                    raise UnknownRequirement(line)
                chosen = version
            else:
                if not versions:
                    raise UnknownRequirement(line)
                chosen = versions[-1]
            paths.append(os.path.join(entry, chosen))
        return paths


class UtilizationMonitor:
    """Forwards one utilization sample per interval once a job has been
    running for more than five minutes (on the injected clock)."""

    def __init__(self, broker: Broker, clock, instance_id: str, job_id: str,
                 started_at: float, interval: float = DEFAULT_SAMPLE_INTERVAL,
                 sampler: Optional[Callable[[], tuple[float, int]]] = None):
        self._broker = broker
        self._clock = clock
        self._instance_id = instance_id
        self._job_id = job_id
        self._started_at = started_at
        self._interval = float(interval)
        self._sampler = sampler or _default_sampler
        self._next_due = _broker.UTILIZATION_THRESHOLD_SECONDS + self._interval

    def tick(self) -> Optional[UtilizationSample]:
        """Emit and forward a sample if one is due; returns it, else None."""
        elapsed = self._clock.now() - self._started_at
        if elapsed < self._next_due:
            return None
        cpu, mem = self._sampler()
        sample = UtilizationSample(
            job_id=self._job_id,
            t_offset_seconds=elapsed,
            cpu_fraction=min(1.0, max(0.0, cpu)),
            mem_bytes=int(mem),
        )
        self._broker.record_utilization(self._instance_id, self._job_id, sample)
        self._next_due += self._interval
        return sample


def _default_sampler() -> tuple[float, int]:
    try:
        import psutil
        return psutil.cpu_percent(interval=None) / 100.0, psutil.Process().memory_info().rss
    except Exception:
        return 0.0, 0


# fault injection: called with a step name; raising WorkerCrash simulates
# the instance dying at that point with no cleanup
CrashGate = Callable[[str], None]


class WorkerAgent:
    def __init__(self, instance_id: str, pool: str, *, broker: Broker, catalog: Catalog,
                 auth, clock, sandbox_root: str,
                 runners: Optional[dict[str, list[str]]] = None,
                 requirements_mirror: Optional[str] = None,
                 visibility_seconds: float = _broker.DEFAULT_VISIBILITY_SECONDS,
                 heartbeat_seconds: float = 30.0,
                 sample_interval: float = DEFAULT_SAMPLE_INTERVAL,
                 crash_gate: Optional[CrashGate] = None):
        self.instance_id = instance_id
        self.pool = pool
        self._broker = broker
        self._catalog = catalog
        self._auth = auth
        self._clock = clock
        self._sandbox_root = sandbox_root
        self._runners = dict(runners or {})
        self._mirror = RequirementsMirror(requirements_mirror)
        self._visibility = visibility_seconds
        self._heartbeat = heartbeat_seconds
        self._sample_interval = sample_interval
        self._crash = crash_gate or (lambda step: None)
        os.makedirs(sandbox_root, exist_ok=True)

    # --- top-level loop ---------------------------------------------------------

    def process_one(self, queue: Optional[str] = None) -> Optional[str]:
        """Pull and fully process one job; returns its id, or None if idle.

        A WorkerCrash from the crash gate models the machine dying: nothing
        is cleaned up, the role grant stays open, and the live delivery is
        left to lapse back onto the queue via its visibility timeout.
        """
        queue = queue or self.pool
        delivery = self._broker.dequeue(self.instance_id, queue, self._visibility)
        if delivery is None:
            return None
        self._crash("after_dequeue")
        job = self._broker.record(delivery.job_id)
        grant = None
        sandbox = None
        try:
            grant = self._auth.assume_role(self.instance_id, job.job_id)
            self._crash("after_assume")
            sandbox = self._make_sandbox(job.job_id)
            try:
                self.stage_in(sandbox, job.inputs, grant)
                self._crash("after_stage_in")
                env_paths = self.prepare_env(job.requirements)
                self._crash("after_prepare")
                self._broker.start_execution(self.instance_id, job.job_id)
                result = self.execute(job, sandbox, extra_pythonpath=env_paths)
                self._crash("after_execute")
                if result.ok:
                    result_uri = self.stage_out(sandbox, job.outputs, result.result_blob, grant,
                                                job=job, execution=result)
                    self._crash("before_complete")
                    self._broker.complete_job(self.instance_id, job.job_id, result_uri,
                                              stdout=result.stdout, stderr=result.stderr)
                else:
                    self._broker.fail_job(self.instance_id, job.job_id,
                                          error=f"exit_status={result.exit_status}",
                                          stdout=result.stdout, stderr=result.stderr)
            except EnclaveError as exc:
                self._broker.fail_job(self.instance_id, job.job_id,
                                      error=f"{exc.code}: {exc}",
                                      stderr=f"{exc.code}: {exc}".encode())
            self._crash("after_terminal")
        except WorkerCrash:
            raise
        except BaseException:
            self._cleanup(job.job_id, grant, sandbox)
            raise
        self._cleanup(job.job_id, grant, sandbox)
        return job.job_id

    def _cleanup(self, job_id: str, grant, sandbox: Optional[Sandbox]) -> None:
        if sandbox is not None:
            shutil.rmtree(sandbox.working_dir, ignore_errors=True)
        if grant is not None and self._auth.active_grant(self.instance_id) is not None:
            self._auth.release_role(self.instance_id, job_id)

    def run_loop(self, stop: threading.Event, idle_sleep: float = 0.05) -> None:
        """Poll until `stop` is set; used when agents run on host threads."""
        backoff = idle_sleep
        while not stop.is_set():
            try:
                job_id = self.process_one()
            except WorkerCrash:
                return
            if job_id is None:
                time.sleep(backoff)
                backoff = min(backoff * 2, 1.0)
            else:
                backoff = idle_sleep

    # --- individual steps ----------------------------------------------------------

    def _make_sandbox(self, job_id: str) -> Sandbox:
        path = os.path.join(self._sandbox_root, f"{job_id}-{uuid.uuid4().hex[:8]}")
        os.makedirs(path)
        return Sandbox(job_id=job_id, working_dir=path)

    def stage_in(self, sandbox: Sandbox, inputs: list[str], grant) -> list[str]:
        """Fetch each input under the assumed role; files land by URI basename."""
        staged = []
        seen: set[str] = set()
        for uri in inputs:
            basename = os.path.basename(uri)
            if basename in seen:
                raise StagingConflict(f"duplicate input basename: {basename}")
            seen.add(basename)
            request = self._catalog.sign_url(self.instance_id, uri, "read", ttl_seconds=300)
            data = self._catalog.get_object(request)
            expected = self._catalog.stat(uri).checksum
            if hashlib.sha256(data).hexdigest() != expected:
                raise ChecksumMismatch(uri)
            local = os.path.join(sandbox.working_dir, basename)
            with open(local, "wb") as fh:
                fh.write(data)
            sandbox.staged_inputs.append((uri, basename))
            staged.append(local)
        return staged

    def prepare_env(self, requirements: str) -> list[str]:
        """Resolve the newline-separated `name[==version]` specs; empty is a no-op."""
        if not requirements.strip():
            return []
        return self._mirror.resolve(requirements)

    def execute(self, job: JobRecord, sandbox: Sandbox,
                extra_pythonpath: Optional[list[str]] = None,
                timeout_seconds: Optional[float] = None) -> ExecutionResult:
        """Run the payload in the sandbox with streams captured and the
        remaining walltime enforced as a hard kill."""
        if timeout_seconds is None:
            timeout_seconds = self._remaining_walltime(job)
        env = dict(os.environ)
        if extra_pythonpath:
            prior = env.get("PYTHONPATH", "")
            env["PYTHONPATH"] = os.pathsep.join(extra_pythonpath + ([prior] if prior else []))
        env["KOTTA_JOB_ID"] = job.job_id
        if job.jobtype == _broker.SCRIPT:
            script_path = os.path.join(sandbox.working_dir, job.script_name)
            with open(script_path, "w", encoding="utf-8") as fh:
                fh.write(job.script)
            argv = shlex.split(job.executable)
            return self._run(argv, sandbox, env, timeout_seconds)
        # canned function: payload bytes are opaque; hand them to the runner
        runner = self._runners.get(_broker.CANNED_FUNCTION)
        if not runner:
            raise RunnerMissing("no runner registered for canned_function payloads")
        payload_path = os.path.join(sandbox.working_dir, PAYLOAD_FILE)
        args_path = os.path.join(sandbox.working_dir, ARGS_FILE)
        result_path = os.path.join(sandbox.working_dir, RESULT_FILE)
        with open(payload_path, "wb") as fh:
            fh.write(job.payload)
        with open(args_path, "w", encoding="utf-8") as fh:
            json.dump({"job_id": job.job_id, "jobname": job.jobname,
                       "inputs": job.inputs, "outputs": job.outputs}, fh)
        argv = list(runner) + [PAYLOAD_FILE, ARGS_FILE, RESULT_FILE]
        result = self._run(argv, sandbox, env, timeout_seconds)
        if result.ok:
            if not os.path.exists(result_path):
                return ExecutionResult(nonzero(0), result.stdout,
                                       result.stderr + b"\nrunner wrote no result file",
                                       wall_seconds=result.wall_seconds)
            with open(result_path, "rb") as fh:
                result.result_blob = fh.read()
        return result

    def _run(self, argv: list[str], sandbox: Sandbox, env: dict,
             timeout_seconds: float) -> ExecutionResult:
        t0 = time.monotonic()
        try:
            proc = subprocess.run(
                argv, cwd=sandbox.working_dir, env=env,
                stdin=subprocess.DEVNULL, capture_output=True,
                timeout=max(timeout_seconds, 0.001),
            )
        except subprocess.TimeoutExpired as exc:
            return ExecutionResult(TIMEOUT, exc.stdout or b"", exc.stderr or b"",
                                   wall_seconds=time.monotonic() - t0)
        except OSError as exc:
            return ExecutionResult(CRASHED, b"", str(exc).encode(),
                                   wall_seconds=time.monotonic() - t0)
        wall = time.monotonic() - t0
        if proc.returncode == 0:
            return ExecutionResult(OK, proc.stdout, proc.stderr, wall_seconds=wall)
        if proc.returncode < 0:
            return ExecutionResult(CRASHED, proc.stdout, proc.stderr, wall_seconds=wall)
        return ExecutionResult(nonzero(proc.returncode), proc.stdout, proc.stderr,
                               wall_seconds=wall)

    def _remaining_walltime(self, job: JobRecord) -> float:
        budget = job.walltime_minutes * 60.0
        if job.running_started_at is not None:
            budget -= self._clock.now() - job.running_started_at
        return max(budget, 0.001)

    def stage_out(self, sandbox: Sandbox, outputs: list[str], result_blob: Optional[bytes],
                  grant, *, job: JobRecord, execution: ExecutionResult) -> str:
        """Write declared outputs and the result object into the catalog under
        the owner's role; returns the result object's URI."""
        for uri in outputs:
            basename = os.path.basename(uri)
            local = os.path.join(sandbox.working_dir, basename)
            if not os.path.exists(local):
                raise MissingOutput(f"declared output {uri} not produced ({basename})")
            with open(local, "rb") as fh:
                self._catalog.put_object(self.instance_id, uri, fh.read())
            sandbox.produced_outputs.append(local)
        result_uri = f"s3://{RESULT_BUCKET}/{job.job_id}/result.bin"
        if result_blob is None:
            # script jobs: a small run manifest stands in as the result object
            result_blob = json.dumps({
                "job_id": job.job_id,
                "exit_status": execution.exit_status,
                "outputs": outputs,
            }).encode()
        self._catalog.put_object(self.instance_id, result_uri, result_blob)
        return result_uri

    def sample_utilization(self, job_id: str, every_n_seconds: Optional[float] = None,
                           sampler: Optional[Callable[[], tuple[float, int]]] = None,
                           ) -> UtilizationMonitor:
        """Monitor for a running job; call .tick() per interval to forward samples."""
        rec = self._broker.record(job_id)
        if rec.running_started_at is None:
            raise RuntimeError(f"{job_id} is not running")
        return UtilizationMonitor(
            self._broker, self._clock, self.instance_id, job_id,
            rec.running_started_at, every_n_seconds or self._sample_interval, sampler,
        )
