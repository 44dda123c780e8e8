"""Acceptance gate.

One test per release criterion; a conftest hook prints a PASS/FAIL checklist
line for each as it finishes. Everything runs against an in-process
deployment on a logical clock; criteria 1-7 use script jobs and the REST/CLI
surface only, criteria 8-9 need the `kotta` client package and skip cleanly
when it is not installed.
"""

from __future__ import annotations

import random
import sys
import time

import pytest
import requests

from enclave.broker import COMPLETED, FAILED, TERMINAL
from enclave.errors import AuthError, WorkerCrash

from helpers import hello_job
from test_catalog import ReferenceLru, make_catalog


# --- 1. hello world over REST ---------------------------------------------------------


def test_criterion_1_hello_world(enclave, analyst, clock):
    _, token = analyst
    stop = enclave.start_worker_thread(enclave.spawn_worker("Test"))
    port = enclave.start_gateway("127.0.0.1", 0)
    base = f"http://127.0.0.1:{port}"
    auth = {"Authorization": f"Bearer {token}"}

    t0_wall = time.monotonic()
    t0_sim = clock.now()
    resp = requests.post(base + "/jobs", json=hello_job(), headers=auth, timeout=5)
    assert resp.status_code == 200
    job_id = resp.json()["job_id"]

    status = ""
    while time.monotonic() - t0_wall < 5.0:
        status = requests.get(base + f"/jobs/{job_id}", headers=auth,
                              timeout=5).json()["status"]
        if status in TERMINAL:
            break
        time.sleep(0.02)
    wall = time.monotonic() - t0_wall

    assert status == COMPLETED
    assert clock.now() - t0_sim <= 60.0          # one simulated minute
    assert wall < 5.0
    out = requests.get(base + f"/jobs/{job_id}/stdout", headers=auth, timeout=5)
    assert out.content == b"Hello world\n"
    stop.set()


# --- 2. token lifetimes ----------------------------------------------------------------


def test_criterion_2_token_lifetimes(enclave, clock):
    auth = enclave.auth
    enclave.add_role("r")

    refresh = enclave.add_user("edge", {"r"})
    access = auth.refresh_access_token(refresh)
    clock.advance(3599)
    assert auth.validate(access.token_id).principal_id == "edge"
    clock.advance(1)
    with pytest.raises(AuthError):
        auth.validate(access.token_id)

    fresh = auth.refresh_access_token(refresh)
    session = auth.create_session(fresh.token_id)
    clock.advance(21599)
    assert auth.validate(session.session_id).principal_id == "edge"
    clock.advance(1)
    with pytest.raises(AuthError):
        auth.validate(session.session_id)

    rng = random.Random(1234)
    for trial in range(1000):
        uid = f"u{trial}"
        auth.add_principal(uid, roles={"r"})
        rt = auth.register_client(uid, approved=True).token_id
        minted = [auth.refresh_access_token(rt).token_id
                  for _ in range(rng.randint(0, 2))]
        auth.revoke(rt)
        for _ in range(rng.randint(1, 4)):
            op = rng.choice(["mint", "revoke_again", "validate_old"])
            if op == "mint":
                with pytest.raises(AuthError):
                    auth.refresh_access_token(rt)
            elif op == "revoke_again":
                auth.revoke(rt)           # idempotent, still permanent
            elif op == "validate_old" and minted:
                # outstanding access tokens survive the refresh revocation
                auth.validate(minted[rng.randrange(len(minted))])
        with pytest.raises(AuthError):
            auth.refresh_access_token(rt)


# --- 3. delegation sandwich --------------------------------------------------------------


def test_criterion_3_delegation_sandwich(enclave, analyst):
    _, token = analyst
    rng = random.Random(7)

    protected = []
    for k in range(25):
        uri = f"s3://klab-jobs/protected-{k}.bin"
        enclave.catalog.grant(uri, "analyst", ["read", "write"])
        enclave.catalog.put_object("alice", uri, bytes([k]) * (k + 1))
        protected.append(uri)

    job_ids = []
    for n in range(50):
        inputs = rng.sample(protected, rng.randint(1, 3))
        first = inputs[0].rsplit("/", 1)[1]
        job = hello_job(
            jobname=f"touch-{n}",
            executable="/bin/sh go.sh", script_name="go.sh",
            script=f"#!/bin/sh\ncat {first} > copy-{n}.bin\n",
            inputs=inputs,
            outputs=[f"s3://klab-results/copy-{n}.bin"] if n % 2 == 0 else [],
        )
        job_ids.append(enclave.broker.submit_job(token, job))

    agents = [enclave.spawn_worker("Test") for _ in range(4)]
    while any(enclave.broker.record(j).status not in TERMINAL for j in job_ids):
        for agent in agents:
            agent.process_one()
    assert all(enclave.broker.record(j).status == COMPLETED for j in job_ids)

    # control: a role with no read grant on the protected object
    enclave.add_role("intern")
    mallory = enclave.access_token_for(enclave.add_user("mallory", {"intern"}))
    control = enclave.broker.submit_job(mallory, hello_job(inputs=[protected[0]]))
    enclave.spawn_worker("Test").process_one()
    control_rec = enclave.broker.record(control)
    assert control_rec.status == FAILED
    assert "AccessDenied" in control_rec.error

    assert enclave.catalog.verify_chain().ok

    events = enclave.audit.events()
    instances = {e.actor for e in events if e.action == "role_assume"}
    windows = {i: [] for i in instances}
    open_at = {}
    for e in events:
        if e.action == "role_assume" and e.actor in windows:
            open_at[e.actor] = e
        elif e.action == "role_release" and e.actor in windows:
            start = open_at.pop(e.actor)
            assert start.target == e.target
            windows[e.actor].append((start.seq, e.seq, e.effective_role))
    assert not open_at                       # every assume was released

    data_actions = ("read", "write", "sign:read", "sign:write")
    checked = 0
    for e in events:
        if e.actor in windows and e.action in data_actions:
            containing = [w for w in windows[e.actor] if w[0] < e.seq < w[1]]
            assert len(containing) == 1, f"event {e.seq} outside any grant window"
            assert e.effective_role == containing[0][2]
            checked += 1
    assert checked >= 50 * 3                 # sign+read per input, writes out

    denied = [e for e in events
              if e.outcome == "denied" and e.effective_role == "intern"
              and e.target == protected[0]]
    assert denied, "control job must leave a denied audit event"


# --- 4. at-least-once, at-most-one-terminal ------------------------------------------------


CRASH_STEPS = ["after_dequeue", "after_assume", "after_stage_in", "after_prepare",
               "after_execute", "before_complete", "after_terminal"]


def test_criterion_4_crash_storm(enclave, analyst, clock):
    _, token = analyst
    rng = random.Random(40)
    t0 = time.monotonic()

    job_ids = [enclave.broker.submit_job(
                   token, hello_job(jobname=f"storm-{n}",
                                    executable="/bin/sh s.sh",
                                    script_name="s.sh",
                                    script="#!/bin/sh\necho ok\n"))
               for n in range(200)]

    serial = 0
    for _ in range(5000):
        pending = [j for j in job_ids
                   if enclave.broker.record(j).status not in TERMINAL]
        if not pending:
            break
        serial += 1
        step = rng.choice(CRASH_STEPS) if rng.random() < 0.3 else None

        def gate(at, step=step):
            if at == step:
                raise WorkerCrash(at)

        agent = enclave.spawn_worker("Test", instance_id=f"k-{serial}",
                                     crash_gate=gate)
        try:
            took = agent.process_one()
        except WorkerCrash:
            clock.advance(121)               # lapse the dead delivery
            continue
        if took is None:
            clock.advance(121)               # only lapsed deliveries remain

    records = [enclave.broker.record(j) for j in job_ids]
    assert all(r.status in TERMINAL for r in records)
    for r in records:
        terminal_entries = [s for s, _ in r.status_history if s in TERMINAL]
        assert len(terminal_entries) == 1    # exactly one terminal transition
        if r.status == COMPLETED:
            assert r.result_uri
            assert r.stdout == b"ok\n"
        else:
            assert "max attempts" in r.error
            assert r.attempts == 3
    completed = sum(r.status == COMPLETED for r in records)
    assert completed >= 150                  # p=0.3^3 triple-kill rate is ~3%
    assert time.monotonic() - t0 < 60.0


# --- 5. autoscaler trace ---------------------------------------------------------------------


def test_criterion_5_scaling_trace():
    from enclave.autoscaler import ZONES, Autoscaler, build_pools
    from enclave.clock import LogicalClock

    clock = LogicalClock()
    market, pools = build_pools(None)
    scaler = Autoscaler(clock, market, pools)
    rng = random.Random(2026)

    prod_depth = 0
    for step in range(720):                   # 2 simulated hours, 10s steps
        if rng.random() < 0.03:
            prod_depth += rng.randint(4, 30)  # bursty arrivals
        ready = sum(1 for i in pools["Production"].live_instances()
                    if i.state == "ready")
        prod_depth = max(0, prod_depth - ready)
        scaler.run_once({"Test": rng.randint(0, 2), "Production": prod_depth})
        assert len(pools["Test"].live_instances()) >= 1
        clock.advance(10)

    spot = [e for e in scaler.provisioning_events if e.market == "spot"]
    on_demand = [e for e in scaler.provisioning_events if e.market == "on_demand"]
    assert spot, "bursts must have provisioned spot capacity"
    for event in spot:
        prices = dict(zip(ZONES, event.zone_prices))
        best = min(ZONES, key=lambda z: (prices[z], z))
        assert event.zone == best, f"zone {event.zone} != argmin {best}"
        assert event.bid == pytest.approx(prices[best] * 1.25)

    assert on_demand, "the warm floor launch is on-demand"
    for event in on_demand:
        inst = next(i for p in pools.values() for i in p.instances
                    if i.instance_id == event.instance_id)
        assert inst.ready_at - inst.decided_at <= 120.0


# --- 6. LRU tier equivalence ------------------------------------------------------------------


def test_criterion_6_lru_equivalence(tmp_path):
    rng = random.Random(600)
    sizes = {f"s3://corpus/obj-{i:03d}": rng.randint(500, 4000)
             for i in range(200)}
    capacity = int(sum(sizes.values()) * 0.05)
    clock, cat = make_catalog(tmp_path, capacity=capacity)

    for uri, size in sizes.items():
        cat.grant(uri, "analyst", ["read", "write"])
        cat.put_object("alice", uri, bytes(size))
        clock.advance(1)
    reference = ReferenceLru(capacity)
    uris = sorted(sizes)

    for op in range(10_000):
        uri = uris[rng.randrange(len(uris))]
        if rng.random() < 0.1:
            new_size = rng.randint(500, 4000)
            cat.put_object("alice", uri, bytes(new_size))
            sizes[uri] = new_size
            reference.overwrite(uri, new_size)
        else:
            req = cat.sign_url("alice", uri, "read", ttl_seconds=60)
            data = cat.get_object(req)
            assert len(data) == sizes[uri]
            reference.read(uri, sizes[uri])
        clock.advance(1)
        assert cat.hot_bytes_in_use() <= capacity
        if op % 1000 == 0:
            assert cat.hot_set() == reference.hot_set()

    assert cat.hot_set() == reference.hot_set()
    assert cat.hot_bytes_in_use() <= capacity


# --- 7. utilization rule ------------------------------------------------------------------------


def test_criterion_7_utilization_rule(enclave, analyst, clock):
    _, token = analyst

    def run_monitored(walltime_minutes):
        job_id = enclave.broker.submit_job(
            token, hello_job(walltime=walltime_minutes))
        agent = enclave.spawn_worker("Test")
        enclave.broker.dequeue(agent.instance_id, "Test",
                               visibility_seconds=100_000)
        enclave.broker.start_execution(agent.instance_id, job_id)
        monitor = agent.sample_utilization(job_id, every_n_seconds=30,
                                           sampler=lambda: (0.5, 4096))
        for _ in range(walltime_minutes * 2):
            clock.advance(30)
            monitor.tick()
        return [s.t_offset_seconds
                for s in enclave.broker.record(job_id).utilization]

    long_offsets = run_monitored(7)
    assert long_offsets == [330.0, 360.0, 390.0, 420.0]
    assert all(t > 300.0 for t in long_offsets)
    assert run_monitored(4) == []


# --- 8 & 9. client package ------------------------------------------------------------------------


@pytest.fixture
def remote(enclave, analyst, tmp_path):
    """HTTP deployment with canned-function workers and a kotta Connection."""
    kotta = pytest.importorskip("kotta")
    runner = [sys.executable, "-m", "kotta.runner"]
    stops = [enclave.start_worker_thread(
                 enclave.spawn_worker("Test", runners={"canned_function": runner}))
             for _ in range(3)]
    port = enclave.start_gateway("127.0.0.1", 0)
    refresh = enclave.add_user("nb-user", {"analyst"})
    token_file = tmp_path / "kotta-token"
    from enclave.auth import write_token_file
    write_token_file(str(token_file), refresh)
    conn = kotta.Connection(f"http://127.0.0.1:{port}", token_file=str(token_file))
    yield kotta, conn
    for stop in stops:
        stop.set()


def _my_sum(data):
    return sum(data)


def _file_sum(path):
    total = count = 0
    with open(path) as fh:
        for line in fh:
            total += int(line)
            count += 1
    return total, count


def _my_sqrt(values):
    return [v ** 0.5 for v in values]


def _boom(x):
    raise ValueError("remote-boom-marker")


def test_criterion_8_decorator_transparency(remote, enclave, tmp_path):
    kotta, conn = remote
    my_sum = kotta.kottajob(conn=conn, queue="Test", walltime_minutes=1)(_my_sum)
    assert my_sum(range(0, 100)) == _my_sum(range(0, 100)) == 4950

    local_fixture = tmp_path / "numbers.txt"
    local_fixture.write_text("".join(f"{n}\n" for n in range(1, 1001)))
    uri = "s3://klab-jobs/numbers.txt"
    enclave.catalog.grant(uri, "analyst", ["read", "write"])
    enclave.catalog.put_object("alice", uri, local_fixture.read_bytes())

    file_sum = kotta.kottajob(conn=conn, queue="Test", walltime_minutes=1)(_file_sum)
    remote_result = file_sum("numbers.txt", inputs=[uri])
    assert remote_result == _file_sum(str(local_fixture)) == (500500, 1000)


def test_criterion_9_futures(remote):
    kotta, conn = remote
    my_sqrt = kotta.kottajob(conn=conn, queue="Test", walltime_minutes=1,
                             block=False)(_my_sqrt)
    values = list(range(0, 100))
    chunks = [values[i:i + 20] for i in range(0, 100, 20)]
    futures = [my_sqrt(chunk) for chunk in chunks]
    assert len(futures) == 5
    gathered = []
    for future in futures:
        gathered.extend(future.result(timeout=30))
    assert gathered == _my_sqrt(values)

    boom = kotta.kottajob(conn=conn, queue="Test", walltime_minutes=1)(_boom)
    with pytest.raises(kotta.RemoteExecutionError) as err:
        boom(1)
    assert "remote-boom-marker" in str(err.value)
