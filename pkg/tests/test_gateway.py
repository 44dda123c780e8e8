"""REST surface: authentication, status-code mapping, capability URLs,
egress enforcement, request-id propagation, and the embedded HTTP server."""

from __future__ import annotations

import json

import pytest
import requests

from enclave.audit import ALLOWED, DENIED
from enclave.broker import UtilizationSample
from enclave.gateway import EGRESS_OPEN, Gateway

from helpers import hello_job


def call(gw, method, path, token=None, body=None, headers=None):
    hdrs = dict(headers or {})
    if token:
        hdrs["Authorization"] = f"Bearer {token}"
    if body is None:
        raw = b""
    elif isinstance(body, bytes):
        raw = body
    else:
        raw = json.dumps(body).encode()
    return gw.handle(method, path, hdrs, raw)


@pytest.fixture
def gw(enclave):
    return enclave.gateway


@pytest.fixture
def finished(enclave, analyst):
    """A completed hello-world job; returns its id."""
    _, token = analyst
    job_id = enclave.broker.submit_job(token, hello_job())
    enclave.spawn_worker("Test").process_one()
    return job_id


# --- routing basics -----------------------------------------------------------------


def test_root_responds(gw):
    resp = call(gw, "GET", "/")
    assert resp.status == 200
    assert resp.json() == {"service": "enclave", "ok": True}


def test_unknown_route_is_404(gw, analyst):
    _, token = analyst
    assert call(gw, "GET", "/nope", token).status == 404
    assert call(gw, "POST", "/jobs/extra/deep", token).status == 404
    assert call(gw, "POST", "/tokens/frobnicate", body={}).status == 404


def test_response_carries_request_id(gw):
    resp = call(gw, "GET", "/", headers={"X-Request-Id": "req-42"})
    assert resp.request_id == "req-42"
    assert len(call(gw, "GET", "/").request_id) == 16    # generated when absent


# --- authentication ------------------------------------------------------------------


def test_submit_requires_credential(gw):
    resp = call(gw, "POST", "/jobs", body=hello_job())
    assert resp.status == 401
    assert resp.json()["error"] == "Unauthenticated"


def test_garbage_bearer_is_401(gw):
    assert call(gw, "POST", "/jobs", token="bogus", body=hello_job()).status == 401


def test_session_token_authenticates(gw, enclave, analyst):
    _, access = analyst
    resp = call(gw, "POST", "/sessions", token=access)
    assert resp.status == 200
    session_id = resp.json()["session_id"]
    job_id = call(gw, "POST", "/jobs", token=access, body=hello_job()).json()["job_id"]
    assert call(gw, "GET", f"/jobs/{job_id}", token=session_id).status == 200
    # sessions authenticate but cannot mint further sessions
    assert call(gw, "POST", "/sessions", token=session_id).status == 401


def test_unauthenticated_requests_never_audited(gw, enclave):
    before = len(enclave.audit.events())
    call(gw, "POST", "/jobs", body=hello_job())
    call(gw, "POST", "/jobs", token="bogus", body=hello_job())
    call(gw, "POST", "/sessions", body={"access_token": "bogus"})
    call(gw, "POST", "/tokens/refresh", body={"refresh_token": "bogus"})
    call(gw, "POST", "/clients/register", body={"principal_id": "alice"})
    assert len(enclave.audit.events()) == before


MUTATING = [
    ("POST", "/jobs"),
    ("PUT", "/data/fuzz-bucket/key.bin"),
    ("POST", "/data/sign"),
    ("POST", "/sessions"),
    ("POST", "/clients/register"),
]


@pytest.mark.parametrize("method,path", MUTATING)
def test_no_unauthenticated_mutation(gw, enclave, method, path):
    resp = call(gw, method, path, body={"principal_id": "x", "uri": "s3://a/b",
                                        "action": "read", **hello_job()})
    assert resp.status == 401
    assert enclave.broker.queue_depth("Test") == 0
    assert enclave.broker.queue_depth("Production") == 0
    assert not enclave.catalog.exists("s3://fuzz-bucket/key.bin")


# --- token lifecycle over REST ----------------------------------------------------------


def test_refresh_and_revoke_round_trip(gw, enclave):
    enclave.add_role("ops")
    refresh = enclave.add_user("randy", {"ops"})
    resp = call(gw, "POST", "/tokens/refresh", body={"refresh_token": refresh})
    assert resp.status == 200
    access = resp.json()["access_token"]
    assert call(gw, "POST", "/jobs", token=access, body=hello_job()).status == 200

    assert call(gw, "POST", "/tokens/revoke", body={"token": refresh}).status == 200
    again = call(gw, "POST", "/tokens/revoke", body={"token": refresh})
    assert again.status == 200                       # revocation is idempotent
    assert call(gw, "POST", "/tokens/refresh",
                body={"refresh_token": refresh}).status == 401


def test_refresh_with_unknown_token_is_401(gw):
    resp = call(gw, "POST", "/tokens/refresh", body={"refresh_token": "nope"})
    assert resp.status == 401


def test_register_client_needs_admin_key(gw, enclave):
    enclave.add_role("ops")
    enclave.add_user("randy", {"ops"}, register=False)
    body = {"principal_id": "randy"}
    assert call(gw, "POST", "/clients/register", body=body).status == 401
    wrong = {"X-Admin-Key": "wrong"}
    assert call(gw, "POST", "/clients/register", body=body, headers=wrong).status == 401
    good = {"X-Admin-Key": enclave.admin_key}
    resp = call(gw, "POST", "/clients/register", body=body, headers=good)
    assert resp.status == 200
    refresh = resp.json()["refresh_token"]
    assert call(gw, "POST", "/tokens/refresh",
                body={"refresh_token": refresh}).status == 200
    # one registration per principal
    assert call(gw, "POST", "/clients/register", body=body, headers=good).status == 409


def test_register_unknown_principal_is_404(gw, enclave):
    resp = call(gw, "POST", "/clients/register", body={"principal_id": "ghost"},
                headers={"X-Admin-Key": enclave.admin_key})
    assert resp.status == 404


# --- jobs over REST -------------------------------------------------------------------


def test_submit_then_inspect(gw, enclave, analyst, finished):
    _, token = analyst
    resp = call(gw, "GET", f"/jobs/{finished}", token)
    assert resp.status == 200
    body = resp.json()
    rec = enclave.broker.record(finished)
    assert body["status"] == "completed" == rec.status
    assert body["owner"] == "alice"
    assert body["queue"] == rec.queue
    assert body["attempts"] == rec.attempts == 1
    assert body["result_uri"] == rec.result_uri
    assert [s for s, _ in rec.status_history] == [h[0] for h in body["history"]]


def test_malformed_submissions_are_400(gw, analyst):
    _, token = analyst
    assert call(gw, "POST", "/jobs", token, body=b"not json").status == 400
    assert call(gw, "POST", "/jobs", token, body=b"[1,2]").status == 400
    bad = hello_job()
    del bad["executable"]
    resp = call(gw, "POST", "/jobs", token, body=bad)
    assert resp.status == 400
    assert resp.json()["error"] == "MalformedJob"


def test_unknown_job_is_404(gw, analyst):
    _, token = analyst
    assert call(gw, "GET", "/jobs/nope", token).status == 404


def test_stranger_cannot_read_job(gw, enclave, finished):
    enclave.add_role("intern")
    refresh = enclave.add_user("mallory", {"intern"})
    token = enclave.access_token_for(refresh)
    for sub in ("", "/stdout", "/stderr", "/result"):
        resp = call(gw, "GET", f"/jobs/{finished}{sub}", token)
        assert resp.status == 403, sub


def test_streams_wait_for_terminal_status(gw, enclave, analyst):
    _, token = analyst
    job_id = enclave.broker.submit_job(token, hello_job())
    for sub in ("stdout", "stderr", "result"):
        resp = call(gw, "GET", f"/jobs/{job_id}/{sub}", token)
        assert resp.status == 409
        assert resp.json()["error"] == "NotTerminal"


def test_stdout_downloads_bytes(gw, analyst, finished):
    _, token = analyst
    resp = call(gw, "GET", f"/jobs/{finished}/stdout", token)
    assert resp.status == 200
    assert resp.body == b"Hello world\n"
    assert resp.content_type == "application/octet-stream"
    assert call(gw, "GET", f"/jobs/{finished}/stderr", token).body == b""


def test_result_downloads_manifest(gw, analyst, finished):
    _, token = analyst
    resp = call(gw, "GET", f"/jobs/{finished}/result", token)
    assert resp.status == 200
    assert json.loads(resp.body)["job_id"] == finished


def test_failed_job_has_no_result(gw, enclave, analyst):
    _, token = analyst
    job = hello_job(script="#!/bin/bash\nexit 9\n")
    job_id = enclave.broker.submit_job(token, job)
    enclave.spawn_worker("Test").process_one()
    resp = call(gw, "GET", f"/jobs/{job_id}/result", token)
    assert resp.status == 404
    assert resp.json()["error"] == "NoResult"
    assert call(gw, "GET", f"/jobs/{job_id}/stdout", token).status == 200


def test_utilization_endpoint(gw, enclave, analyst, clock):
    _, token = analyst
    job_id = enclave.broker.submit_job(token, hello_job(walltime=10))
    agent = enclave.spawn_worker("Test")
    enclave.broker.dequeue(agent.instance_id, "Test", visibility_seconds=10_000)
    enclave.broker.start_execution(agent.instance_id, job_id)
    clock.advance(400)
    enclave.broker.record_utilization(
        agent.instance_id, job_id,
        UtilizationSample(job_id, t_offset_seconds=400.0, cpu_fraction=0.5, mem_bytes=64))
    resp = call(gw, "GET", f"/jobs/{job_id}/utilization", token)
    assert resp.status == 200
    assert resp.json()["samples"] == [
        {"t_offset_seconds": 400.0, "cpu_fraction": 0.5, "mem_bytes": 64}]


# --- data plane ------------------------------------------------------------------------


@pytest.fixture
def stored(gw, enclave, analyst):
    """alice puts an object over REST; returns (uri, bytes, token)."""
    _, token = analyst
    uri = "s3://rest-bucket/blob.bin"
    enclave.catalog.grant("s3://rest-bucket", "analyst", ["read", "write"])
    resp = call(gw, "PUT", "/data/rest-bucket/blob.bin", token, body=b"payload bytes")
    assert resp.status == 200
    return uri, b"payload bytes", token


def test_put_returns_checksum(gw, stored, enclave):
    uri, data, _ = stored
    obj = enclave.catalog.stat(uri)
    assert obj.size_bytes == len(data)


def test_overwrite_without_grant_is_403(gw, enclave, stored):
    # creating a fresh object needs no grant (the creator's role becomes its
    # owner), but overwriting someone else's object does
    uri, data, _ = stored
    enclave.add_role("intern")
    bob = enclave.access_token_for(enclave.add_user("bob", {"intern"}))
    resp = call(gw, "PUT", "/data/rest-bucket/blob.bin", bob, body=b"x")
    assert resp.status == 403
    assert resp.json()["error"] == "AccessDenied"
    assert enclave.catalog.stat(uri).size_bytes == len(data)


def test_sign_requires_fields(gw, stored):
    _, _, token = stored
    assert call(gw, "POST", "/data/sign", token, body={"uri": "s3://a/b"}).status == 400


def test_capability_url_round_trip(gw, enclave, stored):
    uri, data, token = stored
    signed = call(gw, "POST", "/data/sign", token,
                  body={"uri": uri, "action": "read", "ttl_seconds": 60}).json()
    # egress defaults to enclave_only: no export grant, no bytes
    denied = call(gw, "GET", signed["url"])
    assert denied.status == 403
    enclave.catalog.grant(uri, "analyst", ["export"])
    fetched = call(gw, "GET", signed["url"])
    assert fetched.status == 200
    assert fetched.body == data


def test_egress_decisions_are_audited(gw, enclave, stored):
    uri, _, token = stored
    signed = call(gw, "POST", "/data/sign", token,
                  body={"uri": uri, "action": "read"}).json()
    call(gw, "GET", signed["url"], headers={"X-Request-Id": "egress-1"})
    denied = [e for e in enclave.audit.events() if e.action == "export"][-1]
    assert denied.outcome == DENIED
    assert denied.request_id == "egress-1"
    assert denied.target == uri
    enclave.catalog.grant(uri, "analyst", ["export"])
    call(gw, "GET", signed["url"], headers={"X-Request-Id": "egress-2"})
    allowed = [e for e in enclave.audit.events() if e.action == "export"][-1]
    assert allowed.outcome == ALLOWED
    assert allowed.request_id == "egress-2"


def test_open_egress_skips_export_check(enclave, stored):
    uri, data, _ = stored
    open_gw = Gateway(auth=enclave.auth, catalog=enclave.catalog,
                      broker=enclave.broker, audit=enclave.audit,
                      egress=EGRESS_OPEN, admin_key=enclave.admin_key)
    signed = call(open_gw, "POST", "/data/sign", stored[2],
                  body={"uri": uri, "action": "read"}).json()
    resp = call(open_gw, "GET", signed["url"])
    assert resp.status == 200
    assert resp.body == data


def test_job_result_is_egress_exempt(gw, analyst, finished, enclave):
    # /jobs/{id}/result serves the owner inside the enclave surface even
    # though the result object has no export grant
    _, token = analyst
    resp = call(gw, "GET", f"/jobs/{finished}/result", token)
    assert resp.status == 200
    result_uri = enclave.broker.record(finished).result_uri
    exports = [e for e in enclave.audit.events()
               if e.action == "export" and e.target == result_uri]
    assert exports == []


def test_capability_url_missing_params_rejected(gw, stored):
    resp = call(gw, "GET", "/data/rest-bucket/blob.bin")
    assert resp.status == 403
    assert resp.json()["error"] == "BadSignature"


def test_tampered_capability_rejected(gw, enclave, stored):
    uri, _, token = stored
    enclave.catalog.grant(uri, "analyst", ["export"])
    signed = call(gw, "POST", "/data/sign", token,
                  body={"uri": uri, "action": "read"}).json()
    forged = signed["url"].replace("actor=alice", "actor=mallory")
    assert call(gw, "GET", forged).status == 403
    flipped = signed["url"][:-4] + ("0000" if signed["url"][-4:] != "0000" else "1111")
    assert call(gw, "GET", flipped).status == 403


def test_expired_capability_rejected(gw, enclave, clock, stored):
    uri, _, token = stored
    enclave.catalog.grant(uri, "analyst", ["export"])
    signed = call(gw, "POST", "/data/sign", token,
                  body={"uri": uri, "action": "read", "ttl_seconds": 5}).json()
    clock.advance(5)                     # boundary: invalid at exactly expires_at
    resp = call(gw, "GET", signed["url"])
    assert resp.status == 403
    assert resp.json()["error"] == "ExpiredSignature"


def test_get_unknown_object_is_404(gw, enclave, analyst):
    _, token = analyst
    enclave.catalog.grant("s3://rest-bucket/ghost.bin", "analyst",
                          ["read", "export"])
    signed = call(gw, "POST", "/data/sign", token,
                  body={"uri": "s3://rest-bucket/ghost.bin", "action": "read"}).json()
    assert call(gw, "GET", signed["url"]).status == 404


# --- audit surface ------------------------------------------------------------------------


def test_audit_export_requires_auditor(gw, enclave, analyst, finished):
    _, token = analyst
    assert call(gw, "GET", "/audit", token).status == 403
    enclave.add_role("compliance", auditor=True)
    refresh = enclave.add_user("carol", {"compliance"})
    carol = enclave.access_token_for(refresh)
    resp = call(gw, "GET", "/audit", carol)
    assert resp.status == 200
    assert resp.content_type == "application/x-ndjson"
    lines = [json.loads(l) for l in resp.body.decode().splitlines()]
    assert lines[0]["seq"] == 0
    assert any(e["action"] == "job_completed" for e in lines)


def test_audit_export_range_query(gw, enclave, finished):
    enclave.add_role("compliance", auditor=True)
    carol = enclave.access_token_for(enclave.add_user("carol", {"compliance"}))
    resp = call(gw, "GET", "/audit?start=2&end=5", carol)
    seqs = [json.loads(l)["seq"] for l in resp.body.decode().splitlines()]
    assert seqs == [2, 3, 4]


# --- embedded HTTP server -------------------------------------------------------------------


def test_http_server_round_trip(enclave, analyst):
    _, token = analyst
    port = enclave.start_gateway("127.0.0.1", 0)
    base = f"http://127.0.0.1:{port}"
    try:
        root = requests.get(base + "/", timeout=5)
        assert root.status_code == 200
        assert root.json()["ok"] is True

        anon = requests.post(base + "/jobs", json=hello_job(), timeout=5)
        assert anon.status_code == 401

        resp = requests.post(base + "/jobs", json=hello_job(), timeout=5,
                             headers={"Authorization": f"Bearer {token}",
                                      "X-Request-Id": "http-1"})
        assert resp.status_code == 200
        assert resp.headers["X-Request-Id"] == "http-1"
        job_id = resp.json()["job_id"]

        enclave.spawn_worker("Test").process_one()
        out = requests.get(base + f"/jobs/{job_id}/stdout", timeout=5,
                           headers={"Authorization": f"Bearer {token}"})
        assert out.content == b"Hello world\n"
    finally:
        enclave.gateway.stop()
