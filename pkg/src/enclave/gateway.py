"""REST front door over auth, catalog, and broker.

All state lives in the underlying services; the gateway translates HTTP into
service calls, maps domain errors onto status codes, and tags every request
with a request id that flows into the audit log. Signed data URLs are
capability URLs: GET /data needs no bearer credential, everything else that
mutates or reads private state does.

The egress rule: when constructed with egress="enclave_only", GET /data only
releases bytes for objects whose policy grants the requesting actor's role an
explicit `export` action. Job results fetched via /jobs/{id}/result stay
inside the enclave surface (owner or auditor only) and are exempt.
"""

from __future__ import annotations

import json
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlsplit

from . import audit as _audit
from .audit import ALLOWED, DENIED, AuditLog
from .auth import AuthService
from .broker import TERMINAL, Broker
from .catalog import Catalog, SignedRequest
from .errors import (
    AccessDenied,
    AlreadyRegistered,
    AlreadyTerminal,
    AuthError,
    BadSignature,
    EnclaveError,
    ExpiredSignature,
    GrantConflict,
    InvalidUri,
    MalformedJob,
    NoLiveDelivery,
    TooEarly,
    UnknownJob,
    UnknownObject,
    UnknownPrincipal,
    UnknownQueue,
    UnknownToken,
)

EGRESS_ENCLAVE_ONLY = "enclave_only"
EGRESS_OPEN = "open"

STATUS_BY_CODE = {
    "UnknownPrincipal": 404,
    "UnknownJob": 404,
    "UnknownObject": 404,
    "UnknownQueue": 404,
    "ExpiredToken": 401,
    "RevokedToken": 401,
    "AuthFailure": 401,
    "AccessDenied": 403,
    "BadSignature": 403,
    "ExpiredSignature": 403,
    "MalformedJob": 400,
    "InvalidUri": 400,
    "AlreadyRegistered": 409,
    "AlreadyTerminal": 409,
    "GrantConflict": 409,
    "NoLiveDelivery": 409,
    "NotTerminal": 409,
    "NoResult": 404,
    "TooEarly": 409,
}

JSON = "application/json"
OCTET = "application/octet-stream"


class ApiResponse:
    def __init__(self, status: int, body: bytes, content_type: str = JSON,
                 request_id: str = ""):
        self.status = status
        self.body = body
        self.content_type = content_type
        self.request_id = request_id

    def json(self):
        return json.loads(self.body.decode("utf-8"))


def _json_body(status: int, obj) -> tuple[int, bytes, str]:
    return status, json.dumps(obj).encode("utf-8"), JSON


def _error(status: int, code: str, message: str) -> tuple[int, bytes, str]:
    return _json_body(status, {"error": code, "message": message})


class Gateway:
    def __init__(self, *, auth: AuthService, catalog: Catalog, broker: Broker,
                 audit: AuditLog, egress: str = EGRESS_ENCLAVE_ONLY,
                 admin_key: Optional[str] = None):
        self.auth = auth
        self.catalog = catalog
        self.broker = broker
        self.audit = audit
        self.egress = egress
        self.admin_key = admin_key
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    # --- request dispatch (socket-free; the HTTP layer is a thin shim) ----------

    def handle(self, method: str, path: str, headers: Optional[dict] = None,
               body: bytes = b"") -> ApiResponse:
        headers = {k.lower(): v for k, v in (headers or {}).items()}
        split = urlsplit(path)
        segments = [s for s in split.path.split("/") if s]
        query = {k: v[-1] for k, v in parse_qs(split.query).items()}
        request_id = headers.get("x-request-id") or uuid.uuid4().hex[:16]
        _audit.bind_request_id(request_id)
        try:
            status, payload, ctype = self._route(method, segments, query, headers, body)
        except EnclaveError as exc:
            status_code = STATUS_BY_CODE.get(exc.code, 400)
            status, payload, ctype = _error(status_code, exc.code, str(exc))
        except Exception as exc:   # noqa: BLE001  (500s should never leak a stack)
            status, payload, ctype = _error(500, "InternalError", str(exc))
        finally:
            _audit.clear_request_id()
        return ApiResponse(status, payload, ctype, request_id)

    def _route(self, method: str, seg: list[str], query: dict, headers: dict,
               body: bytes) -> tuple[int, bytes, str]:
        if not seg:
            return _json_body(200, {"service": "enclave", "ok": True})
        head = seg[0]
        if head == "jobs":
            return self._route_jobs(method, seg, headers, body)
        if head == "data":
            return self._route_data(method, seg, query, headers, body)
        if head == "tokens":
            return self._route_tokens(method, seg, body)
        if head == "sessions" and method == "POST":
            return self._sessions(headers, body)
        if head == "clients" and len(seg) == 2 and seg[1] == "register" and method == "POST":
            return self._register_client(headers, body)
        if head == "audit" and method == "GET":
            return self._audit_export(headers, query)
        return _error(404, "NotFound", f"no route for {method} /{'/'.join(seg)}")

    # --- authentication ---------------------------------------------------------

    def _credential(self, headers: dict) -> str:
        value = headers.get("authorization", "")
        if value.startswith("Bearer "):
            return value[len("Bearer "):].strip()
        return value.strip()

    def _authenticate(self, headers: dict):
        """Resolve the bearer credential; any auth failure is a 401.

        Unauthenticated requests never reach the audit log: there is no
        principal to attribute them to.
        """
        credential = self._credential(headers)
        if not credential:
            raise Unauthenticated("missing bearer credential")
        try:
            return credential, self.auth.validate(credential)
        except AuthError as exc:
            raise Unauthenticated(str(exc)) from exc

    # --- /jobs -------------------------------------------------------------------

    def _route_jobs(self, method: str, seg: list[str], headers: dict,
                    body: bytes) -> tuple[int, bytes, str]:
        if method == "POST" and len(seg) == 1:
            credential, _ = self._authenticate(headers)
            description = _parse_json(body)
            job_id = self.broker.submit_job(credential, description)
            return _json_body(200, {"job_id": job_id})
        if method != "GET" or len(seg) not in (2, 3):
            return _error(404, "NotFound", "unknown jobs route")
        credential, principal = self._authenticate(headers)
        job_id = seg[1]
        rec = self.broker.job_status(credential, job_id)
        if len(seg) == 2:
            return _json_body(200, {
                "job_id": rec.job_id, "status": rec.status,
                "history": [[s, t] for s, t in rec.status_history],
                "queue": rec.queue, "jobname": rec.jobname, "jobtype": rec.jobtype,
                "owner": rec.owner, "attempts": rec.attempts,
                "inputs": list(rec.inputs), "outputs": list(rec.outputs),
                "result_uri": rec.result_uri, "error": rec.error,
            })
        sub = seg[2]
        if sub in ("stdout", "stderr"):
            if rec.status not in TERMINAL:
                raise NotTerminal(f"{job_id} is {rec.status}")
            stream = rec.stdout if sub == "stdout" else rec.stderr
            return 200, stream, OCTET
        if sub == "result":
            if rec.status not in TERMINAL:
                raise NotTerminal(f"{job_id} is {rec.status}")
            if not rec.result_uri:
                raise NoResult(f"{job_id} finished {rec.status} without a result object")
            signed = self.catalog.sign_url(principal.principal_id, rec.result_uri,
                                           "read", ttl_seconds=60.0)
            return 200, self.catalog.get_object(signed), OCTET
        if sub == "utilization":
            return _json_body(200, {"job_id": job_id, "samples": [
                {"t_offset_seconds": s.t_offset_seconds,
                 "cpu_fraction": s.cpu_fraction,
                 "mem_bytes": s.mem_bytes} for s in rec.utilization]})
        return _error(404, "NotFound", f"unknown jobs subresource {sub!r}")

    # --- /data -------------------------------------------------------------------

    def _route_data(self, method: str, seg: list[str], query: dict, headers: dict,
                    body: bytes) -> tuple[int, bytes, str]:
        if method == "POST" and len(seg) == 2 and seg[1] == "sign":
            credential, principal = self._authenticate(headers)
            payload = _parse_json(body)
            for field in ("uri", "action"):
                if field not in payload:
                    raise MalformedJob(f"sign request missing {field!r}")
            signed = self.catalog.sign_url(
                principal.principal_id, payload["uri"], payload["action"],
                float(payload.get("ttl_seconds", 300.0)))
            return _json_body(200, {
                "uri": signed.uri, "action": signed.action, "actor": signed.actor,
                "expires_at": signed.expires_at, "signature": signed.signature,
                "url": _capability_path(signed),
            })
        if len(seg) < 3:
            return _error(404, "NotFound", "data routes need /data/{bucket}/{key}")
        uri = "s3://" + "/".join(seg[1:])
        if method == "PUT":
            _, principal = self._authenticate(headers)
            obj = self.catalog.put_object(principal.principal_id, uri, body)
            return _json_body(200, {"uri": obj.uri, "size_bytes": obj.size_bytes,
                                    "checksum": obj.checksum})
        if method == "GET":
            for field in ("actor", "action", "expires", "sig"):
                if field not in query:
                    raise BadSignature(f"missing query parameter {field!r}")
            request = SignedRequest(
                uri=uri, action=query["action"], actor=query["actor"],
                issued_at=0.0, expires_at=float(query["expires"]),
                signature=query["sig"])
            if self.egress == EGRESS_ENCLAVE_ONLY:
                self._check_export(request.actor, uri)
            return 200, self.catalog.get_object(request), OCTET
        return _error(404, "NotFound", "unknown data route")

    def _check_export(self, actor: str, uri: str) -> None:
        role = self.auth.effective_role_for_actor(actor)
        if self.catalog.check_access(role, uri, "export"):
            self.audit.append(actor=actor, effective_role=role or "", action="export",
                              target=uri, outcome=ALLOWED)
            return
        self.audit.append(actor=actor, effective_role=role or "", action="export",
                          target=uri, outcome=DENIED)
        raise AccessDenied(f"egress denied: no export grant on {uri}")

    # --- /tokens, /sessions, /clients ---------------------------------------------

    def _route_tokens(self, method: str, seg: list[str], body: bytes) -> tuple[int, bytes, str]:
        if method != "POST" or len(seg) != 2:
            return _error(404, "NotFound", "unknown tokens route")
        payload = _parse_json(body)
        try:
            if seg[1] == "refresh":
                token = self.auth.refresh_access_token(payload.get("refresh_token", ""))
                return _json_body(200, {"access_token": token.token_id,
                                        "expires_at": token.expires_at})
            if seg[1] == "revoke":
                self.auth.revoke(payload.get("token", ""))
                return _json_body(200, {"revoked": True})
        except AuthError as exc:
            # the token IS the credential here: bad token means 401, not 404
            raise Unauthenticated(str(exc)) from exc
        return _error(404, "NotFound", f"unknown tokens action {seg[1]!r}")

    def _sessions(self, headers: dict, body: bytes) -> tuple[int, bytes, str]:
        payload = _parse_json(body) if body else {}
        access = payload.get("access_token") or self._credential(headers)
        if not access:
            raise Unauthenticated("missing access token")
        try:
            session = self.auth.create_session(access)
        except AuthError as exc:
            raise Unauthenticated(str(exc)) from exc
        return _json_body(200, {"session_id": session.session_id,
                                "expires_at": session.expires_at})

    def _register_client(self, headers: dict, body: bytes) -> tuple[int, bytes, str]:
        if not self.admin_key or headers.get("x-admin-key") != self.admin_key:
            raise Unauthenticated("admin key required")
        payload = _parse_json(body)
        principal_id = payload.get("principal_id", "")
        token = self.auth.register_client(principal_id, approved=True)
        return _json_body(200, {"refresh_token": token.token_id,
                                "principal_id": principal_id})

    # --- /audit -----------------------------------------------------------------

    def _audit_export(self, headers: dict, query: dict) -> tuple[int, bytes, str]:
        _, principal = self._authenticate(headers)
        start = int(query.get("start", 0))
        end = int(query["end"]) if "end" in query else None
        text = self.catalog.export_audit(principal.principal_id, start, end)
        return 200, text.encode("utf-8"), "application/x-ndjson"

    # --- embedded HTTP server ------------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        gateway = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _dispatch(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                response = gateway.handle(self.command, self.path,
                                          dict(self.headers.items()), body)
                self.send_response(response.status)
                self.send_header("Content-Type", response.content_type)
                self.send_header("Content-Length", str(len(response.body)))
                self.send_header("X-Request-Id", response.request_id)
                self.end_headers()
                self.wfile.write(response.body)

            do_GET = do_POST = do_PUT = do_DELETE = _dispatch

            def log_message(self, *args):   # tests stay quiet
                pass

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="gateway", daemon=True)
        self._thread.start()
        return self._httpd.server_address[1]

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def _parse_json(body: bytes) -> dict:
    if not body:
        raise MalformedJob("empty request body")
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJob(f"request body is not JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MalformedJob("request body must be a JSON object")
    return payload


def _capability_path(signed: SignedRequest) -> str:
    bucket_key = signed.uri[len("s3://"):]
    return (f"/data/{bucket_key}?actor={signed.actor}&action={signed.action}"
            f"&expires={signed.expires_at:.6f}&sig={signed.signature}")


class Unauthenticated(EnclaveError):
    """Bearer credential missing or invalid; mapped to 401, never audited."""


class NotTerminal(EnclaveError):
    """Stream or result requested before the job reached a terminal status."""


class NoResult(EnclaveError):
    """Terminal job holds no result object (it failed before staging one)."""


STATUS_BY_CODE["Unauthenticated"] = 401
