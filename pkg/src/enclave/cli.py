"""Command line client (and embedded server) for the enclave REST API.

Credentials come from a token file holding one `refresh_token=...` line; its
path is `--token-file`, else $KOTTA_TOKEN_FILE, else ~/.kotta/token. Every
invocation exchanges the refresh token for a fresh access token.
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import os
import shlex
import sys
import time
from typing import Optional

import requests

from .audit import parse_jsonl, verify_events
from .auth import write_token_file

DEFAULT_TOKEN_PATH = os.path.join(os.path.expanduser("~"), ".kotta", "token")
DEFAULT_ENDPOINT = "http://127.0.0.1:8080"


class CliError(Exception):
    pass


def token_file_path(explicit: str | None) -> str:
    return explicit or os.environ.get("KOTTA_TOKEN_FILE") or DEFAULT_TOKEN_PATH


class ApiClient:
    def __init__(self, endpoint: str, token_file: str):
        self.endpoint = endpoint.rstrip("/")
        self.token_file = token_file
        self.session = requests.Session()
        self._access: str | None = None

    def _refresh(self) -> str:
        try:
            with open(self.token_file) as fh:
                line = fh.read().strip()
        except OSError as exc:
            raise CliError(f"cannot read token file {self.token_file}: {exc}") from exc
        _, _, refresh = line.partition("=")
        resp = self.session.post(f"{self.endpoint}/tokens/refresh",
                                 json={"refresh_token": refresh.strip()})
        if resp.status_code != 200:
            raise CliError(_api_message(resp))
        self._access = resp.json()["access_token"]
        return self._access

    def _headers(self) -> dict:
        if self._access is None:
            self._refresh()
        return {"Authorization": f"Bearer {self._access}"}

    def request(self, method: str, path: str, **kwargs) -> requests.Response:
        resp = self.session.request(method, f"{self.endpoint}{path}",
                                    headers=self._headers(), **kwargs)
        if resp.status_code == 401:   # stale access token: refresh once and retry
            self._refresh()
            resp = self.session.request(method, f"{self.endpoint}{path}",
                                        headers=self._headers(), **kwargs)
        return resp

    def json_or_die(self, resp: requests.Response) -> dict:
        if resp.status_code != 200:
            raise CliError(_api_message(resp))
        return resp.json()


def _api_message(resp: requests.Response) -> str:
    try:
        body = resp.json()
        return f"{body.get('error', 'Error')}: {body.get('message', '')} (HTTP {resp.status_code})"
    except ValueError:
        return f"HTTP {resp.status_code}: {resp.text[:200]}"


# --- verbs ------------------------------------------------------------------------


def cmd_submit(client: ApiClient, args) -> int:
    for path in args.files:
        with open(path) as fh:
            description = json.load(fh)
        if args.queue:
            description["queue"] = args.queue
        if args.walltime:
            description["walltime_minutes"] = args.walltime
        body = client.json_or_die(client.request("POST", "/jobs", json=description))
        print(body["job_id"])
    return 0


def cmd_status(client: ApiClient, args) -> int:
    body = client.json_or_die(client.request("GET", f"/jobs/{args.job_id}"))
    if args.json:
        print(json.dumps(body, indent=2))
    else:
        print(body["status"])
    return 0


def cmd_outputs(client: ApiClient, args) -> int:
    body = client.json_or_die(client.request("GET", f"/jobs/{args.job_id}"))
    for uri in body.get("outputs", []):
        print(uri)
    if body.get("result_uri"):
        print(body["result_uri"])
    return 0


def cmd_stdout(client: ApiClient, args) -> int:
    resp = client.request("GET", f"/jobs/{args.job_id}/{args.stream}")
    if resp.status_code != 200:
        raise CliError(_api_message(resp))
    sys.stdout.buffer.write(resp.content)
    return 0


def cmd_put(client: ApiClient, args) -> int:
    with open(args.file, "rb") as fh:
        data = fh.read()
    path = "/data/" + args.uri[len("s3://"):]
    body = client.json_or_die(client.request("PUT", path, data=data))
    print(body["uri"])
    return 0


def cmd_sign(client: ApiClient, args) -> int:
    body = client.json_or_die(client.request("POST", "/data/sign", json={
        "uri": args.uri, "action": args.action, "ttl_seconds": args.ttl}))
    print(client.endpoint + body["url"])
    return 0


def cmd_get(client: ApiClient, args) -> int:
    signed = client.json_or_die(client.request("POST", "/data/sign", json={
        "uri": args.uri, "action": "read", "ttl_seconds": args.ttl}))
    resp = client.session.get(client.endpoint + signed["url"])
    if resp.status_code != 200:
        raise CliError(_api_message(resp))
    if args.dest and args.dest != "-":
        with open(args.dest, "wb") as fh:
            fh.write(resp.content)
    else:
        sys.stdout.buffer.write(resp.content)
    return 0


def cmd_audit(client: ApiClient, args) -> int:
    resp = client.request("GET", "/audit")
    if resp.status_code != 200:
        raise CliError(_api_message(resp))
    if args.action == "export":
        sys.stdout.write(resp.text)
        return 0
    # verify: recompute the hash chain locally; trust nothing but the math
    events = parse_jsonl(resp.text)
    verdict = verify_events(events)
    if verdict.ok:
        print(f"ok: {len(events)} events, chain intact")
        return 0
    print(f"TAMPERED: chain breaks at seq {verdict.first_break}", file=sys.stderr)
    return 1


def _canned_runner_command(choice: str) -> Optional[list[str]]:
    """Resolve --canned-runner: an explicit command, "none", or autodetection
    of an installed kotta runner."""
    if choice == "none":
        return None
    if choice != "auto":
        return shlex.split(choice)
    if importlib.util.find_spec("kotta") is not None:
        return [sys.executable, "-m", "kotta.runner"]
    return None


def cmd_serve(args) -> int:
    from .clock import SystemClock
    from .service import Enclave

    runner = _canned_runner_command(args.canned_runner)
    enclave = Enclave(args.data_dir, clock=SystemClock(), egress=args.egress,
                      admin_key=args.admin_key, audit_file=True, fsync=True,
                      runners={"canned_function": runner} if runner else None)
    port = enclave.start_gateway(args.host, args.port)
    endpoint = f"http://{args.host}:{port}"
    print(f"listening on {endpoint}", flush=True)
    print(f"admin key: {enclave.admin_key}", flush=True)
    if runner:
        print(f"canned-function runner: {' '.join(runner)}", flush=True)
    if args.demo:
        enclave.add_role("analyst", "demo analyst role")
        refresh = enclave.add_user("demo", {"analyst"})
        path = token_file_path(args.token_file)
        write_token_file(path, refresh)
        print(f"demo principal 'demo' (role analyst); token file: {path}", flush=True)
    for _ in range(args.workers):
        agent = enclave.spawn_worker("Test")
        enclave.start_worker_thread(agent)
    if args.workers:
        print(f"{args.workers} Test-pool worker(s) running", flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        enclave.close()
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enclave", description="Submit jobs and move data in and out of the enclave.")
    parser.add_argument("--endpoint", default=os.environ.get("ENCLAVE_ENDPOINT", DEFAULT_ENDPOINT))
    parser.add_argument("--token-file", default=None,
                        help="refresh-token file (default: $KOTTA_TOKEN_FILE or ~/.kotta/token)")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("submit", help="submit one or more job description files")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.add_argument("--queue", default=None)
    p.add_argument("--walltime", type=int, default=None, help="walltime minutes override")

    p = sub.add_parser("status", help="print a job's status")
    p.add_argument("job_id")
    p.add_argument("--json", action="store_true", help="full record as JSON")

    p = sub.add_parser("outputs", help="list a job's output and result URIs")
    p.add_argument("job_id")

    p = sub.add_parser("stdout", help="print a finished job's captured stdout")
    p.add_argument("job_id")
    p.set_defaults(stream="stdout")
    p = sub.add_parser("stderr", help="print a finished job's captured stderr")
    p.add_argument("job_id")
    p.set_defaults(stream="stderr")

    p = sub.add_parser("put", help="upload a local file to a catalog URI")
    p.add_argument("file")
    p.add_argument("uri", help="s3://bucket/key destination")

    p = sub.add_parser("get", help="download an object via a signed URL")
    p.add_argument("uri")
    p.add_argument("dest", nargs="?", default="-")
    p.add_argument("--ttl", type=float, default=300.0)

    p = sub.add_parser("sign", help="print a signed capability URL")
    p.add_argument("uri")
    p.add_argument("--action", default="read", choices=["read", "write", "delete", "export"])
    p.add_argument("--ttl", type=float, default=300.0)

    p = sub.add_parser("audit", help="export or verify the audit chain")
    p.add_argument("action", choices=["verify", "export"])

    p = sub.add_parser("serve", help="run an in-process deployment")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--data-dir", default="./enclave-data")
    p.add_argument("--admin-key", default=None)
    p.add_argument("--egress", default="enclave_only", choices=["enclave_only", "open"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--canned-runner", default="auto", metavar="CMD",
                   help="command for canned-function payloads; 'auto' uses an "
                        "installed kotta runner, 'none' disables")
    p.add_argument("--demo", action="store_true",
                   help="seed a demo role/principal and write its token file")
    return parser


HANDLERS = {
    "submit": cmd_submit,
    "status": cmd_status,
    "outputs": cmd_outputs,
    "stdout": cmd_stdout,
    "stderr": cmd_stdout,
    "put": cmd_put,
    "get": cmd_get,
    "sign": cmd_sign,
    "audit": cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "serve":
            return cmd_serve(args)
        client = ApiClient(args.endpoint, token_file_path(args.token_file))
        return HANDLERS[args.verb](client, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
