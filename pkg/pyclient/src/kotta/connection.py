"""Authenticated HTTP access to the enclave REST API.

A Connection reads a refresh token from the standard token file (one
`refresh_token=...` line), exchanges it for access tokens, and retries any
401 exactly once per call with a fresh token. The cached access token is
swapped atomically; everything else is stateless per request.
"""

from __future__ import annotations

import os
import threading

import requests

from .errors import AuthFailure, RequestFailed

DEFAULT_TOKEN_PATH = os.path.join(os.path.expanduser("~"), ".kotta", "token")

TERMINAL_STATUSES = ("completed", "failed", "cancelled", "walltime_exceeded")


class Connection:
    def __init__(self, endpoint: str, token_file: str | None = None,
                 poll_initial: float = 0.5, poll_cap: float = 8.0):
        self.endpoint = endpoint.rstrip("/")
        self.token_file = (token_file or os.environ.get("KOTTA_TOKEN_FILE")
                           or DEFAULT_TOKEN_PATH)
        self.poll_initial = poll_initial
        self.poll_cap = poll_cap
        self._session = requests.Session()
        self._access: str | None = None
        self._lock = threading.Lock()

    # --- token plumbing ---------------------------------------------------------

    def _read_refresh_token(self) -> str:
        try:
            with open(self.token_file) as fh:
                line = fh.read().strip()
        except OSError as exc:
            raise AuthFailure(f"cannot read token file {self.token_file}: {exc}") from exc
        _, _, value = line.partition("=")
        return value.strip()

    def _refresh(self) -> str:
        resp = self._session.post(f"{self.endpoint}/tokens/refresh",
                                  json={"refresh_token": self._read_refresh_token()})
        if resp.status_code != 200:
            raise AuthFailure(f"refresh rejected: {_message(resp)}")
        access = resp.json()["access_token"]
        with self._lock:
            self._access = access
        return access

    def request(self, method: str, path: str, **kwargs) -> requests.Response:
        with self._lock:
            access = self._access
        if access is None:
            access = self._refresh()
        headers = {"Authorization": f"Bearer {access}"}
        resp = self._session.request(method, self.endpoint + path,
                                     headers=headers, **kwargs)
        if resp.status_code == 401:                       # once per call
            headers = {"Authorization": f"Bearer {self._refresh()}"}
            resp = self._session.request(method, self.endpoint + path,
                                         headers=headers, **kwargs)
            if resp.status_code == 401:
                raise AuthFailure(f"still unauthorized after refresh: {_message(resp)}")
        return resp

    # --- API helpers -----------------------------------------------------------

    def submit(self, description: dict) -> str:
        resp = self.request("POST", "/jobs", json=description)
        return _checked(resp).json()["job_id"]

    def job(self, job_id: str) -> dict:
        return _checked(self.request("GET", f"/jobs/{job_id}")).json()

    def stream(self, job_id: str, name: str) -> bytes:
        return _checked(self.request("GET", f"/jobs/{job_id}/{name}")).content

    def result_bytes(self, job_id: str) -> bytes:
        return _checked(self.request("GET", f"/jobs/{job_id}/result")).content


def _message(resp: requests.Response) -> str:
    try:
        body = resp.json()
        return f"{body.get('error', 'Error')}: {body.get('message', '')}"
    except ValueError:
        return f"HTTP {resp.status_code}"


def _checked(resp: requests.Response) -> requests.Response:
    if resp.status_code == 200:
        return resp
    try:
        body = resp.json()
        code, message = body.get("error", ""), body.get("message", "")
    except ValueError:
        code, message = "", resp.text[:200]
    raise RequestFailed(f"{code}: {message}" if code else message,
                        code=code, status=resp.status_code)
