"""Minimal HTTP client for a SIMOPAC node (stdlib only)."""

from __future__ import annotations

import http.client
import json
from urllib.parse import urlencode, urlsplit

from .errors import SimopacError


class NetworkError(SimopacError):
    pass


class ApiError(SimopacError):
    def __init__(self, status: int, body: dict) -> None:
        super().__init__(f"HTTP {status}: {body.get('error', body)}")
        self.status = status
        self.body = body


class Client:
    def __init__(self, base: str, token: str | None = None, timeout: float = 5.0) -> None:
        if "://" not in base:
            base = "http://" + base
        parts = urlsplit(base)
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.token = token
        self.timeout = timeout

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def request(self, method: str, path: str, body=None, *, query: dict | None = None,
                headers: dict | None = None, ok=(200,)) -> tuple[int, dict]:
        hdrs = dict(headers or {})
        if self.token:
            hdrs["Authorization"] = f"Bearer {self.token}"
        if isinstance(body, (dict, list)):
            data = json.dumps(body).encode("utf-8")
            hdrs["Content-Type"] = "application/json"
        elif isinstance(body, str):
            data = body.encode("utf-8")
            hdrs["Content-Type"] = "text/plain; charset=utf-8"
        else:
            data = body
        if query:
            path = f"{path}?{urlencode({k: v for k, v in query.items() if v is not None})}"
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.request(method, path, body=data, headers=hdrs)
            resp = conn.getresponse()
            raw = resp.read()
        except OSError as exc:
            raise NetworkError(f"{self.address}: {exc}") from exc
        finally:
            conn.close()
        try:
            doc = json.loads(raw) if raw else {}
        except ValueError:
            doc = {"error": raw.decode("utf-8", "replace")}
        if resp.status not in ok:
            raise ApiError(resp.status, doc)
        return resp.status, doc

    def health(self) -> dict:
        return self.request("GET", "/health")[1]

    def login(self, username: str, password: str) -> str:
        self.token = self.request("POST", "/auth/login", {"username": username, "password": password})[1]["token"]
        return self.token

    def resolve(self, sn_uri: str, reason: str | None = None) -> tuple[int, dict]:
        """Returns ``(status, body)``; status 307 carries a referral body."""
        return self.request("POST", "/resolve", {"sn_uri": sn_uri, "reason": reason}, ok=(200, 307))

    def chart(self, sn: str, reason: str | None = None) -> dict:
        headers = {"X-Access-Reason": reason} if reason else None
        return self.request("GET", f"/patients/{sn}/chart", headers=headers)[1]

    def summary(self, sn: str, template: int = 1, version: int = 1, now=None, reason=None) -> dict:
        headers = {"X-Access-Reason": reason} if reason else None
        return self.request("GET", f"/patients/{sn}/summary", headers=headers,
                            query={"template": template, "version": version, "now": now})[1]

    def ingest(self, message: str, source: str | None = None) -> dict:
        return self.request("POST", "/ingest", message, query={"source": source})[1]

    def tag(self, sn: str, profile: str = "TAG-2K", template: int = 1, version: int = 1, now=None) -> dict:
        return self.request("POST", f"/patients/{sn}/tag", b"",
                            query={"profile": profile, "template": template, "version": version, "now": now})[1]

    def audit(self, start=None, end=None, principal=None, patient=None) -> list[dict]:
        q = {"from": start, "to": end, "principal": principal, "patient": patient}
        return self.request("GET", "/audit", query=q)[1]["entries"]
