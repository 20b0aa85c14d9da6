"""SIMOPAC node: HTTP/JSON API over the store, agents, terminology and access control.

Endpoints::

    POST /auth/login                      {"username", "password"} -> {"token", "expires_at"}
    POST /resolve                         {"sn_uri", "reason"?} -> chart | 307 referral
    GET  /patients/{sn}/chart
    GET  /patients/{sn}/summary?template=ID&version=V[&now=T]
    POST /ingest[?source=ID]              HL7-lite body (text/plain) -> IngestReport
    POST /patients/{sn}/tag?profile=NAME[&template=ID&version=V&now=T]
    GET  /audit?from=T&to=T[&principal=U&patient=SN]
    GET  /health

Bearer tokens go in ``Authorization``; break-glass reasons in ``X-Access-Reason``
(or ``reason`` in the resolve body). Times in JSON are ISO-8601 UTC.
"""

from __future__ import annotations

import datetime as dt
import errno
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import parse_qs, urlsplit

from . import terminology as term
from .access_control import AccessControl, Action, AuditLog, InvalidCredentials, load_principals
from .aggregation import AggregationEngine, ValidationFailed
from .errors import NotFound, SimopacError, StorageFailure
from .hl7lite import Hl7Error
from .keys import resolve_secret
from .identity import IdentityError, format_sn, load_realm_registry, parse_sn, parse_sn_uri
from .record_store import PatientChart, RecordStore
from .tag_codec import PROFILES, CodecError, RequiredFieldsExceedBudget
from .templates import TemplateRegistry, fields_to_json, validate_values

log = logging.getLogger(__name__)


class ServiceError(SimopacError):
    pass


class PortUnavailable(ServiceError):
    pass


class ConfigInvalid(ServiceError):
    pass


# -- configuration ------------------------------------------------------------

@dataclass
class NodeConfig:
    realm: str
    data_dir: Path
    principals: Path
    listen: str = "127.0.0.1:0"
    registry: Path | None = None
    mappings: Path = term.DEFAULT_MAPPINGS
    concepts: Path = term.DEFAULT_CONCEPTS
    tag_key: str | None = None
    templates_dir: Path | None = None
    advertise: str | None = None

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "NodeConfig":
        def path(v):
            return None if v is None else (base / v)
        try:
            terms = d.get("terminology") or {}
            return cls(
                realm=d["realm"], data_dir=path(d["data_dir"]), principals=path(d["principals"]),
                listen=d.get("listen", "127.0.0.1:0"), registry=path(d.get("registry")),
                mappings=path(terms["mappings"]) if "mappings" in terms else term.DEFAULT_MAPPINGS,
                concepts=path(terms["concepts"]) if "concepts" in terms else term.DEFAULT_CONCEPTS,
                tag_key=d.get("tag_key"), templates_dir=path(d.get("templates_dir")),
                advertise=d.get("advertise"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigInvalid(f"missing or bad config key: {exc}") from exc

    @classmethod
    def load(cls, path) -> "NodeConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read config {p}: {exc}") from exc
        return cls.from_dict(doc, p.parent)


def _iso(epoch: float) -> str:
    return dt.datetime.fromtimestamp(epoch, dt.timezone.utc).isoformat().replace("+00:00", "Z")


def parse_time(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        when = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ValueError(f"bad time {text!r}") from None
    if when.tzinfo is None:
        when = when.replace(tzinfo=dt.timezone.utc)
    return when.timestamp()


def chart_json(chart: PatientChart) -> dict:
    sections = {}
    for src, events in sorted(chart.sections.items()):
        rows = []
        for e in events:
            d = e.to_dict()
            d["effective_at"] = _iso(e.effective_at)
            d["received_at"] = _iso(e.received_at)
            rows.append(d)
        sections[src] = rows
    return {"patient_sn": format_sn(chart.patient_sn), "sections": sections}


# -- node ---------------------------------------------------------------------

class Node:
    """Everything one SIMOPAC server owns, independent of the HTTP layer."""

    def __init__(self, config: NodeConfig, clock=time.time) -> None:
        if not config.realm:
            raise ConfigInvalid("realm must not be empty")
        if not Path(config.principals).is_file():
            raise ConfigInvalid(f"principals file {config.principals} does not exist")
        try:
            principals = load_principals(config.principals)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigInvalid(f"bad principals file: {exc}") from exc
        try:
            self.tag_key = resolve_secret(config.tag_key)
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"bad tag_key: {exc}") from exc
        try:
            self.terminology = term.TerminologyService(config.mappings, config.concepts)
        except term.TerminologyError as exc:
            raise ConfigInvalid(f"terminology: {exc}") from exc
        self.config = config
        self.clock = clock
        self.store = RecordStore(config.data_dir)
        self.templates = TemplateRegistry(self.store)
        if config.templates_dir is not None:
            self.templates.load_dir(config.templates_dir)
        self.audit = AuditLog(Path(config.data_dir) / "audit.jsonl", clock)
        self.access = AccessControl(principals, self.audit, clock)
        self.advertised = config.advertise

    @property
    def engine(self) -> AggregationEngine:
        return AggregationEngine(self.store, self.terminology.current, self.templates, self.clock)

    def registry(self) -> dict[str, str]:
        if self.config.registry is None or not Path(self.config.registry).exists():
            return {}
        return load_realm_registry(self.config.registry)

    def emr_uri(self) -> str:
        return f"simopac://{self.advertised}/{self.config.realm}"

    def close(self) -> None:
        self.audit.close()
        self.store.close()


class _HttpError(Exception):
    def __init__(self, status: int, message: str, body: dict | None = None) -> None:
        super().__init__(message)
        self.status = status
        self.body = body or {"error": message}


def _status_for(exc: Exception) -> int:
    if isinstance(exc, InvalidCredentials):
        return 401
    if isinstance(exc, NotFound):
        return 404
    if isinstance(exc, (ValidationFailed, RequiredFieldsExceedBudget)):
        return 422
    if isinstance(exc, StorageFailure):
        return 503
    if isinstance(exc, (IdentityError, Hl7Error, CodecError, ValueError)):
        return 400
    return 500


_ROUTES = [
    ("POST", re.compile(r"/auth/login"), "login"),
    ("POST", re.compile(r"/resolve"), "resolve"),
    ("GET", re.compile(r"/patients/(?P<sn>[^/]+)/chart"), "chart"),
    ("GET", re.compile(r"/patients/(?P<sn>[^/]+)/summary"), "summary"),
    ("POST", re.compile(r"/patients/(?P<sn>[^/]+)/tag"), "tag"),
    ("POST", re.compile(r"/ingest"), "ingest"),
    ("GET", re.compile(r"/audit"), "audit"),
    ("GET", re.compile(r"/health"), "health"),
]


class _Handler(BaseHTTPRequestHandler):
    node: Node
    server_version = "simopac/0.1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    # -- plumbing ---------------------------------------------------------------

    def _send(self, status: int, body: Any, headers: dict | None = None) -> None:
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        try:
            doc = json.loads(self._body() or b"{}")
        except ValueError as exc:
            raise _HttpError(400, f"body is not JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise _HttpError(400, "body must be a JSON object")
        return doc

    @property
    def _token(self) -> str | None:
        auth = self.headers.get("Authorization", "")
        return auth[7:].strip() if auth.startswith("Bearer ") else None

    def _dispatch(self, method: str) -> None:
        parts = urlsplit(self.path)
        self.query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        for m, pattern, name in _ROUTES:
            match = pattern.fullmatch(parts.path)
            if match and m == method:
                break
        else:
            self._body()
            self._send(404, {"error": f"no route for {method} {parts.path}"})
            return
        try:
            status, body, headers = getattr(self, "_" + name)(**match.groupdict())
        except _HttpError as exc:
            status, body, headers = exc.status, exc.body, None
        except Exception as exc:  # mapped to a status; nothing escapes to the socket layer
            status = _status_for(exc)
            if status == 500:
                log.exception("unhandled error in %s", name)
            body, headers = {"error": f"{type(exc).__name__}: {exc}"}, None
        self._send(status, body, headers)

    def _permit(self, action: Action, sn: bytes | None = None, reason: str | None = None):
        d = self.node.access.authorize(self._token, action, sn, reason)
        if not d.permit:
            raise _HttpError(401 if not d.authenticated else 403, d.reason)
        return d

    def _audit_error(self, action: Action, sn: bytes | None, message: str) -> None:
        tok = self.node.access.session(self._token)
        self.node.audit.append(tok.principal.username if tok else None, action, "error", sn, message)

    def _path_sn(self, text: str, action: Action) -> bytes:
        try:
            return parse_sn(text)
        except IdentityError as exc:
            self._audit_error(action, None, str(exc))
            raise _HttpError(400, str(exc)) from None

    def _now(self) -> int:
        return int(parse_time(self.query["now"])) if "now" in self.query else int(self.node.clock())

    # -- endpoints ----------------------------------------------------------------

    def _health(self):
        return 200, {"status": "ok", "realm": self.node.config.realm}, None

    def _login(self):
        try:
            doc = self._json_body()
            username, password = str(doc["username"]), str(doc["password"])
        except (_HttpError, KeyError) as exc:
            self.node.audit.append(None, Action.LOGIN, "error", reason="malformed login request")
            raise _HttpError(400, f"malformed login request: {exc}") from None
        tok = self.node.access.authenticate(username, password)
        return 200, {"token": tok.token, "expires_at": _iso(tok.expires_at),
                     "principal": tok.principal.public()}, None

    def _resolve(self):
        reason = self.headers.get("X-Access-Reason")
        try:
            doc = self._json_body()
            reason = doc.get("reason") or reason
            ident = parse_sn_uri(str(doc.get("sn_uri", "")))
        except (_HttpError, IdentityError) as exc:
            self._audit_error(Action.RESOLVE, None, str(exc))
            raise _HttpError(400, f"bad SN@URI: {exc}") from None
        self._permit(Action.RESOLVE, ident.sn, reason)
        realm = ident.realm
        if realm == self.node.config.realm:
            chart = self.node.store.get_chart(ident.sn)
            summaries = [dict(s.to_dict(), discharged_at=_iso(s.discharged_at))
                         for s in self.node.store.summaries(ident.sn)]
            return 200, {"kind": "chart", "realm": realm, "chart": chart_json(chart),
                         "discharge_summaries": summaries}, None
        address = self.node.registry().get(realm)
        if address is None:
            raise _HttpError(404, f"realm {realm!r} is not in the registry")
        body = {"kind": "referral", "realm": realm, "address": address, "sn_uri": str(ident)}
        return 307, body, {"Location": f"http://{address}/resolve"}

    def _chart(self, sn: str):
        patient = self._path_sn(sn, Action.READ_CHART)
        self._permit(Action.READ_CHART, patient, self.headers.get("X-Access-Reason"))
        return 200, chart_json(self.node.store.get_chart(patient)), None

    def _summary(self, sn: str):
        patient = self._path_sn(sn, Action.READ_SUMMARY)
        self._permit(Action.READ_SUMMARY, patient, self.headers.get("X-Access-Reason"))
        template = self.node.templates.get(int(self.query.get("template", 1)),
                                           int(self.query.get("version", 1)))
        fields = self.node.store.build_cip_fields(patient, template, self._now())
        report = validate_values(template, fields)
        return 200, {
            "patient_sn": format_sn(patient),
            "template": {"template_id": template.template_id, "version": template.version,
                         "name": template.name},
            "fields": fields_to_json(template, fields),
            "valid": report.valid,
            "verdicts": [str(v) for v in report.verdicts],
        }, None

    def _ingest(self):
        body = self._body()
        self._permit(Action.INGEST)
        try:
            text = body.decode("utf-8")
        except UnicodeDecodeError:
            raise _HttpError(400, "body is not UTF-8") from None
        source = self.query.get("source")
        if source is None:
            from .hl7lite import parse_message
            source = parse_message(text).sending_facility or "unknown"
        report = self.node.engine.ingest(source, [(text, None)])
        status = 200 if not report.errors else 400
        body = report.to_dict()
        if report.duplicates and not report.events_appended:
            body["marker"] = "DuplicateIgnored"
        return status, body, None

    def _tag(self, sn: str):
        patient = self._path_sn(sn, Action.REFRESH_TAG)
        self._permit(Action.REFRESH_TAG, patient)
        name = self.query.get("profile", "TAG-2K")
        if name not in PROFILES:
            raise _HttpError(400, f"unknown profile {name!r}")
        profile = PROFILES[name]
        ref = (int(self.query.get("template", 1)), int(self.query.get("version", 1)))
        image, dropped = self.node.engine.refresh_tag_payload(
            patient, ref, profile, self.node.tag_key, self.node.emr_uri(), self._now())
        return 200, {"patient_sn": format_sn(patient), "profile": profile.name,
                     "capacity_bytes": profile.capacity_bytes, "length": len(image),
                     "image_hex": image.hex().upper(), "dropped": dropped,
                     "sealed": self.node.tag_key is not None}, None

    def _audit(self):
        self._permit(Action.READ_AUDIT)
        start = parse_time(self.query["from"]) if "from" in self.query else None
        end = parse_time(self.query["to"]) if "to" in self.query else None
        patient = parse_sn(self.query["patient"]) if "patient" in self.query else None
        entries = self.node.audit.query(start, end, self.query.get("principal"), patient)
        return 200, {"entries": [dict(e.to_dict(), at=_iso(e.at)) for e in entries]}, None


@dataclass
class ServiceHandle:
    node: Node
    server: ThreadingHTTPServer
    thread: threading.Thread
    _stopped: bool = field(default=False, repr=False)

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    def shutdown(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)
        self.node.close()

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(config: NodeConfig, clock=time.time) -> ServiceHandle:
    """Start a node in a background thread and return its handle."""
    host, _, port = config.listen.rpartition(":")
    try:
        port_num = int(port)
    except ValueError:
        raise ConfigInvalid(f"bad listen address {config.listen!r}") from None
    node = Node(config, clock)
    handler = type("Handler", (_Handler,), {"node": node})
    try:
        server = ThreadingHTTPServer((host or "127.0.0.1", port_num), handler)
    except OSError as exc:
        node.close()
        if exc.errno in (errno.EADDRINUSE, errno.EACCES, errno.EADDRNOTAVAIL):
            raise PortUnavailable(f"cannot listen on {config.listen}: {exc.strerror}") from exc
        raise
    server.daemon_threads = True
    if node.advertised is None:
        h, p = server.server_address[:2]
        node.advertised = f"{h}:{p}"
    thread = threading.Thread(target=server.serve_forever, args=(0.05,), name=f"simopac-{config.realm}", daemon=True)
    thread.start()
    return ServiceHandle(node, server, thread)
