"""Password authentication, role-based authorization and the audit trail."""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from .errors import SimopacError, StorageFailure
from .identity import format_sn, parse_sn

SESSION_TTL = 8 * 3600
ROLES = ("physician", "emergency", "agent", "admin")

# scrypt cost; n=2**14, r=8 needs 16 MiB per hash
SCRYPT_N = 2**14
SCRYPT_R = 8
SCRYPT_P = 1


class AuthError(SimopacError):
    pass


class InvalidCredentials(AuthError):
    pass


class Action(str, Enum):
    LOGIN = "login"
    READ_CHART = "read_chart"
    READ_SUMMARY = "read_summary"
    INGEST = "ingest"
    REFRESH_TAG = "refresh_tag"
    RESOLVE = "resolve"
    READ_AUDIT = "read_audit"
    MANAGE_PRINCIPALS = "manage_principals"
    DENIED = "denied"


PATIENT_SCOPED = frozenset({Action.READ_CHART, Action.READ_SUMMARY, Action.REFRESH_TAG, Action.RESOLVE})

# resolve is a chart read through an identifier
ROLE_MATRIX: dict[str, frozenset[Action]] = {
    "physician": frozenset({Action.READ_CHART, Action.READ_SUMMARY, Action.REFRESH_TAG, Action.RESOLVE}),
    "agent": frozenset({Action.INGEST}),
    "emergency": frozenset({Action.READ_CHART, Action.READ_SUMMARY, Action.RESOLVE}),
    "admin": frozenset({Action.READ_AUDIT, Action.MANAGE_PRINCIPALS}),
}


# -- passwords ----------------------------------------------------------------

@dataclass(frozen=True)
class PasswordRecord:
    salt: bytes
    digest: bytes
    n: int = SCRYPT_N
    r: int = SCRYPT_R
    p: int = SCRYPT_P

    def to_dict(self) -> dict:
        return {"scheme": "scrypt", "salt": self.salt.hex(), "hash": self.digest.hex(),
                "n": self.n, "r": self.r, "p": self.p}

    @classmethod
    def from_dict(cls, d: dict) -> "PasswordRecord":
        if d.get("scheme") != "scrypt":
            raise ValueError(f"unsupported password scheme {d.get('scheme')!r}")
        return cls(bytes.fromhex(d["salt"]), bytes.fromhex(d["hash"]), int(d["n"]), int(d["r"]), int(d["p"]))


def _scrypt(password: str, salt: bytes, n: int, r: int, p: int) -> bytes:
    return hashlib.scrypt(password.encode("utf-8"), salt=salt, n=n, r=r, p=p,
                          maxmem=256 * n * r + 2**20, dklen=32)


def hash_password(password: str, *, n: int = SCRYPT_N, r: int = SCRYPT_R, p: int = SCRYPT_P) -> PasswordRecord:
    salt = secrets.token_bytes(16)
    return PasswordRecord(salt, _scrypt(password, salt, n, r, p), n, r, p)


def check_password(record: PasswordRecord, password: str) -> bool:
    return hmac.compare_digest(_scrypt(password, record.salt, record.n, record.r, record.p), record.digest)


@dataclass(frozen=True)
class Principal:
    username: str
    role: str
    password: PasswordRecord = field(repr=False)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def public(self) -> dict:
        return {"username": self.username, "role": self.role}


def load_principals(path) -> dict[str, Principal]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    out: dict[str, Principal] = {}
    for rec in doc:
        if rec["username"] in out:
            raise ValueError(f"duplicate username {rec['username']!r}")
        out[rec["username"]] = Principal(rec["username"], rec["role"], PasswordRecord.from_dict(rec["password"]))
    return out


def save_principals(path, principals) -> None:
    doc = [{"username": p.username, "role": p.role, "password": p.password.to_dict()}
           for p in sorted(principals, key=lambda p: p.username)]
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# -- sessions, decisions, audit -----------------------------------------------

@dataclass(frozen=True)
class SessionToken:
    token: str
    principal: Principal
    issued_at: float
    expires_at: float


@dataclass(frozen=True)
class Decision:
    permit: bool
    reason: str = ""
    principal: Principal | None = None
    authenticated: bool = True

    def __bool__(self) -> bool:
        return self.permit


@dataclass(frozen=True)
class AuditEntry:
    at: float
    principal: str | None
    action: str
    outcome: str  # ok | denied | error
    patient_sn: bytes | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"at": self.at, "principal": self.principal, "action": self.action, "outcome": self.outcome,
                "patient_sn": None if self.patient_sn is None else format_sn(self.patient_sn),
                "reason": self.reason}

    @classmethod
    def from_dict(cls, d: dict) -> "AuditEntry":
        sn = d.get("patient_sn")
        return cls(float(d["at"]), d.get("principal"), d["action"], d["outcome"],
                   None if sn is None else parse_sn(sn), d.get("reason"))


class AuditLog:
    """Append-only NDJSON audit trail; timestamps never go backwards within a process."""

    def __init__(self, path, clock: Callable[[], float] = time.time) -> None:
        self.path = Path(path)
        self.clock = clock
        self._lock = threading.Lock()
        self._last = 0.0
        self._entries: list[AuditEntry] = []
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                for line in self.path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        self._entries.append(AuditEntry.from_dict(json.loads(line)))
            self._fh = self.path.open("a", encoding="utf-8")
        except (OSError, ValueError) as exc:
            raise StorageFailure(f"cannot open audit log {self.path}: {exc}") from exc
        if self._entries:
            self._last = self._entries[-1].at

    def append(self, principal: str | None, action: Action | str, outcome: str,
               patient_sn: bytes | None = None, reason: str | None = None) -> AuditEntry:
        with self._lock:
            at = max(self.clock(), self._last)
            self._last = at
            entry = AuditEntry(at, principal, Action(action).value, outcome, patient_sn, reason or None)
            try:
                self._fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
                self._fh.flush()
            except (OSError, ValueError) as exc:
                raise StorageFailure(f"cannot append audit entry: {exc}") from exc
            self._entries.append(entry)
            return entry

    def query(self, start: float | None = None, end: float | None = None, principal: str | None = None,
              patient_sn: bytes | None = None) -> list[AuditEntry]:
        """Entries with ``start <= at < end``, oldest first."""
        with self._lock:
            entries = list(self._entries)
        return [e for e in entries
                if (start is None or e.at >= start) and (end is None or e.at < end)
                and (principal is None or e.principal == principal)
                and (patient_sn is None or e.patient_sn == patient_sn)]

    def flush(self) -> None:
        with self._lock:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()


class AccessControl:
    def __init__(self, principals: dict[str, Principal], audit: AuditLog,
                 clock: Callable[[], float] = time.time) -> None:
        self.principals = dict(principals)
        self.audit = audit
        self.clock = clock
        self._tokens: dict[str, SessionToken] = {}
        self._lock = threading.Lock()
        # verified against when the username is unknown, so both failures cost the same
        self._decoy = hash_password(secrets.token_hex(8))

    def authenticate(self, username: str, password: str) -> SessionToken:
        principal = self.principals.get(username)
        record = principal.password if principal is not None else self._decoy
        ok = check_password(record, password) and principal is not None
        if not ok:
            self.audit.append(username, Action.LOGIN, "denied", reason="invalid credentials")
            raise InvalidCredentials("invalid username or password")
        now = self.clock()
        tok = SessionToken(secrets.token_urlsafe(32), principal, now, now + SESSION_TTL)
        with self._lock:
            self._tokens[tok.token] = tok
        self.audit.append(username, Action.LOGIN, "ok")
        return tok

    def session(self, token: str | None) -> SessionToken | None:
        if not token:
            return None
        with self._lock:
            tok = self._tokens.get(token)
            if tok is not None and self.clock() >= tok.expires_at:
                del self._tokens[token]
                tok = None
        return tok

    def decide(self, token: str | None, action: Action | str, reason: str | None = None) -> Decision:
        """Role-matrix decision without writing an audit entry."""
        action = Action(action)
        tok = self.session(token)
        if tok is None:
            return Decision(False, "unauthenticated", authenticated=False)
        p = tok.principal
        if action not in ROLE_MATRIX[p.role]:
            return Decision(False, f"role {p.role} may not {action.value}", p)
        if p.role == "emergency" and not (reason and reason.strip()):
            return Decision(False, "break-glass access requires a reason", p)
        return Decision(True, "", p)

    def authorize(self, token: str | None, action: Action | str, patient_sn: bytes | None = None,
                  reason: str | None = None) -> Decision:
        """Decide and write exactly one audit entry for the decision."""
        action = Action(action)
        d = self.decide(token, action, reason)
        who = d.principal.username if d.principal is not None else None
        if d.permit:
            self.audit.append(who, action, "ok", patient_sn, reason)
        elif not d.authenticated:
            self.audit.append(None, Action.DENIED, "denied", patient_sn, f"{action.value}: {d.reason}")
        else:
            self.audit.append(who, action, "denied", patient_sn, reason or d.reason)
        return d

    def add_principal(self, username: str, role: str, password: str, **cost) -> Principal:
        if username in self.principals:
            raise ValueError(f"user {username!r} exists")
        p = Principal(username, role, hash_password(password, **cost))
        self.principals[username] = p
        return p


def audit_query(audit: AuditLog, start=None, end=None, principal=None, patient_sn=None) -> list[AuditEntry]:
    return audit.query(start, end, principal, patient_sn)
