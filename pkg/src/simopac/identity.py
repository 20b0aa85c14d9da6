"""SN@URI identifiers and positive patient identification."""

from __future__ import annotations

import datetime as dt
import re
import unicodedata
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union

from .errors import SimopacError

SCHEME = "simopac"
_HEX16 = re.compile(r"[0-9A-Fa-f]{16}")
_HOST = re.compile(r"[A-Za-z0-9](?:[A-Za-z0-9.-]*[A-Za-z0-9])?")


class IdentityError(SimopacError, ValueError):
    pass


class MissingSeparator(IdentityError):
    pass


class BadSerialHex(IdentityError):
    pass


class BadScheme(IdentityError):
    pass


class BadHostOrPort(IdentityError):
    pass


class EmptyRealm(IdentityError):
    pass


@dataclass(frozen=True)
class EmrUri:
    host: str
    port: int | None
    realm: str

    def __str__(self) -> str:
        authority = self.host if self.port is None else f"{self.host}:{self.port}"
        return f"{SCHEME}://{authority}/{self.realm}"


def parse_uri(uri: str) -> EmrUri:
    """Parse ``simopac://host[:port]/realm``."""
    prefix = SCHEME + "://"
    if not uri.startswith(prefix):
        raise BadScheme(f"expected {prefix!r} URI, got {uri!r}")
    rest = uri[len(prefix):]
    authority, sep, realm = rest.partition("/")
    if not sep or not realm:
        raise EmptyRealm(f"URI {uri!r} has no realm")
    if any(c.isspace() or c in "/@?#" for c in realm):
        raise EmptyRealm(f"URI {uri!r} has an invalid realm {realm!r}")
    host, colon, port_text = authority.partition(":")
    if not _HOST.fullmatch(host):
        raise BadHostOrPort(f"bad host in {uri!r}")
    port = None
    if colon:
        if not port_text.isdigit() or not 1 <= int(port_text) <= 65535 or port_text.startswith("0"):
            raise BadHostOrPort(f"bad port in {uri!r}")
        port = int(port_text)
    return EmrUri(host, port, realm)


@dataclass(frozen=True)
class SnUri:
    sn: bytes
    uri: str

    def __post_init__(self) -> None:
        if len(self.sn) != 8:
            raise BadSerialHex("serial number must be 8 bytes")

    @property
    def realm(self) -> str:
        return parse_uri(self.uri).realm

    def __str__(self) -> str:
        return format_sn_uri(self)


def parse_sn(text: str) -> bytes:
    if not _HEX16.fullmatch(text):
        raise BadSerialHex(f"serial must be 16 hex digits, got {text!r}")
    return bytes.fromhex(text)


def format_sn(sn: bytes) -> str:
    return sn.hex().upper()


def parse_sn_uri(s: str) -> SnUri:
    sn_text, sep, uri = s.partition("@")
    if not sep:
        raise MissingSeparator(f"no '@' in {s!r}")
    sn = parse_sn(sn_text)
    parse_uri(uri)
    return SnUri(sn, uri)


def format_sn_uri(ident: SnUri) -> str:
    return f"{format_sn(ident.sn)}@{ident.uri}"


# -- positive patient identification ------------------------------------------

class Sex(str, Enum):
    M = "M"
    F = "F"
    U = "U"


@dataclass(frozen=True)
class Demographics:
    family: str
    given: str
    dob: dt.date
    sex: Sex = Sex.U

    def __post_init__(self) -> None:
        if self.dob > dt.date.today():
            raise IdentityError("date of birth is in the future")
        object.__setattr__(self, "sex", Sex(self.sex))


class Verdict(str, Enum):
    MATCHED_EXACT = "MatchedExact"
    MATCHED_PROBABLE = "MatchedProbable"
    NO_MATCH = "NoMatch"
    AMBIGUOUS = "Ambiguous"


@dataclass(frozen=True)
class MatchResult:
    verdict: Verdict
    matched_sn: bytes | None = None


def normalize_name(name: str) -> str:
    """Case-fold, strip diacritics, and drop whitespace and hyphens."""
    decomposed = unicodedata.normalize("NFKD", name.casefold())
    stripped = "".join(c for c in decomposed if not unicodedata.combining(c))
    return "".join(c for c in stripped if not (c.isspace() or c in "-‐‑"))


def _key(d: Demographics) -> tuple[str, str, dt.date]:
    return normalize_name(d.family), normalize_name(d.given), d.dob


def match_patient(
    probe: Union[bytes, Demographics],
    candidates: Iterable[tuple[bytes, Demographics]],
) -> MatchResult:
    cands: Sequence[tuple[bytes, Demographics]] = list(candidates)
    if len({sn for sn, _ in cands}) != len(cands):
        raise IdentityError("candidate serials must be unique")
    if isinstance(probe, (bytes, bytearray)):
        for sn, _ in cands:
            if sn == bytes(probe):
                return MatchResult(Verdict.MATCHED_EXACT, sn)
        return MatchResult(Verdict.NO_MATCH)
    want = _key(probe)
    hits = [sn for sn, demo in cands if _key(demo) == want]
    if len(hits) == 1:
        return MatchResult(Verdict.MATCHED_PROBABLE, hits[0])
    if hits:
        return MatchResult(Verdict.AMBIGUOUS)
    return MatchResult(Verdict.NO_MATCH)


# -- realm registry -----------------------------------------------------------

def load_realm_registry(path) -> dict[str, str]:
    """Read ``realm<TAB>host:port`` lines. Blank lines and ``#`` comments are skipped."""
    registry: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or ":" not in parts[1]:
                raise IdentityError(f"{path}:{lineno}: expected 'realm<TAB>host:port'")
            registry[parts[0]] = parts[1]
    return registry
