"""CIP-1 tag image codec.

Layout (big-endian)::

    "CIP" | version=0x01 | flags | SN[8] | uri_len | URI
    template_id:u16 | template_version:u8 | updated_at:u32 | field_count:u8
    field_count x (field_id:u16 | kind:u8 | value_len:u16 | value)
    crc16 (CCITT-FALSE over everything above)
    [mac: 32 bytes over everything above, present iff flags bit0]

This module must stay importable without any network or storage code: the
offline triage path depends on it.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import hmac
import math
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, NamedTuple, Union

from .crc import crc16_ccitt_false
from .errors import SimopacError
from .identity import IdentityError, parse_uri

MAGIC = b"CIP"
VERSION = 0x01
FLAG_MAC = 0x01
MAC_LEN = 32
HEADER_LEN = 22  # fixed header bytes, URI excluded
ENTRY_HEADER_LEN = 5
CRC_LEN = 2
MAX_URI_BYTES = 120
MAX_FIELDS = 255
EPOCH = dt.date(1970, 1, 1)


class CodecError(SimopacError, ValueError):
    pass


class EncodeError(CodecError):
    pass


class InvalidPayload(EncodeError):
    pass


class UriTooLong(EncodeError):
    pass


class TooManyFields(EncodeError):
    pass


class ValueTooLong(EncodeError):
    pass


class DecodeError(CodecError):
    pass


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class BadFlags(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class CrcMismatch(DecodeError):
    pass


class UnknownFieldKind(DecodeError):
    pass


class LengthOverrun(DecodeError):
    pass


class MalformedValue(DecodeError):
    pass


class SealError(CodecError):
    pass


class AlreadySealed(SealError):
    pass


class NotSealed(SealError):
    pass


class RequiredFieldsExceedBudget(CodecError):
    pass


class FieldKind(IntEnum):
    TEXT = 0x01
    CODE = 0x02
    DATE = 0x03
    QUANTITY = 0x04
    BOOLEAN = 0x05
    IDENTIFIER = 0x06


class Code(NamedTuple):
    system: int
    code: str


class Quantity(NamedTuple):
    value: float
    unit: str


Value = Union[str, Code, dt.date, Quantity, bool]


@dataclass(frozen=True)
class TagProfile:
    name: str
    capacity_bytes: int

    def __post_init__(self) -> None:
        if self.capacity_bytes < 64:
            raise ValueError("tag capacity must be at least 64 bytes")


TAG_2K = TagProfile("TAG-2K", 256)
TAG_32K = TagProfile("TAG-32K", 4096)
PROFILES = {p.name: p for p in (TAG_2K, TAG_32K)}


@dataclass(frozen=True)
class FieldValue:
    field_id: int
    kind: FieldKind
    value: Value

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FieldKind(self.kind))


@dataclass(frozen=True)
class CipPayload:
    sn: bytes
    emr_uri: str
    template_id: int
    template_version: int
    updated_at: int
    fields: tuple[FieldValue, ...] = ()
    mac_present: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))


# -- value encoding -----------------------------------------------------------

def _utf8(s: str, what: str) -> bytes:
    if not isinstance(s, str):
        raise InvalidPayload(f"{what} must be text")
    return s.encode("utf-8")


def encode_value(kind: FieldKind, value: Value) -> bytes:
    """Kind-specific value bytes (no entry header)."""
    if kind in (FieldKind.TEXT, FieldKind.IDENTIFIER):
        return _utf8(value, kind.name.lower())
    if kind is FieldKind.CODE:
        if not isinstance(value, tuple) or len(value) != 2:
            raise InvalidPayload("code value must be Code(system, code)")
        system, code = value
        if not isinstance(system, int) or not 0 <= system <= 0xFF:
            raise InvalidPayload(f"code system id {system!r} out of range")
        return bytes([system]) + _utf8(code, "code")
    if kind is FieldKind.DATE:
        if not isinstance(value, dt.date) or isinstance(value, dt.datetime):
            raise InvalidPayload("date value must be a datetime.date")
        days = (value - EPOCH).days
        if not -(2**31) <= days < 2**31:
            raise InvalidPayload("date out of range")
        return struct.pack(">i", days)
    if kind is FieldKind.QUANTITY:
        if not isinstance(value, tuple) or len(value) != 2:
            raise InvalidPayload("quantity value must be Quantity(value, unit)")
        number, unit = value
        if isinstance(number, bool) or not isinstance(number, (int, float)) or math.isnan(number):
            raise InvalidPayload("quantity must be a non-NaN number")
        unit_b = _utf8(unit, "unit")
        if len(unit_b) > 0xFF:
            raise ValueTooLong("quantity unit longer than 255 bytes")
        return struct.pack(">dB", float(number), len(unit_b)) + unit_b
    if kind is FieldKind.BOOLEAN:
        if not isinstance(value, bool):
            raise InvalidPayload("boolean value must be bool")
        return b"\x01" if value else b"\x00"
    raise InvalidPayload(f"unknown kind {kind!r}")


def decode_value(kind_byte: int, raw: bytes) -> tuple[FieldKind, Value]:
    try:
        kind = FieldKind(kind_byte)
    except ValueError:
        raise UnknownFieldKind(f"unknown field kind 0x{kind_byte:02X}") from None
    try:
        if kind in (FieldKind.TEXT, FieldKind.IDENTIFIER):
            return kind, raw.decode("utf-8")
        if kind is FieldKind.CODE:
            if not raw:
                raise MalformedValue("empty code value")
            return kind, Code(raw[0], raw[1:].decode("utf-8"))
        if kind is FieldKind.DATE:
            if len(raw) != 4:
                raise MalformedValue("date value must be 4 bytes")
            days = struct.unpack(">i", raw)[0]
            try:
                return kind, EPOCH + dt.timedelta(days=days)
            except OverflowError:
                raise MalformedValue("date out of range") from None
        if kind is FieldKind.QUANTITY:
            if len(raw) < 9:
                raise MalformedValue("quantity value too short")
            number, unit_len = struct.unpack(">dB", raw[:9])
            if len(raw) != 9 + unit_len or math.isnan(number):
                raise MalformedValue("bad quantity value")
            return kind, Quantity(number, raw[9:].decode("utf-8"))
        if len(raw) != 1 or raw[0] > 1:
            raise MalformedValue("boolean value must be 0x00 or 0x01")
        return kind, raw == b"\x01"
    except UnicodeDecodeError as exc:
        raise MalformedValue(f"invalid UTF-8 in {kind.name.lower()} value") from exc


def entry_size(fv: FieldValue) -> int:
    return ENTRY_HEADER_LEN + len(encode_value(fv.kind, fv.value))


# -- payload encoding ---------------------------------------------------------

def _check_payload(p: CipPayload) -> bytes:
    if not isinstance(p.sn, bytes) or len(p.sn) != 8:
        raise InvalidPayload("serial number must be 8 bytes")
    if p.sn == bytes(8):
        raise InvalidPayload("serial number must not be all zero")
    uri = _utf8(p.emr_uri, "EMR URI")
    if not uri:
        raise InvalidPayload("EMR URI must not be empty")
    if len(uri) > MAX_URI_BYTES:
        raise UriTooLong(f"EMR URI is {len(uri)} bytes, limit {MAX_URI_BYTES}")
    try:
        parse_uri(p.emr_uri)
    except IdentityError as exc:
        raise InvalidPayload(f"invalid EMR URI: {exc}") from exc
    if not 0 <= p.template_id <= 0xFFFF or not 0 <= p.template_version <= 0xFF:
        raise InvalidPayload("template reference out of range")
    if not 0 <= p.updated_at <= 0xFFFFFFFF:
        raise InvalidPayload("updated_at must fit an unsigned 32-bit value")
    if len(p.fields) > MAX_FIELDS:
        raise TooManyFields(f"{len(p.fields)} fields, limit {MAX_FIELDS}")
    return uri


def _body(p: CipPayload) -> bytearray:
    uri = _check_payload(p)
    out = bytearray(MAGIC)
    out += bytes([VERSION, FLAG_MAC if p.mac_present else 0])
    out += p.sn
    out.append(len(uri))
    out += uri
    out += struct.pack(">HBIB", p.template_id, p.template_version, p.updated_at, len(p.fields))
    for fv in p.fields:
        if not 0 <= fv.field_id <= 0xFFFF:
            raise InvalidPayload(f"field_id {fv.field_id} out of range")
        value = encode_value(fv.kind, fv.value)
        if len(value) > 0xFFFF:
            raise ValueTooLong(f"field {fv.field_id} value is {len(value)} bytes")
        out += struct.pack(">HBH", fv.field_id, fv.kind, len(value))
        out += value
    out += struct.pack(">H", crc16_ccitt_false(bytes(out)))
    return out


MacFunction = Callable[[bytes, bytes], bytes]


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def encode(payload: CipPayload, key: bytes | None = None, *, mac: MacFunction = hmac_sha256) -> bytes:
    """Serialize ``payload``. A key is required when ``payload.mac_present`` is set."""
    body = _body(payload)
    if payload.mac_present:
        if key is None:
            raise InvalidPayload("mac_present is set but no key was given")
        body += _mac(mac, key, bytes(body))
    return bytes(body)


def encoded_size(payload: CipPayload) -> int:
    """Byte length of ``encode(payload)``, MAC included when flagged."""
    size = len(_body(payload))
    return size + MAC_LEN if payload.mac_present else size


def _mac(fn: MacFunction, key: bytes, data: bytes) -> bytes:
    tag = fn(key, data)
    if len(tag) != MAC_LEN:
        raise SealError(f"MAC function returned {len(tag)} bytes, expected {MAC_LEN}")
    return tag


# -- decoding -----------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"image ends inside {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _split(image: bytes) -> tuple[CipPayload, int]:
    """Parse and CRC-check ``image``; returns the payload and where the CRC ends."""
    if not isinstance(image, (bytes, bytearray, memoryview)):
        raise DecodeError("image must be bytes")
    data = bytes(image)
    if data[:3] != MAGIC[:len(data[:3])]:
        raise BadMagic("not a CIP image")
    r = _Reader(data)
    r.take(3, "magic")
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersion(f"CIP version {version} is not supported")
    flags = r.take(1, "flags")[0]
    if flags & ~FLAG_MAC:
        raise BadFlags(f"reserved flag bits set: 0x{flags:02X}")
    sn = r.take(8, "serial number")
    uri_raw = r.take(r.take(1, "URI length")[0], "URI")
    template_id, template_version, updated_at, count = struct.unpack(
        ">HBIB", r.take(8, "template header"))
    raw_fields = []
    for _ in range(count):
        field_id, kind, length = struct.unpack(">HBH", r.take(ENTRY_HEADER_LEN, "field header"))
        if r.pos + length > len(data):
            raise LengthOverrun(f"field {field_id} declares {length} bytes past the image end")
        raw_fields.append((field_id, kind, r.take(length, "field value")))
    crc_at = r.pos
    (stored_crc,) = struct.unpack(">H", r.take(CRC_LEN, "CRC"))
    end = r.pos + (MAC_LEN if flags & FLAG_MAC else 0)
    if end > len(data):
        raise Truncated("image ends inside MAC")
    if end < len(data):
        raise LengthOverrun(f"{len(data) - end} unexpected trailing bytes")
    if crc16_ccitt_false(data[:crc_at]) != stored_crc:
        raise CrcMismatch("CRC-16 check failed")

    try:
        uri = uri_raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedValue("EMR URI is not UTF-8") from None
    fields = []
    for field_id, kind, raw in raw_fields:
        k, value = decode_value(kind, raw)
        fields.append(FieldValue(field_id, k, value))
    payload = CipPayload(sn, uri, template_id, template_version, updated_at,
                         tuple(fields), bool(flags & FLAG_MAC))
    return payload, r.pos


def decode(image: bytes) -> CipPayload:
    """Decode a CIP-1 image. Never touches network or storage.

    The MAC, when present, is carried but not checked; use :func:`verify_seal`.
    """
    return _split(image)[0]


# -- sealing ------------------------------------------------------------------

def seal(image: bytes, key: bytes, *, mac: MacFunction = hmac_sha256) -> bytes:
    payload, _ = _split(image)
    if payload.mac_present:
        raise AlreadySealed("image already carries a MAC")
    body = bytearray(image)
    body[4] |= FLAG_MAC
    body[-CRC_LEN:] = struct.pack(">H", crc16_ccitt_false(bytes(body[:-CRC_LEN])))
    return bytes(body) + _mac(mac, key, bytes(body))


def verify_seal(image: bytes, key: bytes, *, mac: MacFunction = hmac_sha256) -> bool:
    """True iff the MAC matches. Tampered images that no longer decode give False."""
    try:
        payload, crc_end = _split(image)
    except DecodeError:
        return False
    if not payload.mac_present:
        raise NotSealed("image carries no MAC")
    data = bytes(image)
    return hmac.compare_digest(_mac(mac, key, data[:crc_end]), data[crc_end:])


# -- byte budget --------------------------------------------------------------

def fit_to_budget(payload: CipPayload, template, profile: TagProfile):
    """Drop optional fields until ``payload`` fits ``profile``.

    Entries go lowest clinical priority first (highest priority number), then
    larger encoded entry, then higher field_id, then later position. Required
    fields are never dropped. Returns ``(payload, dropped_field_ids)``.
    """
    if (payload.template_id, payload.template_version) != (template.template_id, template.version):
        raise InvalidPayload("payload does not reference this template")
    by_id = {f.field_id: f for f in template.fields}
    size = encoded_size(payload)
    if size <= profile.capacity_bytes:
        return payload, []

    required = [fv for fv in payload.fields if fv.field_id in by_id and by_id[fv.field_id].required]
    floor = encoded_size(replace(payload, fields=tuple(required)))
    if floor > profile.capacity_bytes:
        raise RequiredFieldsExceedBudget(
            f"required fields need {floor} bytes, {profile.name} holds {profile.capacity_bytes}")

    def drop_key(item):
        pos, fv = item
        prio = by_id[fv.field_id].priority if fv.field_id in by_id else 256
        return (-prio, -entry_size(fv), -fv.field_id, -pos)

    candidates = sorted(
        ((pos, fv) for pos, fv in enumerate(payload.fields)
         if not (fv.field_id in by_id and by_id[fv.field_id].required)),
        key=drop_key)
    dropped_pos: set[int] = set()
    dropped: list[int] = []
    for pos, fv in candidates:
        if size <= profile.capacity_bytes:
            break
        dropped_pos.add(pos)
        dropped.append(fv.field_id)
        size -= entry_size(fv)
    kept = tuple(fv for pos, fv in enumerate(payload.fields) if pos not in dropped_pos)
    return replace(payload, fields=kept), dropped
