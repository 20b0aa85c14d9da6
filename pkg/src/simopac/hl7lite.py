"""HL7-lite: a small pipe-delimited dialect of HL7 v2.

No escape sequences, repetitions or subcomponents. ``|`` separates fields,
``^`` separates components, and segments end with CR (LF and CRLF are
accepted on input).
"""

from __future__ import annotations

import calendar
import datetime as dt
import re
from dataclasses import dataclass, field

from .errors import SimopacError
from .identity import IdentityError, parse_sn
from .terminology import CodeSystem

ENCODING_CHARS = "^~\\&"
SEGMENT_TAGS = frozenset({"MSH", "PID", "AL1", "RXE", "DG1", "OBX", "TXT"})
_TS = re.compile(r"\d{14}")


class Hl7Error(SimopacError, ValueError):
    pass


class EmptyInput(Hl7Error):
    pass


class FirstSegmentNotMsh(Hl7Error):
    pass


class UnknownSegment(Hl7Error):
    pass


class BadTimestamp(Hl7Error):
    pass


class MissingControlId(Hl7Error):
    pass


class MissingPid(Hl7Error):
    pass


class EncodingNotSupported(Hl7Error):
    pass


class UnsupportedMessageType(Hl7Error):
    pass


class BadSegment(Hl7Error):
    pass


@dataclass
class Segment:
    tag: str
    fields: list[list[str]] = field(default_factory=list)

    def get(self, n: int, component: int = 0) -> str:
        """HL7-style 1-based field access (MSH numbering counts the field separator)."""
        idx = n - 2 if self.tag == "MSH" else n - 1
        if idx < 0 or idx >= len(self.fields):
            return ""
        comps = self.fields[idx]
        return comps[component] if component < len(comps) else ""

    def components(self, n: int) -> list[str]:
        idx = n - 2 if self.tag == "MSH" else n - 1
        return list(self.fields[idx]) if 0 <= idx < len(self.fields) else []


@dataclass
class Hl7LiteMessage:
    segments: list[Segment]

    @property
    def msh(self) -> Segment:
        return self.segments[0]

    @property
    def message_type(self) -> str:
        return "^".join(self.msh.components(9))

    @property
    def control_id(self) -> str:
        return self.msh.get(10)

    @property
    def sending_facility(self) -> str:
        return self.msh.get(4)

    @property
    def timestamp(self) -> int:
        return parse_timestamp(self.msh.get(7))

    @property
    def pid(self) -> Segment:
        return next(s for s in self.segments if s.tag == "PID")


def parse_timestamp(text: str) -> int:
    """``YYYYMMDDHHMMSS`` (UTC) to epoch seconds."""
    if not _TS.fullmatch(text):
        raise BadTimestamp(f"timestamp {text!r} is not YYYYMMDDHHMMSS")
    try:
        when = dt.datetime.strptime(text, "%Y%m%d%H%M%S")
    except ValueError:
        raise BadTimestamp(f"timestamp {text!r} is not a valid date/time") from None
    return calendar.timegm(when.timetuple())


def format_timestamp(epoch: int) -> str:
    return dt.datetime.fromtimestamp(epoch, dt.timezone.utc).strftime("%Y%m%d%H%M%S")


def _split_segment(line: str) -> Segment:
    parts = line.split("|")
    tag = parts[0]
    if tag == "MSH":
        # MSH-2 holds the encoding characters verbatim; it is not split on '^'.
        if len(parts) < 2 or parts[1] != ENCODING_CHARS:
            raise EncodingNotSupported(f"MSH-2 must be {ENCODING_CHARS!r}")
        return Segment(tag, [[parts[1]]] + [p.split("^") for p in parts[2:]])
    return Segment(tag, [p.split("^") for p in parts[1:]])


def parse_message(text: str) -> Hl7LiteMessage:
    if not isinstance(text, str) or not text.strip():
        raise EmptyInput("message is empty")
    lines = [ln for ln in re.split(r"\r\n|\r|\n", text) if ln != ""]
    if not lines[0].startswith("MSH|") and lines[0] != "MSH":
        raise FirstSegmentNotMsh(f"message starts with {lines[0][:3]!r}, expected MSH")
    segments = []
    for ln in lines:
        tag = ln.split("|", 1)[0]
        if tag not in SEGMENT_TAGS:
            raise UnknownSegment(f"unknown segment {tag[:10]!r}")
        segments.append(_split_segment(ln))
    if any(s.tag == "MSH" for s in segments[1:]):
        raise BadSegment("MSH may only appear first")
    msg = Hl7LiteMessage(segments)
    parse_timestamp(msg.msh.get(7))
    if not msg.control_id:
        raise MissingControlId("MSH-10 (control id) is empty")
    pids = sum(1 for s in segments if s.tag == "PID")
    if pids != 1:
        raise MissingPid(f"expected exactly one PID segment, found {pids}")
    return msg


def _check_component(c: str) -> str:
    if any(ch in c for ch in "|^\r\n"):
        raise EncodingNotSupported(f"component {c!r} contains a reserved separator")
    return c


def serialize_message(m: Hl7LiteMessage) -> str:
    out = []
    for seg in m.segments:
        parts = [seg.tag]
        for i, comps in enumerate(seg.fields):
            if seg.tag == "MSH" and i == 0:
                if comps != [ENCODING_CHARS]:
                    raise EncodingNotSupported(f"MSH-2 must be {ENCODING_CHARS!r}")
                parts.append(ENCODING_CHARS)
                continue
            parts.append("^".join(_check_component(c) for c in comps))
        out.append("|".join(parts) + "\r")
    return "".join(out)


# -- events -------------------------------------------------------------------

ADMIT = "ADT^A01"
DISCHARGE = "ADT^A03"
OBSERVATION = "ORU^R01"
SUPPORTED_TYPES = (ADMIT, DISCHARGE, OBSERVATION)


def _system(name: str, seg: Segment) -> str:
    if name.upper() not in CodeSystem.__members__:
        raise BadSegment(f"{seg.tag}: unknown code system {name!r}")
    return name.upper()


def _coded(seg: Segment, n: int) -> tuple[str, str, str]:
    """``code^text^system`` field to ``(system, code, display)``."""
    code, text, system = seg.get(n, 0), seg.get(n, 1), seg.get(n, 2)
    if not code:
        raise BadSegment(f"{seg.tag}-{n}: empty code")
    return _system(system, seg), code, text


def to_events(m: Hl7LiteMessage, source_id: str, received_at: int | None = None) -> list:
    """Map a message to clinical events, in segment order.

    ``received_at`` defaults to the message timestamp.
    """
    from .record_store import ClinicalEvent  # the store owns the event type

    mtype = m.message_type
    if mtype not in SUPPORTED_TYPES:
        raise UnsupportedMessageType(f"message type {mtype!r} is not supported")
    pid = m.pid
    try:
        sn = parse_sn(pid.get(2))
    except IdentityError as exc:
        raise BadSegment(f"PID-2: {exc}") from None
    effective = m.timestamp
    received = effective if received_at is None else received_at
    cid = m.control_id

    def event(idx: int, kind: str, code=None, text: str = "", value=None):
        return ClinicalEvent(event_id=f"{cid}/{idx}", patient_sn=sn, source_id=source_id,
                             kind=kind, code=code, text=text, value=value,
                             effective_at=effective, received_at=received)

    events = []
    if mtype == ADMIT:
        events.append(event(0, "admit", text=f"admitted at {m.sending_facility}"))
    for idx, seg in enumerate(m.segments):
        if seg.tag == "AL1":
            events.append(event(idx, "allergy", _coded(seg, 3),
                                text=" ".join(x for x in (seg.get(2), seg.get(4)) if x)))
        elif seg.tag == "RXE":
            events.append(event(idx, "medication", _coded(seg, 2),
                                text=" ".join(x for x in (seg.get(3), seg.get(4)) if x)))
        elif seg.tag == "DG1":
            code, display = seg.get(3, 0), seg.get(3, 1)
            if not code:
                raise BadSegment("DG1-3: empty code")
            events.append(event(idx, "diagnosis", (_system(seg.get(2), seg), code, display)))
        elif seg.tag == "OBX":
            if seg.get(6):
                parse_timestamp(seg.get(6))
            events.append(event(idx, "observation", _coded(seg, 3),
                                text=seg.get(5), value=seg.get(4)))
    if mtype == DISCHARGE:
        narrative = "\n".join("|".join("^".join(c) for c in s.fields)
                              for s in m.segments if s.tag == "TXT")
        events.append(event(0, "discharge", text=narrative))
    return events
