"""Event-sourced clinical record store.

Events live in an append-only newline-delimited JSON log (``events.jsonl``).
Every append is flushed and fsynced before the call returns; that fsync is the
durability boundary. ``snapshot()`` writes ``snapshot.json`` (all records up to
a log byte offset) so startup only replays the log tail. A torn final line left
by a crash is ignored on replay and cut off before the next append.

Appends are serialized by a thread lock plus an advisory file lock, so an
agent process and a server process may share one data directory.
"""

from __future__ import annotations

import datetime as dt
import fcntl
import json
import os
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import SimopacError, StorageFailure
from .identity import format_sn, parse_sn
from .tag_codec import Code, FieldKind, FieldValue, encode_value
from .templates import Template, packing_order
from .terminology import CodeSystem

EVENT_KINDS = ("allergy", "medication", "diagnosis", "observation", "admit", "discharge")
MAX_CLOCK_SKEW = 24 * 3600
MEDICATION_WINDOW_DAYS = 180
BLOOD_TYPE_CODE = ("LOCAL", "BT")
ORGAN_DONOR_CODE = ("LOCAL", "OD")


class InvalidEvent(SimopacError, ValueError):
    pass


class DischargeWithoutEvent(SimopacError, ValueError):
    pass


class AppendOutcome(str, Enum):
    APPENDED = "Appended"
    DUPLICATE_IGNORED = "DuplicateIgnored"


@dataclass(frozen=True)
class ClinicalEvent:
    event_id: str
    patient_sn: bytes
    source_id: str
    kind: str
    effective_at: int
    received_at: int
    code: tuple[str, str, str] | None = None  # (system name, code, display)
    text: str = ""
    value: str | None = None

    def __post_init__(self) -> None:
        if self.code is not None:
            object.__setattr__(self, "code", tuple(self.code))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patient_sn"] = format_sn(self.patient_sn)
        d["code"] = None if self.code is None else dict(zip(("system", "code", "display"), self.code))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalEvent":
        code = d.get("code")
        return cls(
            event_id=d["event_id"], patient_sn=parse_sn(d["patient_sn"]), source_id=d["source_id"],
            kind=d["kind"], effective_at=int(d["effective_at"]), received_at=int(d["received_at"]),
            code=None if code is None else (code["system"], code["code"], code.get("display", "")),
            text=d.get("text", ""), value=d.get("value"))


def check_event(e: ClinicalEvent) -> None:
    if not e.event_id:
        raise InvalidEvent("event_id is empty")
    if len(e.patient_sn) != 8:
        raise InvalidEvent("patient_sn must be 8 bytes")
    if not e.source_id:
        raise InvalidEvent("source_id is empty")
    if e.kind not in EVENT_KINDS:
        raise InvalidEvent(f"unknown event kind {e.kind!r}")
    if e.effective_at > e.received_at + MAX_CLOCK_SKEW:
        raise InvalidEvent("effective_at is more than 24h after received_at")
    if e.code is not None and e.code[0] not in CodeSystem.__members__:
        raise InvalidEvent(f"unknown code system {e.code[0]!r}")


@dataclass(frozen=True)
class DischargeSummary:
    patient_sn: bytes
    source_id: str
    narrative: str
    discharged_at: int
    event_id: str

    def to_dict(self) -> dict:
        return dict(asdict(self), patient_sn=format_sn(self.patient_sn))

    @classmethod
    def from_dict(cls, d: dict) -> "DischargeSummary":
        return cls(parse_sn(d["patient_sn"]), d["source_id"], d["narrative"],
                   int(d["discharged_at"]), d["event_id"])


@dataclass
class PatientChart:
    patient_sn: bytes
    sections: dict[str, list[ClinicalEvent]] = field(default_factory=dict)

    def events(self) -> list[ClinicalEvent]:
        """All sections merged read-only, oldest first."""
        merged = [e for evs in self.sections.values() for e in evs]
        return sorted(merged, key=lambda e: (e.effective_at, e.source_id, e.event_id))

    def to_dict(self) -> dict:
        return {
            "patient_sn": format_sn(self.patient_sn),
            "sections": {src: [e.to_dict() for e in evs] for src, evs in sorted(self.sections.items())},
        }


class RecordStore:
    def __init__(self, data_dir, *, fsync: bool = True) -> None:
        self.dir = Path(data_dir)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            self.log_path = self.dir / "events.jsonl"
            self.snapshot_path = self.dir / "snapshot.json"
            self.meta_path = self.dir / "meta.jsonl"
            self.log_path.touch(exist_ok=True)
            self._lock_fh = open(self.dir / ".lock", "a+")
        except OSError as exc:
            raise StorageFailure(f"cannot open store at {self.dir}: {exc}") from exc
        self._fsync = fsync
        self._lock = threading.RLock()
        self._events: dict[str, ClinicalEvent] = {}
        self._by_patient: dict[bytes, list[str]] = {}
        self._summaries: dict[str, DischargeSummary] = {}
        self._offset = 0
        with self._locked():
            self._load_snapshot()
            self._catch_up()

    def close(self) -> None:
        self._lock_fh.close()

    def __enter__(self) -> "RecordStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- locking / replay ------------------------------------------------------

    @contextmanager
    def _locked(self) -> Iterator[None]:
        with self._lock:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(self._lock_fh, fcntl.LOCK_UN)

    def _apply(self, rec: dict) -> None:
        kind = rec.get("record")
        if kind == "event":
            self._index(ClinicalEvent.from_dict(rec["event"]))
        elif kind == "discharge_summary":
            if rec.get("event") is not None:
                self._index(ClinicalEvent.from_dict(rec["event"]))
            s = DischargeSummary.from_dict(rec["summary"])
            self._summaries.setdefault(s.event_id, s)
        else:
            raise StorageFailure(f"unknown log record type {kind!r}")

    def _index(self, e: ClinicalEvent) -> None:
        if e.event_id in self._events:
            return
        self._events[e.event_id] = e
        self._by_patient.setdefault(e.patient_sn, []).append(e.event_id)

    def _load_snapshot(self) -> None:
        if not self.snapshot_path.exists():
            return
        try:
            snap = json.loads(self.snapshot_path.read_text(encoding="utf-8"))
            if snap["log_offset"] > self.log_path.stat().st_size:
                return  # log was replaced; replay it from scratch
            for rec in snap["records"]:
                self._apply(rec)
            self._offset = snap["log_offset"]
        except (OSError, ValueError, KeyError) as exc:
            raise StorageFailure(f"unreadable snapshot: {exc}") from exc

    def _catch_up(self) -> None:
        """Apply complete log lines written since the last read (possibly by another process)."""
        try:
            size = self.log_path.stat().st_size
            if size <= self._offset:
                return
            with self.log_path.open("rb") as fh:
                fh.seek(self._offset)
                chunk = fh.read(size - self._offset)
        except OSError as exc:
            raise StorageFailure(f"cannot read event log: {exc}") from exc
        consumed = chunk.rfind(b"\n") + 1
        for line in chunk[:consumed].splitlines():
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise StorageFailure(f"corrupt event log line: {exc}") from exc
            self._apply(rec)
        self._offset += consumed

    def _write(self, rec: dict) -> None:
        line = (json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
        try:
            with self.log_path.open("r+b") as fh:
                # drop a torn tail from an earlier crash before appending
                fh.truncate(self._offset)
                fh.seek(self._offset)
                fh.write(line)
                fh.flush()
                if self._fsync:
                    os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageFailure(f"cannot append to event log: {exc}") from exc
        self._offset += len(line)
        self._apply(rec)

    # -- operations ------------------------------------------------------------

    def append_event(self, e: ClinicalEvent) -> AppendOutcome:
        check_event(e)
        with self._locked():
            self._catch_up()
            if e.event_id in self._events:
                return AppendOutcome.DUPLICATE_IGNORED
            self._write({"record": "event", "event": e.to_dict()})
        return AppendOutcome.APPENDED

    def record_discharge(self, s: DischargeSummary, event: ClinicalEvent | None = None) -> AppendOutcome:
        """Store a discharge summary, appending its discharge event in the same log line if needed."""
        with self._locked():
            self._catch_up()
            if s.event_id in self._summaries:
                return AppendOutcome.DUPLICATE_IGNORED
            linked = self._events.get(s.event_id)
            rec: dict = {"record": "discharge_summary", "summary": s.to_dict(), "event": None}
            if linked is None:
                if event is None or event.event_id != s.event_id:
                    raise DischargeWithoutEvent(f"no discharge event {s.event_id!r} to link")
                check_event(event)
                linked = event
                rec["event"] = event.to_dict()
            if linked.kind != "discharge":
                raise DischargeWithoutEvent(f"event {s.event_id!r} is a {linked.kind} event")
            if linked.patient_sn != s.patient_sn:
                raise DischargeWithoutEvent("summary and event belong to different patients")
            self._write(rec)
        return AppendOutcome.APPENDED

    def get_chart(self, patient_sn: bytes) -> PatientChart:
        with self._locked():
            self._catch_up()
            ids = list(self._by_patient.get(patient_sn, ()))
            events = [self._events[i] for i in ids]
            summaries = dict(self._summaries)
        chart = PatientChart(patient_sn)
        for e in events:
            s = summaries.get(e.event_id)
            if s is not None and e.kind == "discharge":
                e = replace(e, text=s.narrative)
            chart.sections.setdefault(e.source_id, []).append(e)
        for evs in chart.sections.values():
            evs.sort(key=lambda e: (e.effective_at, e.event_id))
        return chart

    def summaries(self, patient_sn: bytes) -> list[DischargeSummary]:
        with self._locked():
            self._catch_up()
            return sorted((s for s in self._summaries.values() if s.patient_sn == patient_sn),
                          key=lambda s: (s.discharged_at, s.event_id))

    def patients(self) -> list[bytes]:
        with self._locked():
            self._catch_up()
            return sorted(self._by_patient)

    def event_count(self) -> int:
        with self._locked():
            self._catch_up()
            return len(self._events)

    def build_cip_fields(self, patient_sn: bytes, template: Template, now: int,
                         medication_window_days: int = MEDICATION_WINDOW_DAYS) -> list[FieldValue]:
        return cip_fields_from_chart(self.get_chart(patient_sn), template, now, medication_window_days)

    def snapshot(self) -> Path:
        """Write all records applied so far, then atomically replace the snapshot file."""
        with self._locked():
            self._catch_up()
            records = []
            try:
                with self.log_path.open("rb") as fh:
                    data = fh.read(self._offset)
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            records = [json.loads(ln) for ln in data.splitlines() if ln.strip()]
            tmp = self.snapshot_path.with_suffix(".tmp")
            try:
                with tmp.open("w", encoding="utf-8") as fh:
                    json.dump({"log_offset": self._offset, "records": records}, fh, sort_keys=True)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.snapshot_path)
            except OSError as exc:
                raise StorageFailure(f"cannot write snapshot: {exc}") from exc
        return self.snapshot_path

    # -- metadata log (templates) ------------------------------------------------

    def append_meta(self, kind: str, payload: dict) -> None:
        line = json.dumps(dict(payload, kind=kind), sort_keys=True) + "\n"
        with self._locked():
            try:
                with self.meta_path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
                    if self._fsync:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageFailure(f"cannot append metadata: {exc}") from exc

    def meta_records(self, kind: str) -> list[dict]:
        if not self.meta_path.exists():
            return []
        out = []
        for line in self.meta_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec.get("kind") == kind:
                    out.append(rec)
        return out


# -- CIP synopsis -------------------------------------------------------------

def _to_code(code: tuple[str, str, str]) -> Code:
    return Code(int(CodeSystem[code[0]]), code[1])


def _distinct_codes(events: Iterable[ClinicalEvent]) -> list[Code]:
    seen: dict[tuple[str, str], None] = {}
    for e in events:
        if e.code is not None:
            seen.setdefault((e.code[0], e.code[1]), None)
    return [_to_code((s, c, "")) for s, c in seen]


def _latest_observation(events: list[ClinicalEvent], code: tuple[str, str]) -> ClinicalEvent | None:
    hits = [e for e in events if e.kind == "observation" and e.code is not None
            and (e.code[0], e.code[1]) == code and e.value]
    return hits[-1] if hits else None


_TRUE = {"Y", "YES", "TRUE", "1", "T"}
_FALSE = {"N", "NO", "FALSE", "0", "F"}


def cip_fields_from_chart(chart: PatientChart, template: Template, now: int,
                          medication_window_days: int = MEDICATION_WINDOW_DAYS) -> list[FieldValue]:
    """Select the CIP field values for ``template`` from a chart.

    Pure in ``(chart, template, now)``. Fields come out in packing order; values
    that would not validate against the template (wrong kind, too long) are skipped.
    """
    events = chart.events()
    window = medication_window_days * 86400
    candidates: dict[str, list] = {}

    bt = _latest_observation(events, BLOOD_TYPE_CODE)
    if bt is not None:
        candidates["blood_type"] = [Code(int(CodeSystem.LOCAL), bt.value)]
    candidates["allergy"] = _distinct_codes(e for e in events if e.kind == "allergy")
    candidates["active_medication"] = _distinct_codes(
        e for e in events if e.kind == "medication" and abs(now - e.effective_at) <= window)
    candidates["major_diagnosis"] = _distinct_codes(e for e in events if e.kind == "diagnosis")
    encounters = [e.effective_at for e in events if e.kind in ("admit", "discharge")]
    if encounters:
        candidates["last_encounter_date"] = [
            dt.datetime.fromtimestamp(max(encounters), dt.timezone.utc).date()]
    od = _latest_observation(events, ORGAN_DONOR_CODE)
    if od is not None and od.value.strip().upper() in _TRUE | _FALSE:
        candidates["organ_donor"] = [od.value.strip().upper() in _TRUE]

    out: list[FieldValue] = []
    for tf in packing_order(template):
        values = candidates.get(tf.name, [])
        if not tf.repeatable:
            values = values[:1]
        for v in values:
            fv = _as_field(tf, v)
            if fv is not None:
                out.append(fv)
    return out


def _as_field(tf, value) -> FieldValue | None:
    expected = {Code: FieldKind.CODE, dt.date: FieldKind.DATE, bool: FieldKind.BOOLEAN}
    kind = next((k for t, k in expected.items() if isinstance(value, t)), None)
    if kind is not tf.kind:
        return None
    try:
        if len(encode_value(kind, value)) > tf.max_len:
            return None
    except SimopacError:
        return None
    return FieldValue(tf.field_id, kind, value)
