"""Source agents: pull HL7-lite messages from spool directories into the store."""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

from . import tag_codec
from .errors import SimopacError
from .hl7lite import Hl7Error, parse_message, to_events
from .record_store import (AppendOutcome, ClinicalEvent, DischargeSummary, InvalidEvent, RecordStore,
                           check_event)
from .tag_codec import CipPayload, TagProfile
from .templates import TemplateRegistry, VerdictKind, validate_values
from .terminology import Terminology, TranslationOutcome

log = logging.getLogger(__name__)

# diagnoses and medications are canonicalized; observations keep their source system
CANONICAL_SYSTEM = {"diagnosis": "ICD10", "medication": "NDL"}


class SpoolUnreadable(SimopacError):
    pass


class ValidationFailed(SimopacError, ValueError):
    def __init__(self, report) -> None:
        super().__init__("; ".join(str(v) for v in report.verdicts))
        self.report = report


class MissingRequired(ValidationFailed):
    pass


@dataclass(frozen=True)
class SourceAgent:
    source_id: str
    spool_dir: Path
    archive_dir: Path
    poll_interval: float = 5.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "spool_dir", Path(self.spool_dir))
        object.__setattr__(self, "archive_dir", Path(self.archive_dir))
        if self.spool_dir.resolve() == self.archive_dir.resolve():
            raise ValueError(f"agent {self.source_id}: spool and archive dirs must differ")


def load_agents(path) -> list[SourceAgent]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    base = Path(path).parent
    agents = []
    for rec in doc:
        agents.append(SourceAgent(
            source_id=rec["source_id"],
            spool_dir=base / rec["spool_dir"],
            archive_dir=base / rec["archive_dir"],
            poll_interval=float(rec.get("poll_interval", 5.0)),
        ))
    ids = [a.source_id for a in agents]
    if len(set(ids)) != len(ids):
        raise ValueError("source_id values must be unique")
    return agents


@dataclass
class IngestReport:
    messages_seen: int = 0
    parsed_ok: int = 0
    events_appended: int = 0
    duplicates: int = 0
    translation_misses: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)

    def merge(self, other: "IngestReport") -> "IngestReport":
        return IngestReport(
            self.messages_seen + other.messages_seen,
            self.parsed_ok + other.parsed_ok,
            self.events_appended + other.events_appended,
            self.duplicates + other.duplicates,
            self.translation_misses + other.translation_misses,
            self.errors + other.errors,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["errors"] = [{"message": name, "error": err} for name, err in self.errors]
        return d


def poll_source(agent: SourceAgent) -> list[tuple[str, str]]:
    """Spool contents as ``(text, file name)`` pairs in file-name order. Nothing is removed."""
    try:
        names = sorted(p.name for p in agent.spool_dir.iterdir() if p.is_file() and p.suffix == ".hl7")
        return [((agent.spool_dir / n).read_text(encoding="utf-8"), n) for n in names]
    except (OSError, UnicodeDecodeError) as exc:
        raise SpoolUnreadable(f"cannot read spool {agent.spool_dir}: {exc}") from exc


class AggregationEngine:
    def __init__(self, store: RecordStore, terminology: Terminology, templates: TemplateRegistry,
                 clock=time.time) -> None:
        self.store = store
        self.terminology = terminology
        self.templates = templates
        self.clock = clock

    def canonicalize(self, e: ClinicalEvent) -> tuple[ClinicalEvent, bool]:
        """Translate the event code to its canonical system. Returns ``(event, missed)``."""
        target = CANONICAL_SYSTEM.get(e.kind)
        if target is None or e.code is None or e.code[0] == target:
            return e, False
        system, code, display = e.code
        result = self.terminology.translate(system, code, target)
        original = f"{system}:{code}" + (f" {display}" if display else "")
        if result.outcome is TranslationOutcome.TRANSLATED:
            c = result.concept
            note = f"[from {original}; {result.relation.value}]"
            return replace(e, code=(c.system.name, c.code, c.display),
                           text=f"{e.text} {note}".strip()), False
        note = f"[untranslated {original}; {result.outcome.value}]"
        return replace(e, text=f"{e.text} {note}".strip()), True

    def ingest(self, agent: SourceAgent | str, messages: Iterable[tuple[str, str | None]]) -> IngestReport:
        """Parse, canonicalize and store each message.

        A bad message is recorded in the report and does not affect the others.
        Files whose every event was stored (or already present) are moved to the
        agent's archive directory. StorageFailure propagates.
        """
        source_id = agent if isinstance(agent, str) else agent.source_id
        report = IngestReport()
        for text, name in messages:
            label = name or "<body>"
            report.messages_seen += 1
            try:
                msg = parse_message(text)
                events = [self.canonicalize(e) for e in
                          to_events(msg, source_id, received_at=int(self.clock()))]
                for e, _ in events:
                    check_event(e)
            except (Hl7Error, InvalidEvent) as exc:
                report.errors.append((label, f"{type(exc).__name__}: {exc}"))
                continue
            report.parsed_ok += 1
            for e, missed in events:
                report.translation_misses += missed
                if e.kind == "discharge":
                    summary = DischargeSummary(e.patient_sn, e.source_id, e.text, e.effective_at, e.event_id)
                    outcome = self.store.record_discharge(summary, e)
                else:
                    outcome = self.store.append_event(e)
                if outcome is AppendOutcome.APPENDED:
                    report.events_appended += 1
                else:
                    report.duplicates += 1
            if name is not None and not isinstance(agent, str):
                self._archive(agent, name)
        return report

    def _archive(self, agent: SourceAgent, name: str) -> None:
        agent.archive_dir.mkdir(parents=True, exist_ok=True)
        shutil.move(str(agent.spool_dir / name), str(agent.archive_dir / name))

    def run_once(self, agent: SourceAgent) -> IngestReport:
        return self.ingest(agent, poll_source(agent))

    def run(self, agents: list[SourceAgent], once: bool = False, stop=None) -> IngestReport:
        total = IngestReport()
        while True:
            for agent in agents:
                r = self.run_once(agent)
                if r.messages_seen:
                    log.info("%s: %d seen, %d appended, %d duplicates, %d errors", agent.source_id,
                             r.messages_seen, r.events_appended, r.duplicates, len(r.errors))
                total = total.merge(r)
            if once or (stop is not None and stop.is_set()):
                return total
            interval = min(a.poll_interval for a in agents) if agents else 1.0
            if stop is not None:
                if stop.wait(interval):
                    return total
            else:
                time.sleep(interval)

    def refresh_tag_payload(self, patient_sn: bytes, template_ref: tuple[int, int], profile: TagProfile,
                            key: bytes | None, emr_uri: str, now: int) -> tuple[bytes, list[int]]:
        """Build, validate, fit, encode and seal a tag image from the patient's chart.

        Returns ``(image, dropped_field_ids)``; unsealed when ``key`` is None.
        """
        template = self.templates.get(*template_ref)
        fields = self.store.build_cip_fields(patient_sn, template, now)
        report = validate_values(template, fields)
        if not report.valid:
            if report.of(VerdictKind.MISSING_REQUIRED):
                raise MissingRequired(report)
            raise ValidationFailed(report)
        payload = CipPayload(patient_sn, emr_uri, template.template_id, template.version, int(now),
                             tuple(fields), mac_present=key is not None)
        payload, dropped = tag_codec.fit_to_budget(payload, template, profile)
        image = tag_codec.encode(replace(payload, mac_present=False))
        if key is not None:
            image = tag_codec.seal(image, key)
        return image, dropped
