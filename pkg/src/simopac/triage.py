"""Offline triage view of a tag image.

Built only from the image bytes and a local concept dictionary; nothing here
may import the store, the service or anything that opens a socket.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

from . import tag_codec
from .identity import SnUri, format_sn_uri
from .tag_codec import FieldKind, FieldValue
from .templates import EMERGENCY_1, Template, value_to_json
from .terminology import CodeSystem, Concept, load_concepts

STALE_AFTER_DAYS = 365
# shown first, in this order, when the template names them
PRIORITY_NAMES = ("blood_type", "allergy")


@dataclass
class TriageLine:
    field_id: int
    label: str
    value: str
    raw: object = None


@dataclass
class TriageView:
    sn: str
    emr_reference: str
    template: str
    updated_at: int
    staleness_days: float
    seal_status: str  # verified | unverified | absent
    lines: list[TriageLine] = field(default_factory=list)
    stale: bool = False

    def to_dict(self) -> dict:
        return {
            "sn": self.sn, "emr_reference": self.emr_reference, "template": self.template,
            "updated_at": dt.datetime.fromtimestamp(self.updated_at, dt.timezone.utc).isoformat()
            .replace("+00:00", "Z"),
            "staleness_days": round(self.staleness_days, 2), "stale": self.stale,
            "seal_status": self.seal_status,
            "fields": [{"field_id": ln.field_id, "label": ln.label, "value": ln.value, "raw": ln.raw}
                       for ln in self.lines],
        }

    def render(self) -> str:
        out = [
            f"SIMOPAC TRIAGE  SN {self.sn}",
            f"EMR reference   {self.emr_reference}",
            f"Template        {self.template}",
            f"Seal            {self.seal_status}",
            f"Updated         {self.to_dict()['updated_at']} ({self.staleness_days:.0f} days ago)",
        ]
        if self.stale:
            out.append(f"WARNING: tag data is stale ({self.staleness_days:.0f} days old); "
                       "confirm with the EMR when reachable")
        out.append("-" * 60)
        width = max((len(ln.label) for ln in self.lines), default=0)
        out += [f"{ln.label.upper() if ln.label in PRIORITY_NAMES else ln.label:<{width}}  {ln.value}"
                for ln in self.lines]
        if not self.lines:
            out.append("(no fields on tag)")
        return "\n".join(out)


def _render_value(fv: FieldValue, dictionary: dict[tuple[CodeSystem, str], Concept]) -> str:
    if fv.kind is FieldKind.CODE:
        system, code = fv.value
        try:
            sys_ = CodeSystem(system)
        except ValueError:
            return f"{code} (system 0x{system:02X})"
        concept = dictionary.get((sys_, code))
        return f"{code} {concept.display} [{sys_.name}]" if concept else f"{code} [{sys_.name}]"
    if fv.kind is FieldKind.BOOLEAN:
        return "yes" if fv.value else "no"
    if fv.kind is FieldKind.DATE:
        return fv.value.isoformat()
    if fv.kind is FieldKind.QUANTITY:
        return f"{fv.value.value:g} {fv.value.unit}".strip()
    return str(fv.value)


def build_triage_view(image: bytes, *, key: bytes | None = None,
                      dictionary: dict[tuple[CodeSystem, str], Concept] | None = None,
                      templates: dict[tuple[int, int], Template] | None = None,
                      now: int, stale_after_days: int = STALE_AFTER_DAYS) -> TriageView:
    payload = tag_codec.decode(image)
    if not payload.mac_present:
        seal = "absent"
    elif key is None:
        seal = "unverified"
    else:
        seal = "verified" if tag_codec.verify_seal(image, key) else "unverified"
    known = {EMERGENCY_1.ref: EMERGENCY_1, **(templates or {})}
    template = known.get((payload.template_id, payload.template_version))
    names = {f.field_id: f.name for f in template.fields} if template else {}
    priority = {f.field_id: i for i, f in enumerate(template.fields)} if template else {}

    def order(item):
        pos, fv = item
        name = names.get(fv.field_id)
        first = PRIORITY_NAMES.index(name) if name in PRIORITY_NAMES else len(PRIORITY_NAMES)
        return (first, priority.get(fv.field_id, 1 << 16), pos)

    lines = []
    for _, fv in sorted(enumerate(payload.fields), key=order):
        lines.append(TriageLine(fv.field_id, names.get(fv.field_id, f"field {fv.field_id}"),
                                _render_value(fv, dictionary or {}), value_to_json(fv.kind, fv.value)))
    age = (now - payload.updated_at) / 86400
    label = template.name if template else f"{payload.template_id} v{payload.template_version}"
    return TriageView(
        sn=payload.sn.hex().upper(),
        emr_reference=format_sn_uri(SnUri(payload.sn, payload.emr_uri)),
        template=label, updated_at=payload.updated_at, staleness_days=age,
        seal_status=seal, lines=lines, stale=age > stale_after_days,
    )


def load_dictionary(path) -> dict[tuple[CodeSystem, str], Concept]:
    return load_concepts(path)
