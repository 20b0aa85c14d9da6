"""Physician-defined templates that decide what goes onto a CIP."""

from __future__ import annotations

import datetime as dt
import json
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import NotFound, SimopacError
from .tag_codec import Code, CodecError, FieldKind, FieldValue, Quantity, encode_value
from .terminology import CodeSystem


class TemplateError(SimopacError, ValueError):
    pass


class InvalidTemplate(TemplateError):
    pass


class DuplicateTemplateVersion(TemplateError):
    pass


@dataclass(frozen=True)
class TemplateField:
    field_id: int
    name: str
    kind: FieldKind
    required: bool = False
    priority: int = 5
    max_len: int = 64
    repeatable: bool = False
    code_system: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FieldKind(self.kind))


@dataclass(frozen=True)
class Template:
    template_id: int
    version: int
    name: str
    fields: tuple[TemplateField, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))

    def field(self, field_id: int) -> TemplateField:
        for f in self.fields:
            if f.field_id == field_id:
                return f
        raise KeyError(field_id)

    def by_name(self, name: str) -> TemplateField | None:
        return next((f for f in self.fields if f.name == name), None)

    @property
    def ref(self) -> tuple[int, int]:
        return self.template_id, self.version


def check_template(t: Template) -> None:
    if not 0 <= t.template_id <= 0xFFFF or not 0 <= t.version <= 0xFF:
        raise InvalidTemplate("template id/version out of range")
    if not t.name:
        raise InvalidTemplate("template name is empty")
    seen: set[int] = set()
    for f in t.fields:
        if f.field_id in seen:
            raise InvalidTemplate(f"field_id {f.field_id} appears twice")
        seen.add(f.field_id)
        if not 0 <= f.field_id <= 0xFFFF:
            raise InvalidTemplate(f"field_id {f.field_id} out of range")
        if not 1 <= f.max_len <= 0xFFFF:
            raise InvalidTemplate(f"field {f.name}: max_len must be in [1, 65535]")
        if not 1 <= f.priority <= 0xFF:
            raise InvalidTemplate(f"field {f.name}: priority must be in [1, 255]")
        if f.kind is FieldKind.CODE and f.code_system is None:
            raise InvalidTemplate(f"code field {f.name} needs a code_system")


# -- JSON form ----------------------------------------------------------------

def template_to_dict(t: Template) -> dict:
    d = asdict(t)
    d["fields"] = [dict(asdict(f), kind=f.kind.name.lower()) for f in t.fields]
    return d


def template_from_dict(d: dict) -> Template:
    try:
        fields = []
        for fd in d["fields"]:
            fd = dict(fd)
            kind = fd.pop("kind")
            fd["kind"] = FieldKind[kind.upper()] if isinstance(kind, str) else FieldKind(kind)
            cs = fd.get("code_system")
            if isinstance(cs, str):
                fd["code_system"] = int(CodeSystem[cs.upper()])
            fields.append(TemplateField(**fd))
        return Template(int(d["template_id"]), int(d["version"]), d["name"], tuple(fields))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidTemplate(f"bad template document: {exc}") from exc


def load_template_file(path) -> Template:
    with open(path, encoding="utf-8") as fh:
        return template_from_dict(json.load(fh))


EMERGENCY_1 = Template(1, 1, "EMERGENCY-1", (
    TemplateField(1, "blood_type", FieldKind.CODE, required=True, priority=1, max_len=8,
                  code_system=CodeSystem.LOCAL),
    TemplateField(2, "allergy", FieldKind.CODE, priority=1, max_len=32, repeatable=True,
                  code_system=CodeSystem.LOCAL),
    TemplateField(3, "active_medication", FieldKind.CODE, priority=2, max_len=32, repeatable=True,
                  code_system=CodeSystem.NDL),
    TemplateField(4, "major_diagnosis", FieldKind.CODE, priority=2, max_len=16, repeatable=True,
                  code_system=CodeSystem.ICD10),
    TemplateField(5, "last_encounter_date", FieldKind.DATE, priority=3, max_len=4),
    TemplateField(6, "organ_donor", FieldKind.BOOLEAN, priority=3, max_len=1),
    TemplateField(7, "free_text_note", FieldKind.TEXT, priority=9, max_len=512),
))


# -- validation ---------------------------------------------------------------

class VerdictKind(str, Enum):
    UNKNOWN_FIELD = "UnknownField"
    KIND_MISMATCH = "KindMismatch"
    TOO_LONG = "TooLong"
    MISSING_REQUIRED = "MissingRequired"
    DUPLICATE_NON_REPEATABLE = "DuplicateNonRepeatable"


@dataclass(frozen=True)
class FieldVerdict:
    kind: VerdictKind
    field_id: int
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value}({self.field_id})" + (f": {self.detail}" if self.detail else "")


@dataclass
class ValidationReport:
    verdicts: list[FieldVerdict] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.verdicts

    def of(self, kind: VerdictKind) -> list[FieldVerdict]:
        return [v for v in self.verdicts if v.kind is kind]


def validate_values(t: Template, values: Iterable[FieldValue]) -> ValidationReport:
    report = ValidationReport()
    by_id = {f.field_id: f for f in t.fields}
    counts: dict[int, int] = {}
    for fv in values:
        spec = by_id.get(fv.field_id)
        if spec is None:
            report.verdicts.append(FieldVerdict(VerdictKind.UNKNOWN_FIELD, fv.field_id))
            continue
        counts[fv.field_id] = counts.get(fv.field_id, 0) + 1
        if counts[fv.field_id] == 2 and not spec.repeatable:
            report.verdicts.append(FieldVerdict(VerdictKind.DUPLICATE_NON_REPEATABLE, fv.field_id))
        if fv.kind is not spec.kind:
            report.verdicts.append(FieldVerdict(
                VerdictKind.KIND_MISMATCH, fv.field_id, f"expected {spec.kind.name.lower()}"))
            continue
        try:
            size = len(encode_value(fv.kind, fv.value))
        except CodecError as exc:
            report.verdicts.append(FieldVerdict(VerdictKind.KIND_MISMATCH, fv.field_id, str(exc)))
            continue
        if size > spec.max_len:
            report.verdicts.append(FieldVerdict(
                VerdictKind.TOO_LONG, fv.field_id, f"{size} > {spec.max_len} bytes"))
    for f in t.fields:
        if f.required and f.field_id not in counts:
            report.verdicts.append(FieldVerdict(VerdictKind.MISSING_REQUIRED, f.field_id, f.name))
    return report


def packing_order(t: Template) -> list[TemplateField]:
    return sorted(t.fields, key=lambda f: (f.priority, f.field_id))


# -- registry -----------------------------------------------------------------

@dataclass(frozen=True)
class Receipt:
    template_id: int
    version: int
    name: str


class TemplateRegistry:
    """Versioned template store.

    With a ``store`` the registry writes each registration to the record
    store's metadata log and reloads them on construction.
    """

    def __init__(self, store=None, builtins: Sequence[Template] = (EMERGENCY_1,)) -> None:
        self._lock = threading.Lock()
        self._templates: dict[tuple[int, int], Template] = {}
        self._store = store
        for t in builtins:
            self._templates[t.ref] = t
        if store is not None:
            for rec in store.meta_records("template"):
                t = template_from_dict(rec["template"])
                self._templates.setdefault(t.ref, t)

    def register(self, t: Template) -> Receipt:
        check_template(t)
        with self._lock:
            existing = self._templates.get(t.ref)
            if existing is not None:
                raise DuplicateTemplateVersion(f"template {t.template_id} v{t.version} exists")
            if self._store is not None:
                self._store.append_meta("template", {"template": template_to_dict(t)})
            self._templates[t.ref] = t
        return Receipt(t.template_id, t.version, t.name)

    def get(self, template_id: int, version: int) -> Template:
        try:
            return self._templates[(template_id, version)]
        except KeyError:
            raise NotFound(f"template {template_id} v{version} not registered") from None

    def load_dir(self, path) -> list[Receipt]:
        """Register every ``*.json`` template in ``path`` not already present."""
        receipts = []
        for p in sorted(Path(path).glob("*.json")):
            t = load_template_file(p)
            if t.ref not in self._templates:
                receipts.append(self.register(t))
        return receipts

    def __iter__(self):
        return iter(sorted(self._templates.values(), key=lambda t: t.ref))


def register_template(registry: TemplateRegistry, t: Template) -> Receipt:
    return registry.register(t)


def get_template(registry: TemplateRegistry, template_id: int, version: int) -> Template:
    return registry.get(template_id, version)


# -- summary JSON (field values named per template) -----------------------------

def value_to_json(kind: FieldKind, value):
    if kind is FieldKind.CODE:
        system = value.system
        name = CodeSystem(system).name if system in CodeSystem._value2member_map_ else system
        return {"system": name, "code": value.code}
    if kind is FieldKind.DATE:
        return value.isoformat()
    if kind is FieldKind.QUANTITY:
        return {"value": value.value, "unit": value.unit}
    return value


def value_from_json(kind: FieldKind, data):
    if kind is FieldKind.CODE:
        system = data["system"]
        system = int(CodeSystem[system.upper()]) if isinstance(system, str) else int(system)
        return Code(system, data["code"])
    if kind is FieldKind.DATE:
        return dt.date.fromisoformat(data)
    if kind is FieldKind.QUANTITY:
        return Quantity(float(data["value"]), data["unit"])
    return data


def fields_to_json(t: Template, fields: Iterable[FieldValue]) -> list[dict]:
    names = {f.field_id: f.name for f in t.fields}
    return [{"field_id": fv.field_id, "name": names.get(fv.field_id, f"field_{fv.field_id}"),
             "kind": fv.kind.name.lower(), "value": value_to_json(fv.kind, fv.value)}
            for fv in fields]


def fields_from_json(t: Template, items: Iterable[dict]) -> list[FieldValue]:
    """Inverse of :func:`fields_to_json`; ``field_id`` or ``name`` identifies the field."""
    out = []
    for item in items:
        try:
            if "field_id" in item:
                fid = int(item["field_id"])
            else:
                spec = t.by_name(item["name"])
                if spec is None:
                    raise InvalidTemplate(f"template has no field named {item['name']!r}")
                fid = spec.field_id
            kind = FieldKind[item["kind"].upper()] if "kind" in item else t.field(fid).kind
            out.append(FieldValue(fid, kind, value_from_json(kind, item["value"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidTemplate(f"bad field value {item!r}: {exc}") from exc
    return out
