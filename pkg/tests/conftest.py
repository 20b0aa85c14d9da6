from __future__ import annotations

import datetime as dt
import pytest

from simopac.record_store import RecordStore
from simopac.tag_codec import CipPayload, Code, FieldKind, FieldValue
from simopac.templates import EMERGENCY_1, TemplateRegistry
from simopac.terminology import DATA_DIR, load_default

HL7_DIR = DATA_DIR / "hl7"
SN = bytes.fromhex("04A1B2C3D4E5F607")

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda n: int(n.split()[0][2:])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" - {detail}" if detail else ""))


@pytest.fixture(scope="session")
def terminology():
    return load_default()


@pytest.fixture
def store(tmp_path):
    with RecordStore(tmp_path / "store", fsync=False) as s:
        yield s


@pytest.fixture
def registry():
    return TemplateRegistry()


@pytest.fixture
def emergency():
    return EMERGENCY_1


@pytest.fixture
def corpus() -> list[tuple[str, str]]:
    return [(p.name, p.read_bytes().decode("utf-8")) for p in sorted(HL7_DIR.glob("*.hl7"))]


def emergency_fields(allergies=("PEN",), meds=("D01",), diagnoses=("E11.9",), note=None):
    fields = [FieldValue(1, FieldKind.CODE, Code(1, "O+"))]
    fields += [FieldValue(2, FieldKind.CODE, Code(1, a)) for a in allergies]
    fields += [FieldValue(3, FieldKind.CODE, Code(4, m)) for m in meds]
    fields += [FieldValue(4, FieldKind.CODE, Code(3, d)) for d in diagnoses]
    fields += [FieldValue(5, FieldKind.DATE, dt.date(2024, 2, 29)),
               FieldValue(6, FieldKind.BOOLEAN, True)]
    if note is not None:
        fields.append(FieldValue(7, FieldKind.TEXT, note))
    return fields


def emergency_payload(uri="simopac://hosp-a/emr", mac=False, **kw) -> CipPayload:
    return CipPayload(SN, uri, 1, 1, 1_709_294_400, tuple(emergency_fields(**kw)), mac_present=mac)
