"""Scripted two-hospital scenario behind ``simopac demo run``.

hospital-a admits a patient and records labs, writes the patient's tag, an
ambulance crew triages the tag offline, hospital-a transfers a discharge
summary, and a physician at hospital-b resolves the tag's SN@URI, follows the
referral to hospital-a and sees the discharge narrative.
"""

from __future__ import annotations

import calendar
import datetime as dt
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

from . import tag_codec
from .access_control import Principal, hash_password, load_principals, save_principals
from .aggregation import SourceAgent
from .client import ApiError, Client, NetworkError
from .offline import run_offline
from .service import NodeConfig, ServiceHandle, serve

PATIENT_SN = "04A1B2C3D4E5F607"
SCENARIO_NOW = calendar.timegm(dt.datetime(2024, 3, 1, 12, 0, 0).timetuple())
TAG_KEY = "hex:" + "5a" * 32
PASSWORD = "demo-password"
NARRATIVE = "Discharged home. T2DM controlled on metformin; follow up with GP in 2 weeks."

ADMIT = (
    "MSH|^~\\&|ADT|HOSP-A|SIMOPAC|CENTRAL|20240226083000||ADT^A01|A-ADM-0001\r"
    f"PID|1|{PATIENT_SN}|POPESCU^ION|19800501|M\r"
    "AL1|1|DA|PEN^Penicillin^LOCAL|SV\r"
    "AL1|2|FA|NUT^Peanut^LOCAL|MO\r"
    "RXE|1|MET500^Metformin 500 mg^LOCAL|500|mg\r"
    "DG1|1|ICD9|250.00^Diabetes type II\r"
)
LABS = (
    "MSH|^~\\&|LAB|HOSP-A|SIMOPAC|CENTRAL|20240226101500||ORU^R01|A-LAB-0001\r"
    f"PID|1|{PATIENT_SN}|POPESCU^ION|19800501|M\r"
    "OBX|1|CE|BT^BloodType^LOCAL|O+||20240226101000\r"
    "OBX|2|BL|OD^OrganDonor^LOCAL|Y||20240226101000\r"
    "OBX|3|NM|HR^HeartRate^LOCAL|88|bpm|20240226101000\r"
)
DISCHARGE = (
    "MSH|^~\\&|ADT|HOSP-A|SIMOPAC|CENTRAL|20240229160000||ADT^A03|A-DIS-0001\r"
    f"PID|1|{PATIENT_SN}|POPESCU^ION|19800501|M\r"
    f"TXT|{NARRATIVE}\r"
)

USERS = {
    "hospital-a": [("dr_a", "physician"), ("agent_a", "agent"), ("admin_a", "admin"), ("dr_b", "physician")],
    "hospital-b": [("dr_b", "physician")],
}


@dataclass
class Step:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class DemoResult:
    steps: list[Step] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.steps)


class _StepFailed(Exception):
    pass


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise _StepFailed(message)


def _prepare_node(root: Path, realm: str) -> NodeConfig:
    node_dir = root / realm
    (node_dir / "spool").mkdir(parents=True, exist_ok=True)
    principals_path = node_dir / "principals.json"
    existing = load_principals(principals_path) if principals_path.exists() else {}
    for username, role in USERS[realm]:
        if username not in existing:
            existing[username] = Principal(username, role, hash_password(PASSWORD))
    save_principals(principals_path, existing.values())
    return NodeConfig(realm=realm, data_dir=node_dir / "data", principals=principals_path,
                      registry=root / "registry.tsv", tag_key=TAG_KEY)


def run_demo(workdir: Path, *, stop_node_a_before_triage: bool = False,
             out: TextIO = sys.stdout) -> DemoResult:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    result = DemoResult()
    started = time.monotonic()
    nodes: dict[str, ServiceHandle] = {}
    state: dict = {}

    def step(name: str, fn: Callable[[], str]) -> None:
        try:
            detail = fn() or ""
            result.steps.append(Step(name, True, detail))
        except (_StepFailed, ApiError, NetworkError, OSError, tag_codec.CodecError) as exc:
            result.steps.append(Step(name, False, f"{type(exc).__name__}: {exc}"))
        s = result.steps[-1]
        print(f"[{'PASS' if s.ok else 'FAIL'}] {s.name}" + (f" - {s.detail}" if s.detail else ""),
              file=out, flush=True)

    def start_nodes() -> str:
        for realm in ("hospital-a", "hospital-b"):
            nodes[realm] = serve(_prepare_node(workdir, realm))
        (workdir / "registry.tsv").write_text(
            "".join(f"{realm}\t{h.address}\n" for realm, h in nodes.items()), encoding="utf-8")
        for h in nodes.values():
            _check(Client(h.url).health()["status"] == "ok", "health check failed")
        return ", ".join(f"{r} at {h.address}" for r, h in nodes.items())

    def ingest_admission() -> str:
        node = nodes["hospital-a"].node
        spool = workdir / "hospital-a" / "spool"
        for name, text in (("001-admit.hl7", ADMIT), ("002-labs.hl7", LABS)):
            (spool / name).write_text(text, encoding="utf-8")
        agent = SourceAgent("HOSP-A-ADT", spool, workdir / "hospital-a" / "archive", 1.0)
        report = node.engine.run_once(agent)
        _check(not report.errors, f"ingest errors: {report.errors}")
        _check(report.parsed_ok == 2, f"expected 2 messages, parsed {report.parsed_ok}")
        return (f"{report.events_appended} events appended, {report.duplicates} duplicates, "
                f"{report.translation_misses} translation misses")

    def refresh_tag() -> str:
        c = Client(nodes["hospital-a"].url)
        c.login("dr_a", PASSWORD)
        doc = c.tag(PATIENT_SN, profile="TAG-2K", now=SCENARIO_NOW)
        image = bytes.fromhex(doc["image_hex"])
        _check(len(image) <= 256, f"tag is {len(image)} bytes")
        _check(tag_codec.verify_seal(image, bytes.fromhex(TAG_KEY[4:])), "seal does not verify")
        path = workdir / "patient.cip"
        path.write_bytes(image)
        state["tag"] = path
        state["sn_uri"] = f"{PATIENT_SN}@{tag_codec.decode(image).emr_uri}"
        return f"{len(image)} bytes written to {path.name}, sealed"

    def offline_triage() -> str:
        _check("tag" in state, "no tag image from the refresh step")
        proc = run_offline(["triage", str(state["tag"]), "--key", TAG_KEY,
                            "--now", str(SCENARIO_NOW), "--format", "json"])
        _check(proc.returncode == 0, f"triage exited {proc.returncode}: {proc.stderr.strip()}")
        view = json.loads(proc.stdout)
        labels = [f["label"] for f in view["fields"]]
        _check(labels[:1] == ["blood_type"], f"blood type not first: {labels}")
        _check("allergy" in labels, "allergies missing")
        _check(view["seal_status"] == "verified", f"seal {view['seal_status']}")
        return f"{len(labels)} fields rendered with sockets denied; seal verified"

    def discharge() -> str:
        c = Client(nodes["hospital-a"].url, timeout=2.0)
        c.login("agent_a", PASSWORD)
        report = c.ingest(DISCHARGE, source="HOSP-A-ADT")
        _check(not report["errors"], f"ingest errors: {report['errors']}")
        return "discharge summary transferred" + (" (already present)" if report["duplicates"] else "")

    def resolve_via_b() -> str:
        _check("sn_uri" in state, "no SN@URI from the tag")
        b = Client(nodes["hospital-b"].url, timeout=2.0)
        b.login("dr_b", PASSWORD)
        status, body = b.resolve(state["sn_uri"])
        _check(status == 307 and body.get("kind") == "referral", f"expected referral, got {status}")
        owner = Client(body["address"], timeout=2.0)
        try:
            owner.login("dr_b", PASSWORD)
            status, body = owner.resolve(state["sn_uri"])
        except NetworkError as exc:
            raise _StepFailed(f"referral target {body['address']} ({body['realm']}) unreachable: {exc}")
        _check(status == 200 and body["kind"] == "chart", "owning node did not return a chart")
        narratives = [e["text"] for evs in body["chart"]["sections"].values() for e in evs
                      if e["kind"] == "discharge"]
        _check(any(NARRATIVE in n for n in narratives), "discharge narrative missing from chart")
        digest = hashlib.sha256(json.dumps(body["chart"], sort_keys=True).encode()).hexdigest()
        state["digest"] = digest
        return f"referred to {body['realm']}; discharge narrative present"

    def idempotent() -> str:
        _check("digest" in state, "no chart to compare")
        marker = workdir / "chart.sha256"
        if marker.exists():
            previous = marker.read_text().strip()
            _check(previous == state["digest"], "chart changed on rerun")
            return "chart identical to the previous run"
        marker.write_text(state["digest"] + "\n")
        return "first run; chart digest recorded"

    try:
        step("start nodes hospital-a and hospital-b with realm registry", start_nodes)
        if len(nodes) == 2:
            step("hospital-a agent ingests admission and labs", ingest_admission)
            step("refresh patient tag at hospital-a (TAG-2K, sealed)", refresh_tag)
            if stop_node_a_before_triage:
                nodes["hospital-a"].shutdown()
                print("(hospital-a stopped)", file=out)
            step("ambulance triage from tag alone, network denied", offline_triage)
            step("hospital-a transfers discharge summary", discharge)
            step("hospital-b resolves SN@URI via referral to hospital-a", resolve_via_b)
            step("rerun leaves the chart unchanged", idempotent)
    finally:
        for h in nodes.values():
            h.shutdown()
    result.elapsed = time.monotonic() - started
    passed = sum(s.ok for s in result.steps)
    print(f"{passed}/{len(result.steps)} steps passed in {result.elapsed:.2f} s", file=out)
    return result

