import json

import pytest

from simopac import tag_codec
from simopac.cli import main
from simopac.offline import run_offline
from simopac.templates import EMERGENCY_1, fields_to_json, template_to_dict

from conftest import emergency_fields

KEY = "hex:" + "22" * 32
SN = "04A1B2C3D4E5F607"
URI = "simopac://hosp-a/emr"
NOW = "1709294400"


@pytest.fixture
def summary(tmp_path):
    p = tmp_path / "summary.json"
    p.write_text(json.dumps({"fields": fields_to_json(EMERGENCY_1, emergency_fields())}))
    return p


def write(tmp_path, summary, *extra):
    out = tmp_path / "tag.cip"
    code = main(["tag", "write", "--sn", SN, "--uri", URI, "--from", str(summary), "--out", str(out),
                 "--now", NOW, *extra])
    return code, out


def test_write_and_read(tmp_path, summary, capsys):
    code, out = write(tmp_path, summary, "--key", KEY, "--format", "json")
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["bytes"] == len(out.read_bytes()) and result["sealed"]
    assert main(["tag", "read", str(out), "--key", KEY, "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert (doc["sn"], doc["emr_uri"], doc["seal"]) == (SN, URI, "verified")
    assert doc["fields"][0]["value"] == {"system": "LOCAL", "code": "O+"}


def test_read_seal_states(tmp_path, summary, capsys):
    _, out = write(tmp_path, summary, "--key", KEY)
    capsys.readouterr()
    main(["tag", "read", str(out)])
    assert "not checked" in capsys.readouterr().out
    assert main(["tag", "read", str(out), "--key", "hex:" + "33" * 32]) == 0
    assert "unverified" in capsys.readouterr().out
    _, plain = write(tmp_path, summary)
    capsys.readouterr()
    main(["tag", "read", str(plain)])
    assert "absent" in capsys.readouterr().out


def test_missing_required_reported(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(fields_to_json(EMERGENCY_1, emergency_fields()[1:])))
    code, out = write(tmp_path, p)
    assert code == 3 and not out.exists()
    assert "MissingRequired" in capsys.readouterr().err


def test_dropped_field_warning(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(fields_to_json(EMERGENCY_1, emergency_fields(note="n" * 500))))
    code, out = write(tmp_path, p, "--key", KEY)
    assert code == 0 and len(out.read_bytes()) <= 256
    assert "dropped to fit TAG-2K: free_text_note" in capsys.readouterr().err


def test_template_file_and_32k(tmp_path, capsys):
    t = dict(template_to_dict(EMERGENCY_1), version=2)
    t["fields"][-1]["max_len"] = 5000
    tf = tmp_path / "t.json"
    tf.write_text(json.dumps(t))
    p = tmp_path / "s.json"
    p.write_text(json.dumps(fields_to_json(EMERGENCY_1, emergency_fields(note="n" * 3000))))
    code, out = write(tmp_path, p, "--template-file", str(tf), "--version", "2", "--profile", "TAG-32K")
    assert code == 0
    assert tag_codec.decode(out.read_bytes()).fields[-1].value == "n" * 3000


@pytest.mark.parametrize("args,code", [
    (["--sn", "XYZ"], 3),
    (["--uri", "http://x/y"], 3),
    (["--template", "7"], 3),
    (["--key", "hex:zz"], 2),
])
def test_write_errors(tmp_path, summary, args, code):
    base = {"--sn": SN, "--uri": URI, "--template": "1", "--key": None}
    base.update(dict(zip(args[::2], args[1::2])))
    argv = ["tag", "write", "--from", str(summary), "--out", str(tmp_path / "o"), "--now", NOW]
    for k, v in base.items():
        if v is not None:
            argv += [k, v]
    assert main(argv) == code


def test_read_corrupt(tmp_path, summary, capsys):
    _, out = write(tmp_path, summary)
    data = bytearray(out.read_bytes())
    data[20] ^= 0xFF
    out.write_bytes(bytes(data))
    assert main(["tag", "read", str(out)]) == 3
    assert "CrcMismatch" in capsys.readouterr().err
    assert main(["tag", "read", str(tmp_path / "missing")]) == 6


def test_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["tag"])
    assert info.value.code == 2


def test_triage_table(tmp_path, summary, capsys):
    _, out = write(tmp_path, summary, "--key", KEY)
    capsys.readouterr()
    assert main(["triage", str(out), "--key", KEY, "--now", NOW]) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    body = lines[lines.index("-" * 60) + 1:]
    assert body[0].startswith("BLOOD_TYPE") and "O+ Blood group O RhD positive [LOCAL]" in body[0]
    assert body[1].startswith("ALLERGY")
    assert "Seal            verified" in text and "WARNING" not in text


def test_triage_stale_and_dictionary_fallback(tmp_path, summary, capsys):
    _, out = write(tmp_path, summary)
    capsys.readouterr()
    later = str(int(NOW) + 400 * 86400)
    assert main(["triage", str(out), "--now", later, "--dict", str(tmp_path / "none.tsv")]) == 0
    cap = capsys.readouterr()
    assert "WARNING: tag data is stale" in cap.out
    assert "raw codes" in cap.err and "O+ [LOCAL]" in cap.out


def test_principal_add(tmp_path, capsys):
    path = tmp_path / "p.json"
    assert main(["principal", "add", "--file", str(path), "--username", "u", "--role", "physician",
                 "--password", "s3cret-pw"]) == 0
    assert "s3cret-pw" not in path.read_text()


def test_agent_run(tmp_path, capsys):
    from conftest import HL7_DIR
    spool = tmp_path / "spool"
    spool.mkdir()
    for p in sorted(HL7_DIR.glob("0[1-4]*.hl7")):
        (spool / p.name).write_bytes(p.read_bytes())
    (tmp_path / "agents.json").write_text(json.dumps(
        [{"source_id": "HOSP-A", "spool_dir": "spool", "archive_dir": "archive"}]))
    assert main(["agent", "run", "--config", str(tmp_path / "agents.json"),
                 "--data-dir", str(tmp_path / "data"), "--once"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["parsed_ok"] == 4 and report["errors"] == []


def test_offline_guard_blocks_sockets(tmp_path, summary):
    proc = run_offline(["tag", "write", "--sn", SN, "--uri", URI, "--from", "http://127.0.0.1:9/",
                        "--out", str(tmp_path / "x"), "--now", NOW])
    assert proc.returncode == 4
    assert "network access denied" in proc.stderr


def test_serve_requires_config(monkeypatch):
    monkeypatch.delenv("SIMOPAC_CONFIG", raising=False)
    assert main(["serve"]) == 2
