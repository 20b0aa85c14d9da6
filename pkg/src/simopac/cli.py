"""``simopac`` command line.

Exit codes: 0 ok, 2 usage, 3 decode/validation, 4 network, 5 auth, 6 storage.

``tag`` and ``triage`` import only the codec, templates and terminology modules,
so they run with no network and no store directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import tag_codec
from .errors import SimopacError, StorageFailure
from .identity import IdentityError, parse_sn, parse_uri
from .keys import resolve_secret
from .templates import (EMERGENCY_1, TemplateError, fields_from_json, fields_to_json,
                        load_template_file, validate_values)
from .terminology import DEFAULT_CONCEPTS, TerminologyError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_NETWORK = 4
EXIT_AUTH = 5
EXIT_STORAGE = 6


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID) -> None:
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _key(ref: str | None) -> bytes | None:
    try:
        return resolve_secret(ref)
    except (OSError, ValueError) as exc:
        raise CliError(f"bad --key: {exc}", EXIT_USAGE) from None


def _templates(paths) -> dict:
    out = {EMERGENCY_1.ref: EMERGENCY_1}
    for p in paths or ():
        t = load_template_file(p)
        out[t.ref] = t
    return out


def _read_image(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_STORAGE) from None


def _decode_or_fail(image: bytes):
    try:
        return tag_codec.decode(image)
    except tag_codec.DecodeError as exc:
        raise CliError(f"{type(exc).__name__}: {exc}") from None


# -- tag write / read ---------------------------------------------------------

def _summary_fields(args, template) -> list:
    src = args.source
    if src.startswith(("http://", "https://")):
        from .client import ApiError, Client, NetworkError
        token = args.token or os.environ.get("SIMOPAC_TOKEN")
        client = Client(src, token=token)
        try:
            doc = client.summary(args.sn.upper(), template.template_id, template.version, now=args.now)
        except NetworkError as exc:
            raise CliError(str(exc), EXIT_NETWORK) from None
        except ApiError as exc:
            raise CliError(str(exc), EXIT_AUTH if exc.status in (401, 403) else EXIT_INVALID) from None
    else:
        try:
            doc = json.loads(Path(src).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read summary {src}: {exc}") from None
    items = doc["fields"] if isinstance(doc, dict) else doc
    return fields_from_json(template, items)


def cmd_tag_write(args) -> int:
    templates = _templates(args.template_file)
    ref = (args.template, args.version)
    if ref not in templates:
        raise CliError(f"template {ref[0]} v{ref[1]} unknown (use --template-file)")
    template = templates[ref]
    profile = tag_codec.PROFILES[args.profile]
    try:
        sn = parse_sn(args.sn)
        parse_uri(args.uri)
    except IdentityError as exc:
        raise CliError(f"{type(exc).__name__}: {exc}") from None
    fields = _summary_fields(args, template)
    report = validate_values(template, fields)
    if not report.valid:
        kinds = sorted({v.kind.value for v in report.verdicts})
        raise CliError(f"{', '.join(kinds)}: " + "; ".join(str(v) for v in report.verdicts))
    key = _key(args.key)
    now = int(args.now) if args.now is not None else int(time.time())
    payload = tag_codec.CipPayload(sn, args.uri, template.template_id, template.version, now,
                                   tuple(fields), mac_present=key is not None)
    try:
        payload, dropped = tag_codec.fit_to_budget(payload, template, profile)
        image = tag_codec.encode(tag_codec.CipPayload(
            payload.sn, payload.emr_uri, payload.template_id, payload.template_version,
            payload.updated_at, payload.fields))
        if key is not None:
            image = tag_codec.seal(image, key)
    except tag_codec.CodecError as exc:
        raise CliError(f"{type(exc).__name__}: {exc}") from None
    if dropped:
        names = [template.field(fid).name if any(f.field_id == fid for f in template.fields) else str(fid)
                 for fid in dropped]
        _err(f"warning: dropped to fit {profile.name}: {', '.join(names)}")
    try:
        Path(args.out).write_bytes(image)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_STORAGE) from None
    result = {"out": str(args.out), "bytes": len(image), "capacity_bytes": profile.capacity_bytes,
              "headroom_bytes": profile.capacity_bytes - len(image), "sealed": key is not None,
              "dropped": dropped}
    if args.format == "json":
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"wrote {len(image)} bytes to {args.out} "
              f"({result['headroom_bytes']} bytes headroom on {profile.name})")
    return EXIT_OK


def cmd_tag_read(args) -> int:
    image = _read_image(args.file)
    payload = _decode_or_fail(image)
    key = _key(args.key)
    if not payload.mac_present:
        seal = "absent"
    elif key is None:
        seal = "not checked"
    else:
        seal = "verified" if tag_codec.verify_seal(image, key) else "unverified"
    templates = _templates(args.template_file)
    template = templates.get((payload.template_id, payload.template_version))
    if template is not None:
        fields = fields_to_json(template, payload.fields)
    else:
        from .templates import value_to_json
        fields = [{"field_id": f.field_id, "kind": f.kind.name.lower(),
                   "value": value_to_json(f.kind, f.value)} for f in payload.fields]
    doc = {"sn": payload.sn.hex().upper(), "emr_uri": payload.emr_uri,
           "template_id": payload.template_id, "template_version": payload.template_version,
           "updated_at": payload.updated_at, "bytes": len(image), "seal": seal, "fields": fields}
    if args.format == "json":
        print(json.dumps(doc, sort_keys=True))
        return EXIT_OK
    print(f"SN        {doc['sn']}")
    print(f"URI       {doc['emr_uri']}")
    print(f"Template  {payload.template_id} v{payload.template_version}"
          + (f" ({template.name})" if template else ""))
    print(f"Updated   {payload.updated_at}")
    print(f"Seal      {seal}")
    print(f"Size      {len(image)} bytes")
    for f in fields:
        label = f.get("name", f"field {f['field_id']}")
        print(f"  {label:<22} {json.dumps(f['value'], ensure_ascii=False)}")
    return EXIT_OK


# -- triage -------------------------------------------------------------------

def cmd_triage(args) -> int:
    from .triage import build_triage_view, load_dictionary

    image = _read_image(args.file)
    _decode_or_fail(image)
    dictionary = {}
    dict_path = args.dict or DEFAULT_CONCEPTS
    try:
        dictionary = load_dictionary(dict_path)
    except TerminologyError as exc:
        _err(f"warning: offline dictionary unavailable ({exc}); showing raw codes")
    now = int(args.now) if args.now is not None else int(time.time())
    view = build_triage_view(image, key=_key(args.key), dictionary=dictionary,
                             templates=_templates(args.template_file), now=now,
                             stale_after_days=args.stale_days)
    if args.format == "json":
        print(json.dumps(view.to_dict(), sort_keys=True, ensure_ascii=False))
    else:
        print(view.render())
    return EXIT_OK


# -- server / agents / demo ---------------------------------------------------

def cmd_serve(args) -> int:
    from .service import ConfigInvalid, NodeConfig, PortUnavailable, serve

    path = args.config or os.environ.get("SIMOPAC_CONFIG")
    if not path:
        raise CliError("no --config and SIMOPAC_CONFIG is unset", EXIT_USAGE)
    try:
        handle = serve(NodeConfig.load(path))
    except ConfigInvalid as exc:
        raise CliError(f"ConfigInvalid: {exc}", EXIT_USAGE) from None
    except PortUnavailable as exc:
        raise CliError(f"PortUnavailable: {exc}", EXIT_NETWORK) from None
    print(f"serving realm {handle.node.config.realm} on {handle.url}", flush=True)
    try:
        while handle.thread.is_alive():
            handle.thread.join(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        handle.shutdown()
    return EXIT_OK


def cmd_agent_run(args) -> int:
    from .aggregation import AggregationEngine, load_agents
    from .record_store import RecordStore
    from .templates import TemplateRegistry
    from .terminology import Terminology

    try:
        agents = load_agents(args.config)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"bad agent config: {exc}", EXIT_USAGE) from None
    terms = Terminology.load(args.mappings, args.concepts) if args.mappings else None
    if terms is None:
        from .terminology import load_default
        terms = load_default()
    with RecordStore(args.data_dir) as store:
        engine = AggregationEngine(store, terms, TemplateRegistry(store))
        try:
            report = engine.run(agents, once=args.once)
        except KeyboardInterrupt:
            return EXIT_OK
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK if not report.errors else EXIT_INVALID


def cmd_demo_run(args) -> int:
    from .demo import run_demo

    result = run_demo(Path(args.workdir), stop_node_a_before_triage=args.stop_node_a_before_triage,
                      out=sys.stdout)
    return EXIT_OK if result.ok else EXIT_INVALID


def cmd_principal_add(args) -> int:
    from .access_control import Principal, hash_password, load_principals, save_principals

    path = Path(args.file)
    existing = load_principals(path) if path.exists() else {}
    password = args.password if args.password is not None else sys.stdin.readline().rstrip("\n")
    if not password:
        raise CliError("empty password", EXIT_USAGE)
    existing[args.username] = Principal(args.username, args.role, hash_password(password))
    save_principals(path, existing.values())
    print(f"{args.username} ({args.role}) saved to {path}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simopac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    tag = sub.add_parser("tag", help="write or read CIP tag images").add_subparsers(dest="tag_cmd", required=True)
    w = tag.add_parser("write", help="encode a summary into a tag image")
    w.add_argument("--sn", required=True, help="16 hex digit serial number")
    w.add_argument("--uri", required=True, help="EMR URI, simopac://host[:port]/realm")
    w.add_argument("--template", type=int, default=1)
    w.add_argument("--version", type=int, default=1)
    w.add_argument("--template-file", action="append")
    w.add_argument("--profile", choices=sorted(tag_codec.PROFILES), default="TAG-2K")
    w.add_argument("--key", help="MAC key reference (hex:, env:, file:, text:)")
    w.add_argument("--from", dest="source", required=True, help="summary JSON file or server URL")
    w.add_argument("--token", help="bearer token when --from is a server URL")
    w.add_argument("--now", type=int, help="updated_at (epoch seconds); default: current time")
    w.add_argument("--out", required=True)
    w.add_argument("--format", choices=("table", "json"), default="table")
    w.set_defaults(func=cmd_tag_write)

    r = tag.add_parser("read", help="decode a tag image")
    r.add_argument("file")
    r.add_argument("--key")
    r.add_argument("--template-file", action="append")
    r.add_argument("--format", choices=("table", "json"), default="table")
    r.set_defaults(func=cmd_tag_read)

    t = sub.add_parser("triage", help="offline emergency view of a tag image")
    t.add_argument("file")
    t.add_argument("--key")
    t.add_argument("--dict", help="offline concept dictionary TSV (system, code, display)")
    t.add_argument("--template-file", action="append")
    t.add_argument("--now", type=int)
    t.add_argument("--stale-days", type=int, default=365)
    t.add_argument("--format", choices=("table", "json"), default="table")
    t.set_defaults(func=cmd_triage)

    s = sub.add_parser("serve", help="run a SIMOPAC node")
    s.add_argument("--config", help="node config JSON (default: $SIMOPAC_CONFIG)")
    s.set_defaults(func=cmd_serve)

    agent = sub.add_parser("agent", help="source agents").add_subparsers(dest="agent_cmd", required=True)
    a = agent.add_parser("run", help="poll agent spools into a store")
    a.add_argument("--config", required=True, help="JSON list of source agents")
    a.add_argument("--data-dir", required=True)
    a.add_argument("--mappings")
    a.add_argument("--concepts")
    a.add_argument("--once", action="store_true")
    a.set_defaults(func=cmd_agent_run)

    demo = sub.add_parser("demo", help="end-to-end scenario").add_subparsers(dest="demo_cmd", required=True)
    d = demo.add_parser("run")
    d.add_argument("--workdir", required=True)
    d.add_argument("--stop-node-a-before-triage", action="store_true",
                   help="stop hospital-a before triage to exercise the offline path")
    d.set_defaults(func=cmd_demo_run)

    pr = sub.add_parser("principal", help="manage the principals file").add_subparsers(dest="p_cmd", required=True)
    pa = pr.add_parser("add")
    pa.add_argument("--file", required=True)
    pa.add_argument("--username", required=True)
    pa.add_argument("--role", required=True, choices=("physician", "emergency", "agent", "admin"))
    pa.add_argument("--password", help="read from stdin when omitted")
    pa.set_defaults(func=cmd_principal_add)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except (TemplateError, TerminologyError, tag_codec.CodecError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    except StorageFailure as exc:
        _err(f"StorageFailure: {exc}")
        return EXIT_STORAGE
    except SimopacError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
