"""Hypothesis strategies shared by the codec and acceptance tests."""

from __future__ import annotations

import datetime as dt

from hypothesis import strategies as st

from simopac.tag_codec import CipPayload, Code, FieldKind, FieldValue, Quantity
from simopac.templates import Template, TemplateField

serials = st.binary(min_size=8, max_size=8).filter(lambda b: b != bytes(8))

_label = st.text("abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=12)
hosts = st.builds(lambda a, b: f"{a}.{b}" if b else a, _label, st.one_of(st.just(""), _label))
uris = st.builds(
    lambda host, port, realm: f"simopac://{host}{'' if port is None else ':' + str(port)}/{realm}",
    hosts, st.one_of(st.none(), st.integers(1, 65535)),
    st.text("abcdefghijklmnopqrstuvwxyz-_.", min_size=1, max_size=20),
).filter(lambda u: len(u.encode()) <= 120)

texts = st.text(max_size=40)
dates = st.dates(min_value=dt.date(1700, 1, 1), max_value=dt.date(2400, 12, 31))
codes = st.builds(Code, st.integers(0, 255), st.text(max_size=12))
quantities = st.builds(Quantity, st.floats(allow_nan=False), st.text(max_size=8))

_VALUES = {
    FieldKind.TEXT: texts,
    FieldKind.CODE: codes,
    FieldKind.DATE: dates,
    FieldKind.QUANTITY: quantities,
    FieldKind.BOOLEAN: st.booleans(),
    FieldKind.IDENTIFIER: texts,
}


@st.composite
def field_values(draw):
    kind = draw(st.sampled_from(list(FieldKind)))
    return FieldValue(draw(st.integers(0, 0xFFFF)), kind, draw(_VALUES[kind]))


payloads = st.builds(
    CipPayload,
    sn=serials, emr_uri=uris,
    template_id=st.integers(0, 0xFFFF), template_version=st.integers(0, 0xFF),
    updated_at=st.integers(0, 0xFFFFFFFF),
    fields=st.lists(field_values(), max_size=20).map(tuple),
    mac_present=st.booleans(),
)


@st.composite
def templates_with_values(draw):
    """A random template plus values that validate against it (sizes may exceed a tag)."""
    n = draw(st.integers(1, 12))
    ids = draw(st.lists(st.integers(1, 500), min_size=n, max_size=n, unique=True))
    fields = []
    for fid in ids:
        kind = draw(st.sampled_from(list(FieldKind)))
        fixed = {FieldKind.DATE: 4, FieldKind.BOOLEAN: 1}.get(kind)
        fields.append(TemplateField(
            field_id=fid, name=f"f{fid}", kind=kind, required=draw(st.booleans()),
            priority=draw(st.integers(1, 9)),
            max_len=fixed or draw(st.integers(16, 2000)),
            repeatable=draw(st.booleans()),
            code_system=1 if kind is FieldKind.CODE else None))
    t = Template(draw(st.integers(0, 0xFFFF)), draw(st.integers(0, 0xFF)), "random", tuple(fields))
    values = []
    for f in fields:
        count = draw(st.integers(1 if f.required else 0, 4 if f.repeatable else 1))
        for _ in range(count):
            values.append(FieldValue(f.field_id, f.kind, draw(_bounded_value(f))))
    values = draw(st.permutations(values))
    return t, tuple(values)


def _bounded_value(f: TemplateField):
    room = f.max_len
    # half the time, a value of arbitrary length up to the limit so tags overflow
    if f.kind in (FieldKind.TEXT, FieldKind.IDENTIFIER):
        return st.one_of(st.text("abcdefghij ", max_size=room),
                         st.integers(0, room).map(lambda n: "t" * n))
    if f.kind is FieldKind.CODE:
        return st.builds(Code, st.just(1), st.one_of(
            st.text("ABCDEF0123456789.", max_size=room - 1),
            st.integers(0, room - 1).map(lambda n: "C" * n)))
    if f.kind is FieldKind.QUANTITY:
        return st.builds(Quantity, st.floats(allow_nan=False), st.text("mgkL/", max_size=min(room - 9, 255)))
    if f.kind is FieldKind.DATE:
        return dates
    return st.booleans()
