"""Code systems, concept dictionary and single-hop code translation."""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Union

from .errors import SimopacError


class CodeSystem(IntEnum):
    LOCAL = 0x01
    ICD9 = 0x02
    ICD10 = 0x03
    NDL = 0x04  # national drug list


class TerminologyError(SimopacError, ValueError):
    pass


class FileMissing(TerminologyError):
    pass


class UnknownSystem(TerminologyError):
    pass


class _LineError(TerminologyError):
    def __init__(self, path, line: int, detail: str) -> None:
        super().__init__(f"{path}:{line}: {detail}")
        self.line = line


class BadRow(_LineError):
    pass


class DuplicateRow(_LineError):
    pass


class UnknownSystemName(_LineError):
    pass


class Relation(str, Enum):
    EXACT = "exact"
    BROADER = "broader"
    NARROWER = "narrower"


SystemRef = Union[CodeSystem, int, str]


def code_system(ref: SystemRef) -> CodeSystem:
    """Resolve a system given by enum, numeric id or registered name."""
    try:
        if isinstance(ref, str):
            return CodeSystem[ref.upper()]
        return CodeSystem(ref)
    except (KeyError, ValueError):
        raise UnknownSystem(f"unknown code system {ref!r}") from None


@dataclass(frozen=True)
class Concept:
    system: CodeSystem
    code: str
    display: str


@dataclass(frozen=True)
class Mapping:
    from_system: CodeSystem
    from_code: str
    to_system: CodeSystem
    to_code: str
    relation: Relation


class TranslationOutcome(str, Enum):
    TRANSLATED = "Translated"
    NOT_MAPPED = "NotMapped"
    UNKNOWN_SOURCE_CODE = "UnknownSourceCode"


@dataclass(frozen=True)
class TranslationResult:
    outcome: TranslationOutcome
    concept: Concept | None = None
    relation: Relation | None = None

    @property
    def translated(self) -> bool:
        return self.outcome is TranslationOutcome.TRANSLATED


MAPPING_HEADER = ["from_system", "from_code", "to_system", "to_code", "relation"]
CONCEPT_HEADER = ["system", "code", "display"]


def _rows(path, header: list[str]):
    p = Path(path)
    if not p.is_file():
        raise FileMissing(f"{p} does not exist")
    with p.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        first = next(reader, None)
        if first != header:
            raise BadRow(p, 1, f"expected header {header}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            yield reader.line_num, row


def _system_at(path, line: int, name: str) -> CodeSystem:
    try:
        return CodeSystem[name]
    except KeyError:
        raise UnknownSystemName(path, line, f"unknown code system name {name!r}") from None


def load_mappings(path) -> list[Mapping]:
    rows: list[Mapping] = []
    seen: set[tuple[CodeSystem, str, CodeSystem]] = set()
    for line, row in _rows(path, MAPPING_HEADER):
        if len(row) != 5 or not row[1] or not row[3]:
            raise BadRow(path, line, "expected 5 non-empty columns")
        src = _system_at(path, line, row[0])
        dst = _system_at(path, line, row[2])
        try:
            relation = Relation(row[4])
        except ValueError:
            raise BadRow(path, line, f"unknown relation {row[4]!r}") from None
        key = (src, row[1], dst)
        if key in seen:
            raise DuplicateRow(path, line, f"duplicate mapping {src.name}:{row[1]} -> {dst.name}")
        seen.add(key)
        rows.append(Mapping(src, row[1], dst, row[3], relation))
    return rows


def load_concepts(path) -> dict[tuple[CodeSystem, str], Concept]:
    concepts: dict[tuple[CodeSystem, str], Concept] = {}
    for line, row in _rows(path, CONCEPT_HEADER):
        if len(row) != 3 or not row[1]:
            raise BadRow(path, line, "expected system, code, display")
        system = _system_at(path, line, row[0])
        if (system, row[1]) in concepts:
            raise DuplicateRow(path, line, f"duplicate concept {system.name}:{row[1]}")
        concepts[(system, row[1])] = Concept(system, row[1], row[2])
    return concepts


class Terminology:
    """Immutable concept dictionary plus mapping table."""

    def __init__(self, concepts: dict[tuple[CodeSystem, str], Concept],
                 mappings: list[Mapping] | None = None) -> None:
        self._concepts = dict(concepts)
        self._mappings = {(m.from_system, m.from_code, m.to_system): m for m in mappings or []}
        for m in self._mappings.values():
            for end in ((m.from_system, m.from_code), (m.to_system, m.to_code)):
                if end not in self._concepts:
                    raise BadRow("<mappings>", 0,
                                 f"mapping references unknown concept {end[0].name}:{end[1]}")

    @classmethod
    def load(cls, mappings_path, concepts_path) -> "Terminology":
        concepts = load_concepts(concepts_path)
        mappings = load_mappings(mappings_path)
        missing = [(i, m) for i, m in enumerate(mappings, 2)
                   if (m.from_system, m.from_code) not in concepts
                   or (m.to_system, m.to_code) not in concepts]
        if missing:
            line, m = missing[0]
            raise BadRow(mappings_path, line,
                         f"{m.from_system.name}:{m.from_code} -> {m.to_system.name}:{m.to_code} "
                         "references a concept absent from the dictionary")
        return cls(concepts, mappings)

    @property
    def mappings(self) -> list[Mapping]:
        return list(self._mappings.values())

    @property
    def concept_count(self) -> int:
        return len(self._concepts)

    def concept(self, system: SystemRef, code: str) -> Concept | None:
        return self._concepts.get((code_system(system), code))

    def validate_code(self, system: SystemRef, code: str) -> bool:
        return (code_system(system), code) in self._concepts

    def translate(self, from_system: SystemRef, code: str, to_system: SystemRef) -> TranslationResult:
        src, dst = code_system(from_system), code_system(to_system)
        concept = self._concepts.get((src, code))
        if concept is None:
            return TranslationResult(TranslationOutcome.UNKNOWN_SOURCE_CODE)
        if src is dst:
            return TranslationResult(TranslationOutcome.TRANSLATED, concept, Relation.EXACT)
        m = self._mappings.get((src, code, dst))
        if m is None:
            return TranslationResult(TranslationOutcome.NOT_MAPPED)
        return TranslationResult(TranslationOutcome.TRANSLATED,
                                 self._concepts[(dst, m.to_code)], m.relation)

    def search(self, system: SystemRef, prefix: str) -> list[Concept]:
        sys_ = code_system(system)
        p = prefix.casefold()
        hits = [c for (s, _), c in self._concepts.items()
                if s is sys_ and (c.code.casefold().startswith(p) or c.display.casefold().startswith(p))]
        return sorted(hits, key=lambda c: c.code)


class TerminologyService:
    """Holder that lets a loaded :class:`Terminology` be swapped atomically."""

    def __init__(self, mappings_path, concepts_path) -> None:
        self.mappings_path = mappings_path
        self.concepts_path = concepts_path
        self._lock = threading.Lock()
        self._current = Terminology.load(mappings_path, concepts_path)

    @property
    def current(self) -> Terminology:
        return self._current

    def reload(self) -> Terminology:
        fresh = Terminology.load(self.mappings_path, self.concepts_path)
        with self._lock:
            self._current = fresh
        return fresh


DATA_DIR = Path(__file__).parent / "data"
DEFAULT_MAPPINGS = DATA_DIR / "mappings.tsv"
DEFAULT_CONCEPTS = DATA_DIR / "concepts.tsv"


def load_default() -> Terminology:
    return Terminology.load(DEFAULT_MAPPINGS, DEFAULT_CONCEPTS)
