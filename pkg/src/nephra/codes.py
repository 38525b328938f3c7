"""Medical code sets: parsing, normalization and exact matching."""
from __future__ import annotations

import enum
import functools
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple

_TOKEN_SPLIT = re.compile(r"[\s,]+")
_LEGAL = re.compile(r"^[A-Z0-9\-]+$")


class CodeSystem(str, enum.Enum):
    ICD10 = "ICD10"
    CPT = "CPT"
    LOINC = "LOINC"

    @classmethod
    def parse(cls, value) -> "CodeSystem":
        if isinstance(value, CodeSystem):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(f"unknown code system {value!r}") from None


class CodeSetError(ValueError):
    pass


def normalize_code(code: str) -> str:
    """Uppercase, drop dots, trim surrounding whitespace."""
    return code.strip().replace(".", "").upper()


@dataclass(frozen=True)
class CodeSet:
    name: str
    system: CodeSystem
    codes: frozenset

    def __post_init__(self):
        if not self.codes:
            raise CodeSetError("empty code set")

    def __contains__(self, code: str) -> bool:
        return normalize_code(code) in self.codes

    def __len__(self) -> int:
        return len(self.codes)

    def to_text(self) -> str:
        lines = [f"system={self.system.value} name={self.name}"]
        lines.extend(sorted(self.codes))
        return "\n".join(lines) + "\n"


def parse_code_list(text: str, system, name: str) -> CodeSet:
    """Build a CodeSet from comma/whitespace separated tokens."""
    system = CodeSystem.parse(system)
    codes = set()
    for token in _TOKEN_SPLIT.split(text):
        if not token:
            continue
        norm = normalize_code(token)
        if not _LEGAL.match(norm):
            raise CodeSetError(f"illegal code token {token!r}")
        codes.add(norm)
    if not codes:
        raise CodeSetError("empty code set")
    return CodeSet(name=name, system=system, codes=frozenset(codes))


def matches(code_set: CodeSet, system, code: str) -> bool:
    try:
        system = CodeSystem.parse(system)
    except ValueError:
        return False
    if system is not code_set.system or not isinstance(code, str):
        return False
    return normalize_code(code) in code_set.codes


def read_code_set_file(text: str) -> CodeSet:
    """Parse a code-set file: a ``system=.. name=..`` header, then codes.

    ``#`` starts a comment; codes may be one per line or comma separated.
    """
    header = None
    body = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            header = line
            continue
        body.append(line)
    if header is None:
        raise CodeSetError("missing header line 'system=<..> name=<..>'")
    fields = dict(part.split("=", 1) for part in header.split() if "=" in part)
    if "system" not in fields or "name" not in fields:
        raise CodeSetError(f"malformed header {header!r}")
    return parse_code_list("\n".join(body), fields["system"], fields["name"])


RF_ICD10_TEXT = """
I953, R880, T81502A, T81502D, T81502S, T81512A, T81512D, T81512S, T81522A,
T81522D, T81522S, T81532A, T81532D, T81532S, T81592A, T81592D, T81592S,
T8241XA, T8241XD, T8241XS, T8242XA, T8242XD, T8242XS, T8243XA, T8243XD,
T8243XS, T8249XA, T8249XD, T8249XS, T85611A, T85611D, T85611S, T85621A,
T85621D, T85621S, T85631A, T85631D, T85631S, T85691A, T85691D, T85691S,
T8571XA, T8571XD, T8571XS, Y622, Y841, Z4901, Z4902, Z4931, Z4932, Z9115,
Z940, Z992
"""

RF_CPT_TEXT = "G0257, 36902, 36903, 36904, 36905, 36906, 90940, 99512, 90918, 90945"

EGFR_LOINC_TEXT = "33914-3, 48642-3, 48643-1, 50210-4, 50384-7, 62238-1, 69405-9"

# Source list repeats 32294-1 and 9318-7; stored as a set.
ACR_LOINC_TEXT = """
32294-1, 14585-4, 30000-4, 30001-2, 32294-1, 59159-4, 76401-9, 77253-3,
77254-1, 9318-7, 44292-1, 14959-1, 14958-3, 13705-9, 9318-7, 58447-4
"""


class BuiltinSets(NamedTuple):
    RF_ICD10: CodeSet
    RF_CPT: CodeSet
    EGFR_LOINC: CodeSet
    ACR_LOINC: CodeSet


@functools.lru_cache(maxsize=None)
def builtin_sets() -> BuiltinSets:
    return BuiltinSets(
        RF_ICD10=parse_code_list(RF_ICD10_TEXT, CodeSystem.ICD10, "RF_ICD10"),
        RF_CPT=parse_code_list(RF_CPT_TEXT, CodeSystem.CPT, "RF_CPT"),
        EGFR_LOINC=parse_code_list(EGFR_LOINC_TEXT, CodeSystem.LOINC, "EGFR_LOINC"),
        ACR_LOINC=parse_code_list(ACR_LOINC_TEXT, CodeSystem.LOINC, "ACR_LOINC"),
    )


def union_codes(sets: Iterable[CodeSet]) -> frozenset:
    out = set()
    for s in sets:
        out |= s.codes
    return frozenset(out)
