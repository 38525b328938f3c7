"""Four-variable Tangri kidney failure risk score and the lab extraction that gates it."""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional

from .codes import CodeSet, CodeSystem, builtin_sets
from .cohort import CohortSpec, Patient, age_at

ACR_UNIT = "mg/g"
EGFR_UNIT = "mL/min/1.73m2"
MG_MMOL_TO_MG_G = 8.84


class UnitMismatchWarning(UserWarning):
    """Labs for one concept arrived in incomparable unit groups."""


@dataclass(frozen=True)
class TangriCoefficients:
    base: float = 0.9751
    c_age: float = -0.2201
    m_age: float = 7.036
    c_male: float = 0.2467
    m_male: float = 0.5642
    c_egfr: float = -0.5567
    m_egfr: float = 7.222
    c_acr: float = 0.4510
    m_logacr: float = 5.137


TANGRI_4VAR = TangriCoefficients()


class TangriInputs(NamedTuple):
    age_years: float
    male: float
    egfr: float
    acr: float


def tangri_score(inputs: TangriInputs, coef: TangriCoefficients = TANGRI_4VAR) -> float:
    """Probability of kidney failure: 1 - base**S with S the exponentiated linear predictor."""
    age, male, egfr, acr = inputs
    if not (egfr > 0):
        raise ValueError(f"egfr must be positive, got {egfr}")
    if not (acr > 0):
        raise ValueError(f"acr must be positive, got {acr}")
    if not (age > 0):
        raise ValueError(f"age_years must be positive, got {age}")
    lin = (coef.c_age * (age / 10.0 - coef.m_age)
           + coef.c_male * (male - coef.m_male)
           + coef.c_egfr * (egfr / 5.0 - coef.m_egfr)
           + coef.c_acr * (math.log(acr) - coef.m_logacr))
    s = math.exp(lin)
    # 1 - base**s without cancellation for small s
    return -math.expm1(s * math.log(coef.base))


# unit spelling (lowercased, spaces dropped) -> (canonical unit, multiplier)
DEFAULT_UNIT_RULES: Mapping[str, tuple] = {
    "mg/g": (ACR_UNIT, 1.0),
    "mg/g{creat}": (ACR_UNIT, 1.0),
    "mg/gcreat": (ACR_UNIT, 1.0),
    "mg/mmol": (ACR_UNIT, MG_MMOL_TO_MG_G),
    "mg/mmol{creat}": (ACR_UNIT, MG_MMOL_TO_MG_G),
    "ml/min/1.73m2": (EGFR_UNIT, 1.0),
    "ml/min/{1.73_m2}": (EGFR_UNIT, 1.0),
    "ml/min/1.73sqm": (EGFR_UNIT, 1.0),
}


def canonicalize(value: float, unit: Optional[str], rules: Mapping[str, tuple]) -> tuple:
    """Map (value, unit) to (converted value, unit group); unknown units keep their own group."""
    raw = (unit or "").strip()
    rule = rules.get(raw.lower().replace(" ", ""))
    if rule is None:
        return value, raw
    canonical, factor = rule
    return value * factor, canonical


class LabValue(NamedTuple):
    value: float
    unit: str


def extract_lab_max(patient: Patient, code_set: CodeSet, spec: CohortSpec,
                    unit_rules: Mapping[str, tuple] = DEFAULT_UNIT_RULES,
                    canonical_unit: Optional[str] = None) -> Optional[LabValue]:
    """Maximum in-window value of any lab in ``code_set``, after unit conversion.

    When several incomparable unit groups occur, the group with the most
    observations wins (ties: the canonical unit, then the lexicographically
    smallest unit) and a UnitMismatchWarning is emitted.
    """
    groups: dict = defaultdict(list)
    lo, hi = spec.obs_start, spec.obs_end
    for o in patient.observations:
        if (o.system is not CodeSystem.LOINC or o.value is None or o.code not in code_set.codes
                or o.date < lo or o.date >= hi):
            continue
        value, unit = canonicalize(o.value, o.unit, unit_rules)
        groups[unit].append(value)
    if not groups:
        return None
    if len(groups) == 1:
        (unit, values), = groups.items()
        return LabValue(max(values), unit)
    unit = min(groups, key=lambda u: (-len(groups[u]), u != canonical_unit, u))
    warnings.warn(
        f"patient {patient.id}: {code_set.name} observed in incomparable units "
        f"{sorted(groups)}; using {unit!r}",
        UnitMismatchWarning,
        stacklevel=2,
    )
    return LabValue(max(groups[unit]), unit)


def extract_egfr(patient: Patient, spec: CohortSpec, unit_rules=DEFAULT_UNIT_RULES) -> Optional[LabValue]:
    return extract_lab_max(patient, builtin_sets().EGFR_LOINC, spec, unit_rules, EGFR_UNIT)


def extract_acr(patient: Patient, spec: CohortSpec, unit_rules=DEFAULT_UNIT_RULES) -> Optional[LabValue]:
    return extract_lab_max(patient, builtin_sets().ACR_LOINC, spec, unit_rules, ACR_UNIT)


def _usable(egfr: Optional[LabValue], acr: Optional[LabValue]) -> bool:
    return (egfr is not None and acr is not None
            and egfr.unit == EGFR_UNIT and acr.unit == ACR_UNIT
            and egfr.value > 0 and acr.value > 0)


def tangri_eligible(patient: Patient, spec: CohortSpec, unit_rules=DEFAULT_UNIT_RULES) -> bool:
    """Both eGFR and ACR observed in the window, in units the formula accepts."""
    return _usable(extract_egfr(patient, spec, unit_rules), extract_acr(patient, spec, unit_rules))


class TangriResult(NamedTuple):
    patient_id: str
    eligible: bool
    egfr: Optional[float]
    acr_mg_g: Optional[float]
    probability: Optional[float]


def score_patient(patient: Patient, spec: CohortSpec, unit_rules=DEFAULT_UNIT_RULES,
                  coef: TangriCoefficients = TANGRI_4VAR) -> TangriResult:
    """Eligibility plus score; ineligible patients get no score, never a default."""
    egfr = extract_egfr(patient, spec, unit_rules)
    acr = extract_acr(patient, spec, unit_rules)
    egfr_v = egfr.value if egfr is not None and egfr.unit == EGFR_UNIT else None
    acr_v = acr.value if acr is not None and acr.unit == ACR_UNIT else None
    if not _usable(egfr, acr):
        return TangriResult(patient.id, False, egfr_v, acr_v, None)
    age = age_at(patient.birth_date, spec.obs_end)
    p = tangri_score(TangriInputs(age, patient.male, egfr_v, acr_v), coef)
    return TangriResult(patient.id, True, egfr_v, acr_v, p)
