"""Patient records, study windows, outcome labeling and the train/validation split."""
from __future__ import annotations

import datetime as dt
import enum
import importlib.resources
import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np

from .codes import CodeSet, CodeSystem, normalize_code

# 183490 / (183490 + 324685)
DEFAULT_TRAIN_FRACTION = 0.361

SEXES = ("female", "male")
RACES = ("AfricanAmerican", "Asian", "White", "Other")

_SYSTEMS = {s.value: s for s in CodeSystem}
_PATIENT_FIELDS = frozenset({"id", "birth_date", "sex", "race", "observations"})
_LABEL_FIELDS = frozenset({"status", "age_years", "split"})
_OBS_FIELDS = frozenset({"system", "code", "date", "value", "unit"})


class RecordError(ValueError):
    """A patient record failed to parse or validate."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Status(str, enum.Enum):
    EXCLUDED = "excluded_prevalent"
    NEGATIVE = "negative"
    POSITIVE = "positive"


class OutcomeEvidence(str, enum.Enum):
    NONE = "none"
    PREVALENT = "prevalent"


@dataclass(frozen=True, slots=True)
class Observation:
    system: CodeSystem
    code: str
    date: dt.date
    value: Optional[float] = None
    unit: Optional[str] = None


@dataclass(frozen=True, slots=True)
class Patient:
    id: str
    birth_date: dt.date
    sex: str
    race: str
    observations: tuple = ()

    @property
    def male(self) -> int:
        return int(self.sex == "male")


@dataclass(frozen=True)
class CohortSpec:
    obs_start: dt.date = dt.date(2015, 1, 1)
    obs_end: dt.date = dt.date(2016, 1, 1)
    label_start: dt.date = dt.date(2016, 4, 1)
    label_end: dt.date = dt.date(2017, 4, 1)
    icd_min_instances: int = 2
    cpt_min_instances: int = 1

    def __post_init__(self):
        if not (self.obs_start < self.obs_end <= self.label_start < self.label_end):
            raise ValueError(
                "cohort windows must satisfy obs_start < obs_end <= label_start < label_end"
            )
        if self.icd_min_instances < 1 or self.cpt_min_instances < 1:
            raise ValueError("instance thresholds must be >= 1")


@dataclass(frozen=True, slots=True)
class LabeledPatient:
    patient: Patient
    status: Status
    age_years: float
    split: Optional[str] = None

    @property
    def id(self) -> str:
        return self.patient.id

    @property
    def label(self) -> int:
        return int(self.status is Status.POSITIVE)


def age_at(birth_date: dt.date, when: dt.date) -> float:
    return (when - birth_date).days / 365.25


# ---------------------------------------------------------------- ingest

def _parse_date(value, what: str, line: int) -> dt.date:
    if not isinstance(value, str):
        raise RecordError(line, f"{what} must be an ISO-8601 date string")
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise RecordError(line, f"invalid date {value!r} for {what}") from None


def _parse_observation(obj, line: int, strict: bool) -> Observation:
    if not isinstance(obj, dict):
        raise RecordError(line, "observation must be an object")
    if strict:
        extra = obj.keys() - _OBS_FIELDS
        if extra:
            raise RecordError(line, f"unknown observation field(s) {sorted(extra)}")
    try:
        system_raw, code = obj["system"], obj["code"]
        date_raw = obj["date"]
    except KeyError as exc:
        raise RecordError(line, f"observation missing field {exc.args[0]!r}") from None
    system = _SYSTEMS.get(system_raw)
    if system is None:
        raise RecordError(line, f"unknown code system {system_raw!r}")
    if not isinstance(code, str) or not code.strip():
        raise RecordError(line, "observation code must be a non-empty string")
    value = obj.get("value")
    unit = obj.get("unit")
    if value is not None:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise RecordError(line, f"observation value must be a finite number, got {value!r}")
        if system is not CodeSystem.LOINC:
            raise RecordError(line, f"value on non-LOINC observation {code!r}")
        value = float(value)
    if unit is not None and not isinstance(unit, str):
        raise RecordError(line, "observation unit must be a string")
    return Observation(system, normalize_code(code), _parse_date(date_raw, "observation date", line), value, unit)


def parse_record(obj, line: int = 0, strict: bool = False):
    """Validate one decoded record; returns ``(Patient, label_fields)``."""
    if not isinstance(obj, dict):
        raise RecordError(line, "record must be a JSON object")
    if strict:
        extra = obj.keys() - _PATIENT_FIELDS - _LABEL_FIELDS
        if extra:
            raise RecordError(line, f"unknown field(s) {sorted(extra)}")
    missing = [k for k in ("id", "birth_date", "sex", "race") if k not in obj]
    if missing:
        raise RecordError(line, f"missing field(s) {missing}")
    pid = obj["id"]
    if not isinstance(pid, str) or not pid:
        raise RecordError(line, "id must be a non-empty string")
    sex = obj["sex"]
    if sex not in SEXES:
        raise RecordError(line, f"sex must be one of {SEXES}, got {sex!r}")
    race = obj["race"]
    if race not in RACES:
        raise RecordError(line, f"race must be one of {RACES}, got {race!r}")
    raw_obs = obj.get("observations", [])
    if not isinstance(raw_obs, list):
        raise RecordError(line, "observations must be an array")
    observations = tuple(_parse_observation(o, line, strict) for o in raw_obs)
    patient = Patient(pid, _parse_date(obj["birth_date"], "birth_date", line), sex, race, observations)
    return patient, {k: obj[k] for k in _LABEL_FIELDS if k in obj}


def _iter_records(stream: Iterable[str], strict: bool) -> Iterator[tuple]:
    seen: dict = {}
    for lineno, text in enumerate(stream, start=1):
        text = text.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RecordError(lineno, f"parse failure: {exc.msg}") from None
        patient, extra = parse_record(obj, lineno, strict)
        if patient.id in seen:
            raise RecordError(lineno, f"duplicate id {patient.id!r} (first seen on line {seen[patient.id]})")
        seen[patient.id] = lineno
        yield lineno, patient, extra


def ingest(stream: Iterable[str], strict: bool = False) -> list:
    """Parse a newline-delimited patient stream into validated Patients."""
    return [p for _, p, _ in _iter_records(stream, strict)]


def ingest_labeled(stream: Iterable[str], strict: bool = False) -> list:
    """Parse a labeled cohort stream (patient records plus status/age/split)."""
    out = []
    for lineno, patient, extra in _iter_records(stream, strict):
        try:
            status = Status(extra["status"])
            age = float(extra["age_years"])
        except (KeyError, ValueError, TypeError):
            raise RecordError(lineno, "labeled record needs valid 'status' and 'age_years'") from None
        split_name = extra.get("split")
        if split_name not in (None, "train", "validation"):
            raise RecordError(lineno, f"unknown split {split_name!r}")
        out.append(LabeledPatient(patient, status, age, split_name))
    return out


def observation_to_dict(o: Observation) -> dict:
    d = {"system": o.system.value, "code": o.code, "date": o.date.isoformat()}
    if o.value is not None:
        d["value"] = o.value
    if o.unit is not None:
        d["unit"] = o.unit
    return d


def patient_to_dict(p: Patient) -> dict:
    return {
        "id": p.id,
        "birth_date": p.birth_date.isoformat(),
        "sex": p.sex,
        "race": p.race,
        "observations": [observation_to_dict(o) for o in p.observations],
    }


def labeled_to_dict(lp: LabeledPatient) -> dict:
    d = patient_to_dict(lp.patient)
    d["status"] = lp.status.value
    d["age_years"] = lp.age_years
    d["split"] = lp.split
    return d


def write_records(records: Iterable[dict], fh: IO[str]) -> None:
    for rec in records:
        fh.write(json.dumps(rec, separators=(",", ":")))
        fh.write("\n")


def record_schema() -> dict:
    """JSON Schema for one line of a patient (or labeled cohort) stream."""
    text = importlib.resources.files("nephra").joinpath("schema/patient_record.schema.json").read_text()
    return json.loads(text)


# ------------------------------------------------------------- labeling

def _count_outcome(patient: Patient, icd_set: CodeSet, cpt_set: CodeSet,
                   start: Optional[dt.date], end: dt.date) -> tuple:
    icd = cpt = 0
    icd_codes, cpt_codes = icd_set.codes, cpt_set.codes
    icd_sys, cpt_sys = icd_set.system, cpt_set.system
    for o in patient.observations:
        if o.date >= end or (start is not None and o.date < start):
            continue
        if o.system is icd_sys and o.code in icd_codes:
            icd += 1
        elif o.system is cpt_sys and o.code in cpt_codes:
            cpt += 1
    return icd, cpt


def _detected(counts: tuple, icd_min: int, cpt_min: int) -> bool:
    return counts[0] >= icd_min or counts[1] >= cpt_min


def outcome_evidence(patient: Patient, icd_set: CodeSet, cpt_set: CodeSet, before: dt.date,
                     icd_min_instances: int = 2, cpt_min_instances: int = 1) -> OutcomeEvidence:
    """Kidney-failure evidence anywhere in the history strictly before ``before``."""
    counts = _count_outcome(patient, icd_set, cpt_set, None, before)
    if _detected(counts, icd_min_instances, cpt_min_instances):
        return OutcomeEvidence.PREVALENT
    return OutcomeEvidence.NONE


def outcome_in_window(patient: Patient, icd_set: CodeSet, cpt_set: CodeSet, start: dt.date,
                      end: dt.date, icd_min_instances: int = 2, cpt_min_instances: int = 1) -> bool:
    counts = _count_outcome(patient, icd_set, cpt_set, start, end)
    return _detected(counts, icd_min_instances, cpt_min_instances)


def label_patient(patient: Patient, spec: CohortSpec, icd_set: CodeSet, cpt_set: CodeSet) -> LabeledPatient:
    knobs = (spec.icd_min_instances, spec.cpt_min_instances)
    age = age_at(patient.birth_date, spec.obs_end)
    if outcome_evidence(patient, icd_set, cpt_set, spec.label_start, *knobs) is OutcomeEvidence.PREVALENT:
        status = Status.EXCLUDED
    elif outcome_in_window(patient, icd_set, cpt_set, spec.label_start, spec.label_end, *knobs):
        status = Status.POSITIVE
    else:
        status = Status.NEGATIVE
    return LabeledPatient(patient, status, age)


def build_cohort(patients: Iterable[Patient], spec: CohortSpec, icd_set: CodeSet,
                 cpt_set: CodeSet) -> list:
    return [label_patient(p, spec, icd_set, cpt_set) for p in patients]


def split(cohort: Sequence[LabeledPatient], train_fraction: float = DEFAULT_TRAIN_FRACTION,
          seed: int = 0) -> tuple:
    """Seeded shuffle of the non-excluded patients, then a floor-sized train cut.

    Returned patients carry their split name; input order is otherwise kept
    inside each part.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if not cohort:
        raise ValueError("cannot split an empty cohort")
    eligible = [i for i, lp in enumerate(cohort) if lp.status is not Status.EXCLUDED]
    perm = np.random.default_rng(seed).permutation(len(eligible))
    n_train = int(math.floor(train_fraction * len(eligible)))
    train_idx = sorted(eligible[j] for j in perm[:n_train])
    valid_idx = sorted(eligible[j] for j in perm[n_train:])
    train = [_with_split(cohort[i], "train") for i in train_idx]
    valid = [_with_split(cohort[i], "validation") for i in valid_idx]
    return train, valid


def _with_split(lp: LabeledPatient, name: str) -> LabeledPatient:
    return LabeledPatient(lp.patient, lp.status, lp.age_years, name)


def assign_splits(cohort: Sequence[LabeledPatient], train_fraction: float = DEFAULT_TRAIN_FRACTION,
                  seed: int = 0) -> list:
    """Like :func:`split` but returns the whole cohort in input order with split tags."""
    train, valid = split(cohort, train_fraction, seed)
    tag = {lp.id: "train" for lp in train}
    tag.update({lp.id: "validation" for lp in valid})
    return [_with_split(lp, tag[lp.id]) if lp.id in tag else lp for lp in cohort]
