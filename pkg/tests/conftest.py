import datetime as dt
import json

import pytest

from nephra.codes import CodeSystem
from nephra.cohort import CohortSpec, LabeledPatient, Observation, Patient, Status

D = dt.date


def obs(system, code, date, value=None, unit=None):
    if isinstance(date, str):
        date = D.fromisoformat(date)
    return Observation(CodeSystem(system), code, date, value, unit)


def patient(pid="p1", birth="1960-06-15", sex="female", race="White", observations=()):
    return Patient(pid, D.fromisoformat(birth), sex, race, tuple(observations))


def labeled(p, status=Status.NEGATIVE, age=None, spec=None):
    spec = spec or CohortSpec()
    if age is None:
        age = (spec.obs_end - p.birth_date).days / 365.25
    return LabeledPatient(p, status, age)


def record_line(pid, observations=(), **extra):
    rec = {"id": pid, "birth_date": "1950-02-03", "sex": "male", "race": "Asian",
           "observations": list(observations)}
    rec.update(extra)
    return json.dumps(rec)


@pytest.fixture
def spec():
    return CohortSpec()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
