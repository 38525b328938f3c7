"""ROC AUC with midrank ties, subgroup slices, and the eligibility / AUC report tables."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .cohort import LabeledPatient, Status


def midranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    n = len(v)
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], n]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def roc_auc(scores, labels, min_class_count: int = 1) -> Optional[float]:
    """Mann-Whitney AUC; ties count one half.  ``None`` when a class has too few members."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"length mismatch: {s.shape} scores vs {y.shape} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos < max(min_class_count, 1) or n_neg < max(min_class_count, 1):
        return None
    r = midranks(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ----------------------------------------------------------------- slices

@dataclass(frozen=True)
class Slice:
    name: str
    predicate: Callable[[LabeledPatient], bool]


FULL_SLICE_NAME = "Full validation set"
_RACE_LABELS = (("AfricanAmerican", "African American"), ("Asian", "Asian"), ("White", "White"))


def _age_pred(lo, hi):
    return lambda lp: lo <= lp.age_years < hi


def default_slices() -> list:
    """Full set, sex, race, and the decades 20-90."""
    out = [Slice(FULL_SLICE_NAME, lambda lp: True),
           Slice("Gender: Female", lambda lp: lp.patient.sex == "female"),
           Slice("Gender: Male", lambda lp: lp.patient.sex == "male")]
    for code, label in _RACE_LABELS:
        out.append(Slice(f"Race: {label}", lambda lp, c=code: lp.patient.race == c))
    for lo in range(20, 90, 10):
        out.append(Slice(f"Age: {lo}-{lo + 10}", _age_pred(lo, lo + 10)))
    return out


@dataclass(frozen=True)
class EligibilityRow:
    slice: str
    n_patients: int
    n_rf: int
    n_eligible: int
    n_eligible_rf: int
    pct_eligible: float
    n_noneligible: int
    n_noneligible_rf: int


@dataclass(frozen=True)
class AucRow:
    slice: str
    auc_model_all: Optional[float]
    auc_tangri_eligible: Optional[float]
    auc_model_eligible: Optional[float]
    auc_model_noneligible: Optional[float]


def _included(cohort):
    return [i for i, lp in enumerate(cohort) if lp.status is not Status.EXCLUDED]


def eligibility_row(name: str, labels, eligible) -> EligibilityRow:
    labels = np.asarray(labels, dtype=bool)
    eligible = np.asarray(eligible, dtype=bool)
    n = int(labels.size)
    n_rf = int(labels.sum())
    n_el = int(eligible.sum())
    n_el_rf = int((labels & eligible).sum())
    pct = 100.0 * n_el / n if n else 0.0
    return EligibilityRow(name, n, n_rf, n_el, n_el_rf, pct, n - n_el, n_rf - n_el_rf)


def eligibility_report(cohort: Sequence[LabeledPatient], eligibility: Sequence[bool],
                       slices: Optional[Sequence[Slice]] = None) -> list:
    """One Table-1 style row per slice over non-excluded patients."""
    if len(eligibility) != len(cohort):
        raise ValueError("eligibility must have one entry per cohort member")
    slices = default_slices() if slices is None else slices
    keep = _included(cohort)
    labels = np.array([cohort[i].label for i in keep], dtype=bool)
    elig = np.array([bool(eligibility[i]) for i in keep], dtype=bool)
    rows = []
    for sl in slices:
        mask = np.array([sl.predicate(cohort[i]) for i in keep], dtype=bool).reshape(-1)
        rows.append(eligibility_row(sl.name, labels[mask], elig[mask]))
    return rows


def auc_report(cohort: Sequence[LabeledPatient], model_scores, tangri_scores, eligibility,
               slices: Optional[Sequence[Slice]] = None, min_class_count: int = 1) -> list:
    """Four Table-2 AUC columns per slice.  Scores are per cohort member; excluded members are skipped."""
    n = len(cohort)
    if not (len(model_scores) == len(tangri_scores) == len(eligibility) == n):
        raise ValueError("scores and eligibility must have one entry per cohort member")
    slices = default_slices() if slices is None else slices
    keep = _included(cohort)
    labels = np.array([cohort[i].label for i in keep], dtype=int)
    model = np.array([model_scores[i] for i in keep], dtype=float)
    if np.isnan(model).any():
        raise ValueError("model scores must be defined for every non-excluded patient")
    elig = np.array([bool(eligibility[i]) for i in keep], dtype=bool)
    tangri = np.array([np.nan if tangri_scores[i] is None else tangri_scores[i] for i in keep], dtype=float)
    if np.isnan(tangri[elig]).any():
        raise ValueError("every eligible patient needs a Tangri score")
    rows = []
    for sl in slices:
        mask = np.array([sl.predicate(cohort[i]) for i in keep], dtype=bool)
        el, ne = mask & elig, mask & ~elig
        rows.append(AucRow(
            sl.name,
            roc_auc(model[mask], labels[mask], min_class_count),
            roc_auc(tangri[el], labels[el], min_class_count),
            roc_auc(model[el], labels[el], min_class_count),
            roc_auc(model[ne], labels[ne], min_class_count),
        ))
    return rows


# ------------------------------------------------------------- rendering

def rows_to_csv(rows: Sequence) -> str:
    """Unrounded CSV; missing AUCs are written as ``NA``."""
    if not rows:
        return ""
    buf = io.StringIO()
    names = [f.name for f in fields(rows[0])]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow(["NA" if v is None else (repr(v) if isinstance(v, float) else v)
                    for v in asdict(r).values()])
    return buf.getvalue()


def _opt_float(text: str) -> Optional[float]:
    return None if text in ("NA", "") else float(text)


def eligibility_rows_from_csv(text: str) -> list:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(EligibilityRow(rec["slice"], int(rec["n_patients"]), int(rec["n_rf"]),
                                  int(rec["n_eligible"]), int(rec["n_eligible_rf"]),
                                  float(rec["pct_eligible"]), int(rec["n_noneligible"]),
                                  int(rec["n_noneligible_rf"])))
    return out


def auc_rows_from_csv(text: str) -> list:
    return [AucRow(rec["slice"], _opt_float(rec["auc_model_all"]), _opt_float(rec["auc_tangri_eligible"]),
                   _opt_float(rec["auc_model_eligible"]), _opt_float(rec["auc_model_noneligible"]))
            for rec in csv.DictReader(io.StringIO(text))]


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(header[j]), *(len(r[j]) for r in body)) if body else len(header[j])
              for j in range(len(header))]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def render_eligibility(rows: Sequence[EligibilityRow]) -> str:
    header = ("Cohort", "Patients (had RF)", "Tangri Eligibles (had RF)",
              "Tangri-Eligible Percentage", "Tangri non-Elig (had RF)")
    body = [(r.slice, f"{r.n_patients} ({r.n_rf})", f"{r.n_eligible} ({r.n_eligible_rf})",
             f"{r.pct_eligible:.1f}%", f"{r.n_noneligible} ({r.n_noneligible_rf})") for r in rows]
    return _table(header, body)


def _fmt_auc(v: Optional[float]) -> str:
    return "N/A" if v is None else f"{v:.3f}"


def render_auc(rows: Sequence[AucRow]) -> str:
    header = ("Cohort", "AUC of M", "AUC of Tangri on Tangri-eligible patients",
              "AUC of M on Tangri-eligible patients", "AUC of M on Tangri-non-eligible patients")
    body = [(r.slice, _fmt_auc(r.auc_model_all), _fmt_auc(r.auc_tangri_eligible),
             _fmt_auc(r.auc_model_eligible), _fmt_auc(r.auc_model_noneligible)) for r in rows]
    return _table(header, body)
