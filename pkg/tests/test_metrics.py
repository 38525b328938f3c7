import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nephra.cohort import Status
from nephra.metrics import (FULL_SLICE_NAME, Slice, auc_report, auc_rows_from_csv, default_slices,
                            eligibility_report, eligibility_row, eligibility_rows_from_csv, midranks,
                            render_auc, render_eligibility, roc_auc, rows_to_csv)

from conftest import labeled, patient
from oracles import doubled_pair_count, pairwise_auc


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert roc_auc([0.1, 0.2], [0, 0]) is None
    assert roc_auc([], []) is None
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0])


def test_min_class_count():
    s, y = [0.1, 0.5, 0.7, 0.9], [0, 1, 0, 1]
    assert roc_auc(s, y, min_class_count=2) == 0.75
    assert roc_auc(s, y, min_class_count=3) is None


def test_midranks():
    assert list(midranks([3, 1, 3, 2])) == [3.5, 1.0, 3.5, 2.0]


scores_st = st.lists(st.tuples(st.integers(0, 12), st.integers(0, 1)), min_size=1, max_size=200)


@settings(max_examples=200, deadline=None)
@given(scores_st)
def test_auc_matches_pairwise_oracle(rows):
    s = [a / 4.0 for a, _ in rows]
    y = [b for _, b in rows]
    ours, ref = roc_auc(s, y), pairwise_auc(s, y)
    if ref is None:
        assert ours is None
    else:
        assert abs(ours - ref) < 1e-12
        assert roc_auc(np.exp(np.asarray(s) * 3) + 1, y) == ours
        # negation: complementary pair counts exactly, and 1 - AUC up to one rounding
        neg = roc_auc([-v for v in s], y)
        (u2, m), (u2_neg, _) = doubled_pair_count(ours, y), doubled_pair_count(neg, y)
        assert u2 + u2_neg == 2 * m
        assert abs(neg - (1 - ours)) <= 2.0 ** -52


def _cohort(spec_rows):
    """spec_rows: (sex, race, age, label, excluded)"""
    out = []
    for i, (sex, race, age, label, exc) in enumerate(spec_rows):
        status = Status.EXCLUDED if exc else (Status.POSITIVE if label else Status.NEGATIVE)
        out.append(labeled(patient(f"p{i}", sex=sex, race=race), status, age=age))
    return out


def _random_cohort(rng, n):
    rows = [(rng.choice(["female", "male"]), rng.choice(["AfricanAmerican", "Asian", "White", "Other"]),
             float(rng.uniform(5, 99)), bool(rng.random() < 0.2), bool(rng.random() < 0.05))
            for _ in range(n)]
    return _cohort(rows)


def test_table1_full_row_rendering():
    labels = np.zeros(324685, bool)
    labels[:166] = True
    elig = np.zeros(324685, bool)
    elig[:8] = True
    elig[1000:1000 + 7681 - 8] = True
    row = eligibility_row(FULL_SLICE_NAME, labels, elig)
    assert (row.n_patients, row.n_rf, row.n_eligible, row.n_eligible_rf) == (324685, 166, 7681, 8)
    assert (row.n_noneligible, row.n_noneligible_rf) == (317004, 158)
    assert "2.4%" in render_eligibility([row])
    assert "324685 (166)" in render_eligibility([row]) and "7681 (8)" in render_eligibility([row])


def test_empty_and_all_eligible_slices():
    row = eligibility_row("empty", [], [])
    assert (row.n_patients, row.n_eligible, row.pct_eligible) == (0, 0, 0.0)
    assert "0.0%" in render_eligibility([row])
    row = eligibility_row("all", [1, 0, 0], [1, 1, 1])
    assert row.n_noneligible == 0 and row.n_noneligible_rf == 0 and row.pct_eligible == 100.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200))
def test_eligibility_identities(seed, n):
    rng = np.random.default_rng(seed)
    cohort = _random_cohort(rng, n)
    elig = list(rng.random(n) < 0.3)
    rows = eligibility_report(cohort, elig)
    assert [r.slice for r in rows] == [s.name for s in default_slices()]
    live = [lp for lp in cohort if lp.status is not Status.EXCLUDED]
    assert rows[0].n_patients == len(live)
    for r in rows:
        assert r.n_eligible + r.n_noneligible == r.n_patients
        assert r.n_eligible_rf + r.n_noneligible_rf == r.n_rf
        assert r.pct_eligible == (100.0 * r.n_eligible / r.n_patients if r.n_patients else 0.0)
    by = {r.slice: r for r in rows}
    assert by["Gender: Female"].n_patients + by["Gender: Male"].n_patients == rows[0].n_patients


def test_default_slices_layout():
    names = [s.name for s in default_slices()]
    assert names[0] == FULL_SLICE_NAME
    assert "Race: African American" in names and "Age: 60-70" in names
    assert names[-1] == "Age: 80-90" and "Age: 10-20" not in names


def test_auc_report_columns():
    rows = [("female", "Asian", 45.0, 1, False), ("female", "Asian", 45.0, 0, False),
            ("male", "White", 65.0, 1, False), ("male", "White", 65.0, 0, False),
            ("male", "White", 62.0, 0, False), ("female", "White", 33.0, 1, True)]
    cohort = _cohort(rows)
    model = [0.9, 0.2, 0.8, 0.1, 0.3, 0.5]
    elig = [False, False, True, True, True, False]
    tangri = [None, None, 0.05, 0.01, 0.2, None]
    out = {r.slice: r for r in auc_report(cohort, model, tangri, elig)}
    full = out[FULL_SLICE_NAME]
    assert full.auc_model_all == 1.0
    assert full.auc_tangri_eligible == 0.5
    assert full.auc_model_eligible == 1.0 and full.auc_model_noneligible == 1.0
    asian = out["Race: Asian"]
    assert asian.auc_tangri_eligible is None and asian.auc_model_eligible is None
    assert "N/A" in render_auc(list(out.values()))
    # rank-preserving transform of positive scores leaves every row unchanged
    cubed = auc_report(cohort, [m ** 3 for m in model], tangri, elig)
    assert cubed == list(out.values())


def test_auc_report_perfect_and_validation():
    cohort = _cohort([("male", "White", 50.0, y, False) for y in (0, 1, 0, 1)])
    rows = auc_report(cohort, [0, 1, 0, 1], [None] * 4, [False] * 4)
    assert rows[0].auc_model_all == 1.0
    with pytest.raises(ValueError):
        auc_report(cohort, [0.1] * 3, [None] * 4, [False] * 4)
    with pytest.raises(ValueError, match="Tangri"):
        auc_report(cohort, [0.1] * 4, [None] * 4, [True] * 4)


def test_csv_roundtrip_is_exact():
    rng = np.random.default_rng(5)
    cohort = _random_cohort(rng, 150)
    elig = list(rng.random(150) < 0.4)
    model = list(rng.random(150))
    tangri = [float(v) if e else None for v, e in zip(rng.random(150), elig)]
    e_rows = eligibility_report(cohort, elig)
    a_rows = auc_report(cohort, model, tangri, elig)
    assert eligibility_rows_from_csv(rows_to_csv(e_rows)) == e_rows
    assert auc_rows_from_csv(rows_to_csv(a_rows)) == a_rows


def test_custom_slices():
    cohort = _cohort([("male", "White", 50.0, 1, False), ("female", "White", 50.0, 0, False)])
    rows = eligibility_report(cohort, [True, False], [Slice("men", lambda lp: lp.patient.sex == "male")])
    assert len(rows) == 1 and rows[0].n_patients == 1 and rows[0].n_eligible_rf == 1
