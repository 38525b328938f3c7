"""In-process pipeline runs shared by the synthetic-data tests."""
import json

import numpy as np

from nephra.codes import builtin_sets
from nephra.cohort import build_cohort, parse_record, split
from nephra.features import aggregate, encode, fit_feature_space, to_csr
from nephra.metrics import roc_auc
from nephra.optimizer import predict_proba, train
from nephra.synth import iter_records
from nephra.tangri import score_patient


def generate_patients(cfg, seed):
    patients, truth = [], []
    for rec, tr in iter_records(cfg, seed):
        # round-trip through JSON so the reader sees exactly what the writer emits
        patients.append(parse_record(json.loads(json.dumps(rec)), strict=True)[0])
        truth.append(tr)
    return patients, truth


def model_and_tangri_auc(cfg, seed, lam=0.001):
    patients, _ = generate_patients(cfg, seed)
    spec = cfg.cohort_spec
    sets = builtin_sets()
    cohort = build_cohort(patients, spec, sets.RF_ICD10, sets.RF_CPT)
    tr, va = split(cohort, 0.5, seed=0)
    space = fit_feature_space([aggregate(lp, spec) for lp in tr])

    def xy(members):
        X = to_csr([encode(aggregate(lp, spec), space) for lp in members], space.dims)
        return X, np.array([lp.label for lp in members], dtype=float)

    X, y = xy(tr)
    Xv, yv = xy(va)
    model = train(X, y, lam)
    results = [score_patient(lp.patient, spec) for lp in va]
    el = [i for i, r in enumerate(results) if r.eligible]
    return {
        "model_auc": roc_auc(predict_proba(model, Xv), yv),
        "tangri_auc": roc_auc([results[i].probability for i in el], yv[el]),
        "eligible_fraction": len(el) / len(va),
        "eligible_positives": int(yv[el].sum()),
    }
