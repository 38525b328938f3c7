"""Command line pipeline: generate -> build-cohort -> featurize -> train -> score-tangri -> audit."""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import IO

import numpy as np

from . import __version__
from .codes import builtin_sets, read_code_set_file
from .cohort import (DEFAULT_TRAIN_FRACTION, CohortSpec, Status, assign_splits, build_cohort,
                     ingest, ingest_labeled, labeled_to_dict, write_records)
from .features import FeatureConfig, FeatureSpace, aggregate, encode, fit_feature_space, to_csr
from .metrics import (auc_report, auc_rows_from_csv, eligibility_report, eligibility_rows_from_csv,
                      render_auc, render_eligibility, rows_to_csv)
from .optimizer import PAPER_LAMBDA_GRID, Model, TrainConfig, predict_proba, sweep
from .synth import SynthConfig, generate, parse_config
from .tangri import score_patient

log = logging.getLogger("nephra")

THREADS_ENV = "NEPHRA_THREADS"
# arguments that never change outputs and stay out of the config digest
_NON_CONFIG = {"command", "func", "threads", "verbose"}


class DataError(Exception):
    """Bad input data or configuration; maps to exit code 1."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_digest(args) -> str:
    skip = _NON_CONFIG | {"_paths"} | set(getattr(args, "_paths", ()))
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path: Path, args, inputs: dict, outputs: dict, seed=None, **extra) -> None:
    """Record the run: paths are stored by basename so manifests compare across directories."""
    manifest = {
        "subcommand": args.command,
        "tool_version": __version__,
        "seed": seed,
        "config_digest": _config_digest(args),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs.values() if p},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs.values()},
    }
    manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _open_out(path) -> IO[str]:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return open(p, "w", encoding="utf-8", newline="")


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def _spec(args) -> CohortSpec:
    return CohortSpec(args.obs_start, args.obs_end, args.label_start, args.label_end,
                      getattr(args, "icd_min_instances", 2), getattr(args, "cpt_min_instances", 1))


def _load_cohort(path, strict=False) -> list:
    with open(path, encoding="utf-8") as fh:
        return ingest_labeled(fh, strict=strict)


def _split_members(cohort, name):
    """Members of one split; a cohort without split tags is used whole."""
    live = [lp for lp in cohort if lp.status is not Status.EXCLUDED]
    if name == "all" or not any(lp.split for lp in live):
        return live
    return [lp for lp in live if lp.split == name]


def _encode_all(members, spec, space):
    vectors = [encode(aggregate(lp, spec), space) for lp in members]
    X = to_csr(vectors, space.dims)
    y = np.array([lp.label for lp in members], dtype=float)
    return X, y


# ------------------------------------------------------------ subcommands

def cmd_generate(args) -> int:
    if args.config:
        cfg = parse_config(_read_text(args.config))
    else:
        cfg = SynthConfig()
    if args.n_patients is not None:
        from dataclasses import replace
        cfg = replace(cfg, n_patients=args.n_patients)
        cfg.validate()
    out = Path(args.out)
    with _open_out(out) as fh:
        if args.truth_out:
            with _open_out(args.truth_out) as tfh:
                counts = generate(cfg, args.seed, fh, tfh, threads=args.threads)
        else:
            counts = generate(cfg, args.seed, fh, threads=args.threads)
    outputs = {"out": out}
    if args.truth_out:
        outputs["truth"] = Path(args.truth_out)
    write_manifest(_manifest_path(out), args, {"config": args.config}, outputs, seed=args.seed)
    log.info("generated %(patients)d patients (%(positive)d positive, %(eligible)d lab-eligible, "
             "%(prevalent)d prevalent)", counts)
    return 0


def cmd_build_cohort(args) -> int:
    sets = builtin_sets()
    icd = read_code_set_file(_read_text(args.icd_codes)) if args.icd_codes else sets.RF_ICD10
    cpt = read_code_set_file(_read_text(args.cpt_codes)) if args.cpt_codes else sets.RF_CPT
    with open(args.patients, encoding="utf-8") as fh:
        patients = ingest(fh, strict=args.strict)
    cohort = build_cohort(patients, _spec(args), icd, cpt)
    if any(lp.status is not Status.EXCLUDED for lp in cohort):
        cohort = assign_splits(cohort, args.train_fraction, args.seed)
    out = Path(args.out)
    with _open_out(out) as fh:
        write_records((labeled_to_dict(lp) for lp in cohort), fh)
    write_manifest(_manifest_path(out), args,
                   {"patients": args.patients, "icd": args.icd_codes, "cpt": args.cpt_codes},
                   {"out": out}, seed=args.seed)
    n_pos = sum(lp.status is Status.POSITIVE for lp in cohort)
    n_exc = sum(lp.status is Status.EXCLUDED for lp in cohort)
    log.info("cohort: %d patients, %d positive, %d excluded", len(cohort), n_pos, n_exc)
    return 0


def cmd_featurize(args) -> int:
    spec = _spec(args)
    cohort = _load_cohort(args.cohort)
    train = _split_members(cohort, "train")
    if not train:
        raise DataError("cohort has no training patients")
    config = FeatureConfig(min_support=args.min_support,
                           count_thresholds=tuple(args.count_thresholds),
                           lab_z_edges=tuple(args.lab_z_edges),
                           age_bin_width=args.age_bin_width,
                           include_demographics=args.include_demographics)
    space = fit_feature_space([aggregate(lp, spec) for lp in train], config)
    out = Path(args.out)
    _open_out(out).close()
    out.write_text(space.to_text(), encoding="utf-8")
    outputs = {"out": out}
    if args.out_vectors:
        vec = Path(args.out_vectors)
        with _open_out(vec) as fh:
            for lp in cohort:
                if lp.status is Status.EXCLUDED:
                    continue
                v = encode(aggregate(lp, spec), space)
                fh.write(f"{lp.id} {lp.label} {lp.split or '-'} {' '.join(map(str, v.active))}".rstrip())
                fh.write("\n")
        outputs["vectors"] = vec
    write_manifest(_manifest_path(out), args, {"cohort": args.cohort}, outputs)
    log.info("feature space: %d columns from %d training patients", space.dims, len(train))
    return 0


def _parse_class_weights(text: str):
    if text == "balanced":
        return "balanced"
    try:
        wp, wn = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'balanced' or '<w+>,<w->'") from None
    return (wp, wn)


def cmd_train(args) -> int:
    spec = _spec(args)
    space = FeatureSpace.from_text(_read_text(args.space))
    cohort = _load_cohort(args.cohort)
    train = _split_members(cohort, "train")
    valid = _split_members(cohort, "validation")
    Xt, yt = _encode_all(train, spec, space)
    Xv, yv = _encode_all(valid, spec, space)
    config = TrainConfig(lambda_grid=tuple(args.lambda_grid), max_iters=args.max_iters, tol=args.tol,
                         class_weights=args.class_weights, accelerated=args.accelerated,
                         seed=args.seed, threads=args.threads)
    model, table = sweep(Xt, yt, Xv, yv, config, space_version=space.version)
    out = Path(args.out)
    _open_out(out).close()
    out.write_text(model.to_text(), encoding="utf-8")
    table_path = Path(args.table_out) if args.table_out else out.with_name(out.name + ".sweep.csv")
    table_path.write_text(rows_to_csv(table), encoding="utf-8")
    write_manifest(_manifest_path(out), args, {"cohort": args.cohort, "space": args.space},
                   {"model": out, "table": table_path}, seed=args.seed)
    log.info("selected lambda=%g (%d nonzero weights, validation AUC %s)",
             model.lam, model.nonzeros, next(r.valid_auc for r in table if r.lam == model.lam))
    return 0


def _tangri_rows(patients, spec):
    for p in patients:
        yield score_patient(p, spec)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_score_tangri(args) -> int:
    spec = _spec(args)
    with open(args.patients, encoding="utf-8") as fh:
        patients = ingest(fh, strict=args.strict)
    out = Path(args.out)
    with _open_out(out) as fh:
        fh.write("id,eligible,egfr,acr_mg_g,tangri_p\n")
        for r in _tangri_rows(patients, spec):
            fh.write(f"{r.patient_id},{int(r.eligible)},{_fmt(r.egfr)},{_fmt(r.acr_mg_g)},{_fmt(r.probability)}\n")
    write_manifest(_manifest_path(out), args, {"patients": args.patients}, {"out": out})
    return 0


def read_tangri_csv(text: str) -> dict:
    import csv
    import io
    out = {}
    for rec in csv.DictReader(io.StringIO(text)):
        p = rec["tangri_p"]
        out[rec["id"]] = (rec["eligible"] == "1", float(p) if p else None)
    return out


def cmd_audit(args) -> int:
    spec = _spec(args)
    space = FeatureSpace.from_text(_read_text(args.space))
    model = Model.from_text(_read_text(args.model))
    if model.space_version and model.space_version != space.version:
        raise DataError(f"model was trained on feature space {model.space_version}, "
                        f"but {args.space} is version {space.version}")
    if model.dims != space.dims:
        raise DataError(f"model has {model.dims} weights but the feature space has {space.dims} columns")
    cohort = _load_cohort(args.cohort)
    members = _split_members(cohort, args.split)
    if not members:
        raise DataError(f"no non-excluded patients in split {args.split!r}")
    X, _ = _encode_all(members, spec, space)
    model_scores = predict_proba(model, X)
    if args.tangri:
        table = read_tangri_csv(_read_text(args.tangri))
        missing = [lp.id for lp in members if lp.id not in table]
        if missing:
            raise DataError(f"{len(missing)} patients missing from {args.tangri}, e.g. {missing[0]}")
        elig = [table[lp.id][0] for lp in members]
        tangri = [table[lp.id][1] for lp in members]
    else:
        results = [score_patient(lp.patient, spec) for lp in members]
        elig = [r.eligible for r in results]
        tangri = [r.probability for r in results]
    e_rows = eligibility_report(members, elig)
    a_rows = auc_report(members, list(model_scores), tangri, elig, min_class_count=args.min_class_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "eligibility_csv": out / "eligibility.csv",
        "auc_csv": out / "auc.csv",
        "table1": out / "table1.txt",
        "table2": out / "table2.txt",
    }
    files["eligibility_csv"].write_text(rows_to_csv(e_rows), encoding="utf-8")
    files["auc_csv"].write_text(rows_to_csv(a_rows), encoding="utf-8")
    files["table1"].write_text(render_eligibility(e_rows), encoding="utf-8")
    files["table2"].write_text(render_auc(a_rows), encoding="utf-8")
    inputs = {"cohort": args.cohort, "model": args.model, "space": args.space, "tangri": args.tangri}
    digest = hashlib.sha256("\n".join(lp.id for lp in members).encode()).hexdigest()
    write_manifest(out / "manifest.json", args, inputs, files, cohort_digest=digest)
    return 0


def cmd_report(args) -> int:
    src = Path(args.input)
    text = []
    el = src / "eligibility.csv"
    au = src / "auc.csv"
    if not el.exists() and not au.exists():
        raise DataError(f"{src} holds neither eligibility.csv nor auc.csv")
    if el.exists():
        text.append(render_eligibility(eligibility_rows_from_csv(_read_text(el))))
    if au.exists():
        text.append(render_auc(auc_rows_from_csv(_read_text(au))))
    out = "\n".join(text)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return 0


# ------------------------------------------------------------ parser

def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ISO date {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _add_common(p, windows=True):
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default: ${THREADS_ENV} or all cores); never changes results")
    p.add_argument("-v", "--verbose", action="store_true")
    if windows:
        s = CohortSpec()
        p.add_argument("--obs-start", type=_date, default=s.obs_start)
        p.add_argument("--obs-end", type=_date, default=s.obs_end)
        p.add_argument("--label-start", type=_date, default=s.label_start)
        p.add_argument("--label-end", type=_date, default=s.label_end)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nephra", description=__doc__)
    parser.add_argument("--version", action="version", version=f"nephra {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic patient stream")
    p.add_argument("--config", help="key-value synthetic cohort config file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", help="ground-truth latent sidecar (CSV)")
    p.add_argument("--n-patients", type=int, help="override n_patients from the config")
    _add_common(p, windows=False)
    p.set_defaults(func=cmd_generate, _paths=("config", "out", "truth_out"))

    p = sub.add_parser("build-cohort", help="label patients and split train/validation")
    p.add_argument("--patients", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, default=DEFAULT_TRAIN_FRACTION)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="reject unknown record fields")
    p.add_argument("--icd-codes", help="outcome ICD-10 code-set file (default: built-in list)")
    p.add_argument("--cpt-codes", help="outcome CPT code-set file (default: built-in list)")
    p.add_argument("--icd-min-instances", type=int, default=2)
    p.add_argument("--cpt-min-instances", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_build_cohort, _paths=("patients", "out", "icd_codes", "cpt_codes"))

    p = sub.add_parser("featurize", help="fit the binned feature space on the training split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="feature-space artifact")
    p.add_argument("--out-vectors", help="optional encoded vectors: id label split col...")
    p.add_argument("--min-support", type=int, default=10)
    p.add_argument("--count-thresholds", type=_int_list, default=[0, 2, 10])
    p.add_argument("--lab-z-edges", type=_float_list, default=[-2.0, -1.0, 1.0, 2.0])
    p.add_argument("--age-bin-width", type=int, default=10)
    p.add_argument("--include-demographics", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_featurize, _paths=("cohort", "out", "out_vectors"))

    p = sub.add_parser("train", help="lambda sweep of L1 logistic regression")
    p.add_argument("--cohort", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table-out", help="per-lambda table (default: <out>.sweep.csv)")
    p.add_argument("--lambda-grid", type=_float_list, default=list(PAPER_LAMBDA_GRID))
    p.add_argument("--max-iters", type=int, default=TrainConfig.max_iters)
    p.add_argument("--tol", type=float, default=TrainConfig.tol)
    p.add_argument("--class-weights", type=_parse_class_weights, default="balanced")
    p.add_argument("--accelerated", action="store_true", help="FISTA with monotone restarts")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_train, _paths=("cohort", "space", "out", "table_out"))

    p = sub.add_parser("score-tangri", help="Tangri eligibility and score per patient (CSV)")
    p.add_argument("--patients", required=True, help="patient or labeled cohort stream")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_score_tangri, _paths=("patients", "out"))

    p = sub.add_parser("audit", help="eligibility and subgroup AUC reports")
    p.add_argument("--cohort", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--tangri", help="score-tangri CSV (default: score in-process)")
    p.add_argument("--split", choices=("validation", "train", "all"), default="validation")
    p.add_argument("--min-class-count", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_audit, _paths=("cohort", "model", "space", "out", "tangri"))

    p = sub.add_parser("report", help="render audit CSVs as aligned tables")
    p.add_argument("--in", dest="input", required=True, help="audit report directory")
    p.add_argument("--out", help="write here instead of stdout")
    _add_common(p, windows=False)
    p.set_defaults(func=cmd_report, _paths=("input", "out"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ValueError, OSError) as exc:
        print(f"nephra {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
