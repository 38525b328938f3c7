"""Seeded synthetic EHR cohorts with planted risk and subgroup-skewed lab availability.

Generation runs in fixed-size patient blocks.  Every block draws from its own
``SeedSequence(seed, spawn_key=(phase, block))`` stream, so output does not
depend on how many threads process the blocks.

Two latent quantities drive each patient:

* kidney-failure risk, a logistic function of age, latent renal function,
  comorbidity burden and care access, with an intercept solved so that the
  population mean hits ``rf_base_rate``;
* eGFR+ACR availability, a logistic function of subgroup offsets, risk and
  care access, raked so that subgroup and full-population rates hit the
  configured eligibility targets.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import IO, Iterator, Mapping, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .codes import builtin_sets
from .cohort import RACES, CohortSpec

BLOCK_SIZE = 8192

DEFAULT_RACE_MIX = {"AfricanAmerican": 0.0935, "Asian": 0.0142, "White": 0.615, "Other": 0.2773}
# decade lower bound -> weight; 20-80 follow the reference cohort's age rows
DEFAULT_AGE_MIX = {10: 0.100, 20: 0.090, 30: 0.120, 40: 0.138, 50: 0.178,
                   60: 0.178, 70: 0.114, 80: 0.052, 90: 0.030}
DEFAULT_ELIGIBILITY = {
    "full": 0.024,
    "sex:female": 0.021, "sex:male": 0.028,
    "race:AfricanAmerican": 0.040, "race:Asian": 0.026, "race:White": 0.021,
    "age:20": 0.006, "age:30": 0.011, "age:40": 0.021, "age:50": 0.031,
    "age:60": 0.037, "age:70": 0.040, "age:80": 0.035,
}

# risk-bearing diagnosis codes, none of them in the outcome definition
COMORBIDITY_CODES = ("E1122", "I129", "I5022", "E785", "I10", "D631", "E875", "N2581")
CKD_CODES = ("N183", "N184", "N185")
NOISE_LAB_UNIT = "U/L"


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 10000
    obs_start: dt.date = dt.date(2015, 1, 1)
    obs_end: dt.date = dt.date(2016, 1, 1)
    label_start: dt.date = dt.date(2016, 4, 1)
    label_end: dt.date = dt.date(2017, 4, 1)
    female_fraction: float = 0.611
    race_mix: Mapping = field(default_factory=lambda: dict(DEFAULT_RACE_MIX))
    age_mix: Mapping = field(default_factory=lambda: dict(DEFAULT_AGE_MIX))
    rf_base_rate: float = 5.11e-4
    prevalent_rate: float = 0.002
    eligibility_targets: Mapping = field(default_factory=lambda: dict(DEFAULT_ELIGIBILITY))
    # latent risk model (log-odds per unit; age per decade from 50)
    risk_age: float = 0.35
    risk_renal: float = 1.0
    risk_comorbidity: float = 1.3
    risk_access: float = 0.0
    # lab availability model (log-odds per SD of risk / per unit access)
    avail_risk: float = 0.6
    avail_access: float = 0.5
    # lab values
    egfr_mean: float = 85.0
    egfr_renal: float = -22.0
    egfr_noise: float = 10.0
    acr_log_mean: float = 2.8
    acr_renal: float = 1.0
    acr_noise: float = 0.7
    acr_mmol_fraction: float = 0.15
    egfr_only_rate: float = 0.08
    acr_only_rate: float = 0.01
    late_lab_rate: float = 0.01
    # diagnosis/procedure codes
    comorbidity_base: float = -1.2
    comorbidity_slope: float = 0.9
    ckd_base: float = -2.5
    ckd_slope: float = 1.1
    n_noise_icd: int = 400
    n_noise_cpt: int = 150
    n_noise_loinc: int = 40
    noise_rate: float = 4.0
    noise_lab_rate: float = 0.8
    post_window_rate: float = 1.0
    cpt_outcome_fraction: float = 0.3
    near_miss_rate: float = 5e-4

    def validate(self) -> None:
        def prob(name, v, open_=True):
            ok = 0 < v < 1 if open_ else 0 <= v <= 1
            if not ok:
                raise SynthConfigError(f"{name}={v} is not a valid probability")

        if self.n_patients < 1:
            raise SynthConfigError("n_patients must be >= 1")
        try:
            CohortSpec(self.obs_start, self.obs_end, self.label_start, self.label_end)
        except ValueError as exc:
            raise SynthConfigError(str(exc)) from None
        prob("rf_base_rate", self.rf_base_rate)
        if self.rf_base_rate * self.n_patients < 1:
            raise SynthConfigError(
                f"rf_base_rate * n_patients = {self.rf_base_rate * self.n_patients:.3g} < 1: "
                "expected positive count is below one patient")
        for name in ("female_fraction", "prevalent_rate", "acr_mmol_fraction", "egfr_only_rate",
                     "acr_only_rate", "late_lab_rate", "cpt_outcome_fraction", "near_miss_rate"):
            prob(name, getattr(self, name), open_=False)
        for key, target in self.eligibility_targets.items():
            prob(f"eligibility_targets[{key}]", target)
            kind, _, group = key.partition(":")
            if kind == "full":
                continue
            if kind == "sex" and group in ("female", "male"):
                continue
            if kind == "race" and group in RACES:
                continue
            if kind == "age" and group.isdigit() and int(group) in self.age_mix:
                continue
            raise SynthConfigError(f"unknown eligibility target key {key!r}")
        if "full" not in self.eligibility_targets:
            raise SynthConfigError("eligibility_targets needs a 'full' entry")
        if self.eligibility_targets["full"] * self.n_patients < 1:
            raise SynthConfigError("eligibility_targets[full] * n_patients < 1")
        for name, mix, allowed in (("race_mix", self.race_mix, set(RACES)),
                                   ("age_mix", self.age_mix, None)):
            if not mix or any(v < 0 for v in mix.values()) or sum(mix.values()) <= 0:
                raise SynthConfigError(f"{name} must have non-negative weights with positive sum")
            if allowed is not None and set(mix) - allowed:
                raise SynthConfigError(f"{name} has unknown keys {sorted(set(mix) - allowed)}")
        for name in ("n_noise_icd", "n_noise_cpt", "n_noise_loinc"):
            if getattr(self, name) < 1:
                raise SynthConfigError(f"{name} must be >= 1")

    @property
    def cohort_spec(self) -> CohortSpec:
        return CohortSpec(self.obs_start, self.obs_end, self.label_start, self.label_end)


# ------------------------------------------------------------ config file

def _format_value(v) -> str:
    if isinstance(v, dt.date):
        return v.isoformat()
    return repr(v) if isinstance(v, float) else str(v)


def config_to_text(cfg: SynthConfig) -> str:
    """Serialize as ``key = value`` lines; maps are flattened to ``map.key = value``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, Mapping):
            for k in sorted(v, key=str):
                lines.append(f"{f.name}.{k} = {_format_value(v[k])}")
        else:
            lines.append(f"{f.name} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> SynthConfig:
    """Read the key-value config format.  Keys not given keep their defaults;
    giving any entry of a map replaces that whole map."""
    types = {f.name: f for f in fields(SynthConfig)}
    base = SynthConfig()
    scalars: dict = {}
    maps: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise SynthConfigError(f"config line {lineno}: expected 'key = value'")
        name, dot, sub = key.partition(".")
        if name not in types:
            raise SynthConfigError(f"config line {lineno}: unknown key {name!r}")
        default = getattr(base, name)
        try:
            if dot:
                if not isinstance(default, Mapping):
                    raise SynthConfigError(f"config line {lineno}: {name!r} is not a map")
                map_key = int(sub) if name == "age_mix" else sub
                maps.setdefault(name, {})[map_key] = float(value)
            elif isinstance(default, Mapping):
                raise SynthConfigError(f"config line {lineno}: {name!r} needs '{name}.<key> = value'")
            elif isinstance(default, dt.date):
                scalars[name] = dt.date.fromisoformat(value)
            elif isinstance(default, int):
                scalars[name] = int(value)
            else:
                scalars[name] = float(value)
        except ValueError as exc:
            raise SynthConfigError(f"config line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = replace(base, **scalars, **maps)
    cfg.validate()
    return cfg


# ------------------------------------------------------------ vocabularies

def _noise_vocab(cfg: SynthConfig):
    letters = "ABCDFGHJKLM"
    icd = tuple(f"{letters[k % len(letters)]}{10 + (k // len(letters)) % 90:02d}{k % 7}"
                for k in range(cfg.n_noise_icd))
    cpt = tuple(f"{70000 + 17 * k}" for k in range(cfg.n_noise_cpt))
    loinc = tuple(f"{90000 + k}-{k % 10}" for k in range(cfg.n_noise_loinc))
    sets = builtin_sets()
    assert not set(icd) & sets.RF_ICD10.codes and not set(cpt) & sets.RF_CPT.codes
    return icd, cpt, loinc


def _zipf(n: int, a: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


# ------------------------------------------------------------ latents

@dataclass
class _Latents:
    female: np.ndarray
    race: np.ndarray      # index into RACES
    decade: np.ndarray
    age: np.ndarray
    renal: np.ndarray
    comorbidity: np.ndarray
    access: np.ndarray
    prevalent: np.ndarray
    u_rf: np.ndarray
    u_elig: np.ndarray


def _block_bounds(n: int):
    return [(a, min(a + BLOCK_SIZE, n)) for a in range(0, n, BLOCK_SIZE)]


def _rng(seed: int, phase: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(phase, block))))


def _draw_latents(cfg: SynthConfig, seed: int, block: int, size: int) -> _Latents:
    rng = _rng(seed, 0, block)
    race_p = np.array([cfg.race_mix.get(r, 0.0) for r in RACES], dtype=float)
    decades = np.array(sorted(cfg.age_mix))
    age_p = np.array([cfg.age_mix[d] for d in decades], dtype=float)
    female = rng.random(size) < cfg.female_fraction
    race = rng.choice(len(RACES), size=size, p=race_p / race_p.sum())
    decade = decades[rng.choice(len(decades), size=size, p=age_p / age_p.sum())]
    age = decade + rng.random(size) * 10.0
    renal = rng.standard_normal(size) + 0.25 * (age - 50.0) / 10.0
    comorbidity = rng.standard_normal(size) + 0.15 * (age - 50.0) / 10.0
    access = rng.standard_normal(size)
    prevalent = rng.random(size) < cfg.prevalent_rate
    return _Latents(female, race, decade, age, renal, comorbidity, access, prevalent,
                    rng.random(size), rng.random(size))


def _concat(parts) -> _Latents:
    return _Latents(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(_Latents)))


def _risk_eta(cfg: SynthConfig, lat: _Latents) -> np.ndarray:
    return (cfg.risk_age * (lat.age - 50.0) / 10.0 + cfg.risk_renal * lat.renal
            + cfg.risk_comorbidity * lat.comorbidity + cfg.risk_access * lat.access)


def _solve_intercept(eta: np.ndarray, target: float) -> float:
    return brentq(lambda b: float(np.mean(expit(b + eta))) - target, -60.0, 60.0, xtol=1e-13)


def _group_masks(cfg: SynthConfig, lat: _Latents) -> dict:
    masks = {}
    for key in cfg.eligibility_targets:
        kind, _, group = key.partition(":")
        if kind == "sex":
            masks[key] = lat.female if group == "female" else ~lat.female
        elif kind == "race":
            masks[key] = lat.race == RACES.index(group)
        elif kind == "age":
            masks[key] = lat.decade == int(group)
    return masks


@dataclass(frozen=True)
class Calibration:
    risk_intercept: float
    eta_mean: float
    eta_std: float
    avail_intercept: float
    avail_offsets: Mapping


def calibrate(cfg: SynthConfig, lat: _Latents, max_rounds: int = 200) -> Calibration:
    """Solve the risk intercept and rake the availability offsets to their targets."""
    live = ~lat.prevalent
    if not live.any():
        raise SynthConfigError("every generated patient is prevalent; lower prevalent_rate")
    eta = _risk_eta(cfg, lat)
    b_risk = _solve_intercept(eta[live], cfg.rf_base_rate)
    mu, sd = float(eta.mean()), float(eta.std())
    risk_z = (eta - mu) / sd if sd > 0 else np.zeros_like(eta)
    base = cfg.avail_risk * risk_z + cfg.avail_access * lat.access
    masks = {k: m & live for k, m in _group_masks(cfg, lat).items()}
    for key, m in masks.items():
        if not m.any():
            raise SynthConfigError(f"eligibility target {key!r} has no patients at n={cfg.n_patients}")
    offsets = {k: 0.0 for k in masks}
    full = cfg.eligibility_targets["full"]
    targets = _consistent_targets(cfg.eligibility_targets, masks, live)

    # Newton on the group-mean equations; the full population is group 0.
    # Overlapping dimensions make the Jacobian rank-deficient, so steps are least-squares.
    keys = list(masks)
    D = np.column_stack([live] + [masks[k] for k in keys]).astype(float)[live]
    t = np.array([full] + [targets[k] for k in keys])
    sizes = D.sum(axis=0)
    b = base[live]
    theta = np.zeros(D.shape[1])
    for _ in range(max_rounds):
        q = expit(b + D @ theta)
        resid = (D.T @ q) / sizes - t
        if np.max(np.abs(resid)) < 1e-12:
            break
        J = (D.T * (q * (1.0 - q))) @ D / sizes[:, None]
        step = np.linalg.lstsq(J, -resid, rcond=None)[0]
        # halve until the residual shrinks (Newton from zero can overshoot on the logit scale)
        for _ in range(40):
            q_new = expit(b + D @ (theta + step))
            if np.max(np.abs((D.T @ q_new) / sizes - t)) < np.max(np.abs(resid)):
                break
            step *= 0.5
        theta = theta + step
    else:
        raise SynthConfigError("eligibility targets are mutually infeasible (calibration did not converge)")
    a0 = float(theta[0])
    offsets = {k: float(theta[j + 1]) for j, k in enumerate(keys)}
    return Calibration(b_risk, mu, sd, a0, dict(offsets))


def _consistent_targets(targets: Mapping, masks: Mapping, live: np.ndarray) -> dict:
    """Rescale subgroup targets of any dimension whose groups cover every patient.

    Such a dimension pins the full-population rate by itself; its targets are
    scaled by a common factor so their population-weighted mean equals the
    ``full`` target, which is kept exact.
    """
    out = {k: float(v) for k, v in targets.items() if k != "full"}
    n_live = int(live.sum())
    for kind in ("sex", "race", "age"):
        keys = [k for k in out if k.startswith(kind + ":")]
        if not keys:
            continue
        covered = np.zeros_like(live)
        for k in keys:
            covered |= masks[k]
        if int(covered.sum()) < n_live:
            continue
        implied = sum(out[k] * masks[k].sum() for k in keys) / n_live
        scale = targets["full"] / implied
        for k in keys:
            out[k] *= scale
            if not 0 < out[k] < 1:
                raise SynthConfigError(f"eligibility target {k!r} cannot be reconciled with 'full'")
    return out


# ------------------------------------------------------------ records

class _Dates:
    """Uniform random dates in [start, end) as ISO strings, cached per ordinal."""

    def __init__(self):
        self._cache: dict = {}

    def iso(self, ordinal: int) -> str:
        s = self._cache.get(ordinal)
        if s is None:
            s = dt.date.fromordinal(ordinal).isoformat()
            self._cache[ordinal] = s
        return s


def _obs(system, code, date, value=None, unit=None):
    d = {"system": system, "code": code, "date": date}
    if value is not None:
        d["value"] = value
        d["unit"] = unit
    return d


def _block_records(cfg: SynthConfig, seed: int, block: int, start: int, lat: _Latents,
                   cal: Calibration, vocab, dates: _Dates):
    rng = _rng(seed, 1, block)
    n = len(lat.age)
    icd_vocab, cpt_vocab, loinc_vocab = vocab
    sets = builtin_sets()
    egfr_codes = sorted(sets.EGFR_LOINC.codes)
    acr_codes = sorted(sets.ACR_LOINC.codes)
    rf_icd = sorted(sets.RF_ICD10.codes)
    rf_cpt = sorted(sets.RF_CPT.codes)

    eta = _risk_eta(cfg, lat)
    p_rf = expit(cal.risk_intercept + eta)
    risk_z = (eta - cal.eta_mean) / cal.eta_std if cal.eta_std > 0 else np.zeros(n)
    avail = cfg.avail_risk * risk_z + cfg.avail_access * lat.access
    for k, m in _group_masks(cfg, lat).items():
        avail[m] += cal.avail_offsets[k]
    p_el = expit(cal.avail_intercept + avail)
    positive = ~lat.prevalent & (lat.u_rf < p_rf)
    eligible = lat.u_elig < p_el

    o_lo, o_hi = cfg.obs_start.toordinal(), cfg.obs_end.toordinal()
    l_lo, l_hi = cfg.label_start.toordinal(), cfg.label_end.toordinal()
    gap_lo = o_hi  # between observation end and label start
    gap_hi = max(l_lo, o_hi + 1)

    access_scale = np.exp(0.3 * lat.access)
    n_noise = rng.poisson(cfg.noise_rate * access_scale)
    n_noise_lab = rng.poisson(cfg.noise_lab_rate * access_scale)
    n_post = rng.poisson(cfg.post_window_rate, size=n)
    n_comorb = rng.poisson(np.exp(cfg.comorbidity_base + cfg.comorbidity_slope * lat.comorbidity)[:, None],
                           size=(n, len(COMORBIDITY_CODES)))
    # later CKD stages are rarer
    stage_shift = -0.7 * np.arange(len(CKD_CODES))
    n_ckd = rng.poisson(np.exp(cfg.ckd_base + cfg.ckd_slope * lat.renal[:, None] + stage_shift),
                        size=(n, len(CKD_CODES)))
    u_partial = rng.random(n)
    u_late = rng.random(n)
    u_near = rng.random(n)
    u_cpt = rng.random(n)
    n_egfr = 1 + rng.poisson(0.5, size=n)
    n_acr = 1 + rng.poisson(0.3, size=n)
    egfr_level = np.clip(cfg.egfr_mean + cfg.egfr_renal * lat.renal + cfg.egfr_noise * rng.standard_normal(n), 4.0, 150.0)
    acr_log_level = cfg.acr_log_mean + cfg.acr_renal * lat.renal + cfg.acr_noise * rng.standard_normal(n)

    icd_p, cpt_p, lab_p = _zipf(len(icd_vocab)), _zipf(len(cpt_vocab)), _zipf(len(loinc_vocab), 0.8)
    sexes = np.where(lat.female, "female", "male")
    out = []
    for i in range(n):
        obs = []
        k = int(n_noise[i])
        if k:
            is_cpt = rng.random(k) < 0.3
            days = rng.integers(o_lo, o_hi, size=k)
            icd_pick = rng.choice(len(icd_vocab), size=k, p=icd_p)
            cpt_pick = rng.choice(len(cpt_vocab), size=k, p=cpt_p)
            for j in range(k):
                if is_cpt[j]:
                    obs.append(_obs("CPT", cpt_vocab[cpt_pick[j]], dates.iso(int(days[j]))))
                else:
                    obs.append(_obs("ICD10", icd_vocab[icd_pick[j]], dates.iso(int(days[j]))))
        k = int(n_noise_lab[i])
        if k:
            days = rng.integers(o_lo, o_hi, size=k)
            picks = rng.choice(len(loinc_vocab), size=k, p=lab_p)
            vals = np.round(100.0 + 15.0 * rng.standard_normal(k), 1)
            for j in range(k):
                obs.append(_obs("LOINC", loinc_vocab[picks[j]], dates.iso(int(days[j])), float(vals[j]), NOISE_LAB_UNIT))
        for c_idx, code in enumerate(COMORBIDITY_CODES):
            for d in rng.integers(o_lo, o_hi, size=int(n_comorb[i, c_idx])):
                obs.append(_obs("ICD10", code, dates.iso(int(d))))
        for c_idx, code in enumerate(CKD_CODES):
            for d in rng.integers(o_lo, o_hi, size=int(n_ckd[i, c_idx])):
                obs.append(_obs("ICD10", code, dates.iso(int(d))))

        with_egfr = with_acr = False
        if eligible[i]:
            with_egfr = with_acr = True
        elif u_partial[i] < cfg.egfr_only_rate:
            with_egfr = True
        elif u_partial[i] < cfg.egfr_only_rate + cfg.acr_only_rate:
            with_acr = True
        if with_egfr:
            m = int(n_egfr[i])
            vals = np.clip(egfr_level[i] + 3.0 * rng.standard_normal(m), 2.0, 160.0)
            days = rng.integers(o_lo, o_hi, size=m)
            codes = rng.choice(len(egfr_codes), size=m)
            for j in range(m):
                obs.append(_obs("LOINC", egfr_codes[codes[j]], dates.iso(int(days[j])),
                                round(float(vals[j]), 1), "mL/min/1.73m2"))
        if with_acr:
            m = int(n_acr[i])
            vals = np.exp(acr_log_level[i] + 0.15 * rng.standard_normal(m))
            days = rng.integers(o_lo, o_hi, size=m)
            codes = rng.choice(len(acr_codes), size=m)
            in_mmol = rng.random() < cfg.acr_mmol_fraction
            for j in range(m):
                if in_mmol:
                    obs.append(_obs("LOINC", acr_codes[codes[j]], dates.iso(int(days[j])),
                                    round(float(vals[j]) / 8.84, 3), "mg/mmol"))
                else:
                    obs.append(_obs("LOINC", acr_codes[codes[j]], dates.iso(int(days[j])),
                                    round(float(vals[j]), 2), "mg/g"))
        if not eligible[i] and u_late[i] < cfg.late_lab_rate:
            # labs drawn after the observation window must not count
            d = dates.iso(int(rng.integers(gap_lo, gap_hi)))
            obs.append(_obs("LOINC", egfr_codes[0], d, round(float(egfr_level[i]), 1), "mL/min/1.73m2"))
            obs.append(_obs("LOINC", acr_codes[0], d, round(float(math.exp(acr_log_level[i])), 2), "mg/g"))

        for d in rng.integers(o_hi, l_hi + 90, size=int(n_post[i])):
            obs.append(_obs("ICD10", icd_vocab[int(rng.integers(len(icd_vocab)))], dates.iso(int(d))))

        if lat.prevalent[i]:
            for d in rng.integers(o_lo - 365, l_lo, size=2):
                obs.append(_obs("ICD10", rf_icd[int(rng.integers(len(rf_icd)))], dates.iso(int(d))))
        elif positive[i]:
            if u_cpt[i] < cfg.cpt_outcome_fraction:
                obs.append(_obs("CPT", rf_cpt[int(rng.integers(len(rf_cpt)))],
                                dates.iso(int(rng.integers(l_lo, l_hi)))))
            else:
                for d in rng.integers(l_lo, l_hi, size=2):
                    obs.append(_obs("ICD10", rf_icd[int(rng.integers(len(rf_icd)))], dates.iso(int(d))))
        elif u_near[i] < cfg.near_miss_rate:
            obs.append(_obs("ICD10", rf_icd[int(rng.integers(len(rf_icd)))],
                            dates.iso(int(rng.integers(l_lo, l_hi)))))

        obs.sort(key=lambda o: (o["date"], o["system"], o["code"]))
        age_days = int(round(float(lat.age[i]) * 365.25))
        pid = f"P{start + i:07d}"
        record = {
            "id": pid,
            "birth_date": dates.iso(o_hi - age_days),
            "sex": str(sexes[i]),
            "race": RACES[int(lat.race[i])],
            "observations": obs,
        }
        truth = {
            "id": pid,
            "age_years": float(lat.age[i]),
            "renal": float(lat.renal[i]),
            "comorbidity": float(lat.comorbidity[i]),
            "access": float(lat.access[i]),
            "risk_logit": float(cal.risk_intercept + eta[i]),
            "p_rf": float(p_rf[i]),
            "p_eligible": float(p_el[i]),
            "prevalent": int(lat.prevalent[i]),
            "positive": int(positive[i]),
            "eligible": int(eligible[i]),
        }
        out.append((record, truth))
    return out


TRUTH_FIELDS = ("id", "age_years", "renal", "comorbidity", "access", "risk_logit", "p_rf",
                "p_eligible", "prevalent", "positive", "eligible")


def iter_records(cfg: SynthConfig, seed: int, threads: int = 1) -> Iterator[tuple]:
    """Yield ``(record, truth)`` pairs in patient-id order."""
    cfg.validate()
    bounds = _block_bounds(cfg.n_patients)
    vocab = _noise_vocab(cfg)
    pool = ThreadPoolExecutor(threads) if threads > 1 and len(bounds) > 1 else None
    try:
        if pool is None:
            parts = [_draw_latents(cfg, seed, b, hi - lo) for b, (lo, hi) in enumerate(bounds)]
        else:
            parts = list(pool.map(lambda a: _draw_latents(cfg, seed, a[0], a[1][1] - a[1][0]),
                                  enumerate(bounds)))
        cal = calibrate(cfg, _concat(parts))

        def work(b):
            lo, _ = bounds[b]
            return _block_records(cfg, seed, b, lo, parts[b], cal, vocab, _Dates())

        blocks = range(len(bounds))
        results = map(work, blocks) if pool is None else pool.map(work, blocks)
        for chunk in results:
            yield from chunk
    finally:
        if pool is not None:
            pool.shutdown()


def generate(cfg: SynthConfig, seed: int, out: IO[str], truth_out: Optional[IO[str]] = None,
             threads: int = 1) -> dict:
    """Write the patient stream (and optional ground-truth CSV); returns summary counts."""
    writer = None
    if truth_out is not None:
        writer = csv.writer(truth_out, lineterminator="\n")
        writer.writerow(TRUTH_FIELDS)
    counts = {"patients": 0, "prevalent": 0, "positive": 0, "eligible": 0}
    for record, truth in iter_records(cfg, seed, threads):
        out.write(json.dumps(record, separators=(",", ":")))
        out.write("\n")
        if writer is not None:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (truth[k] for k in TRUTH_FIELDS)])
        counts["patients"] += 1
        for k in ("prevalent", "positive", "eligible"):
            counts[k] += truth[k]
    return counts


def read_truth(fh: IO[str]) -> dict:
    out = {}
    for rec in csv.DictReader(fh):
        out[rec["id"]] = {k: (rec[k] if k == "id" else float(rec[k])) for k in TRUTH_FIELDS}
    return out
