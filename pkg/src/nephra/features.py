"""One-year aggregation, binning, min-support filtering and sparse binary encoding."""
from __future__ import annotations

import bisect
import hashlib
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .codes import CodeSystem
from .cohort import CohortSpec, LabeledPatient, Status

FORMAT_HEADER = "nephra-feature-space v1"
_COUNTED = (CodeSystem.ICD10, CodeSystem.CPT)


class FeatureSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateRecord:
    patient_id: str
    age_years: float
    counts: dict = field(default_factory=dict)   # (system, code) -> count
    lab_max: dict = field(default_factory=dict)  # loinc code -> (value, unit)
    sex: Optional[str] = None
    race: Optional[str] = None


@dataclass(frozen=True)
class SparseVector:
    dims: int
    active: tuple = ()

    def __post_init__(self):
        prev = -1
        for i in self.active:
            if i <= prev or i >= self.dims:
                raise ValueError("active ids must be strictly increasing and < dims")
            prev = i


@dataclass(frozen=True)
class FeatureConfig:
    min_support: int = 10
    count_thresholds: tuple = (0, 2, 10)
    lab_z_edges: tuple = (-2.0, -1.0, 1.0, 2.0)
    age_bin_width: int = 10
    include_demographics: bool = False

    def __post_init__(self):
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if list(self.count_thresholds) != sorted(set(self.count_thresholds)):
            raise ValueError("count_thresholds must be strictly increasing")
        if list(self.lab_z_edges) != sorted(set(self.lab_z_edges)):
            raise ValueError("lab_z_edges must be strictly increasing")
        if self.age_bin_width <= 0:
            raise ValueError("age_bin_width must be positive")


def aggregate(patient: LabeledPatient, spec: CohortSpec) -> AggregateRecord:
    """Collapse the observation window to per-code counts and per-lab maxima."""
    if patient.status is Status.EXCLUDED:
        raise ValueError(f"patient {patient.id} is excluded (prevalent kidney failure)")
    lo, hi = spec.obs_start, spec.obs_end
    counts: dict = defaultdict(int)
    lab_max: dict = {}
    for o in patient.patient.observations:
        if o.date < lo or o.date >= hi:
            continue
        if o.system is CodeSystem.LOINC:
            if o.value is None:
                continue
            cur = lab_max.get(o.code)
            if cur is None or o.value > cur[0]:
                lab_max[o.code] = (o.value, o.unit or "")
        else:
            counts[(o.system.value, o.code)] += 1
    p = patient.patient
    return AggregateRecord(p.id, patient.age_years, dict(counts), lab_max, p.sex, p.race)


def aggregate_cohort(cohort: Iterable[LabeledPatient], spec: CohortSpec) -> list:
    return [aggregate(lp, spec) for lp in cohort if lp.status is not Status.EXCLUDED]


def age_bin_label(age_years: float, width: int = 10) -> str:
    lo = int(math.floor(age_years / width)) * width
    return f"{lo}-{lo + width}"


def z_bin(z: float, edges: Sequence[float]) -> int:
    """Index of the z interval; bins left of zero are right-closed, right of zero left-closed.

    With the default edges: (-inf,-2] (-2,-1] (-1,1) [1,2) [2,inf).
    """
    if z <= 0:
        return bisect.bisect_left(edges, z)
    return bisect.bisect_right(edges, z)


def _lab_z(value: float, stats) -> float:
    mean, std = stats
    if std == 0:
        return 0.0
    return (value - mean) / std


def active_keys(agg: AggregateRecord, config: FeatureConfig, lab_stats: dict) -> list:
    keys = [f"age|{age_bin_label(agg.age_years, config.age_bin_width)}"]
    for (system, code), n in agg.counts.items():
        for t in config.count_thresholds:
            if n > t:
                keys.append(f"count|{system}|{code}|>{t}")
    for code, (value, _unit) in agg.lab_max.items():
        stats = lab_stats.get(code)
        if stats is None:
            continue
        keys.append(f"lab|{code}|z{z_bin(_lab_z(value, stats), config.lab_z_edges)}")
    if config.include_demographics:
        if agg.sex is not None:
            keys.append(f"sex|{agg.sex}")
        if agg.race is not None:
            keys.append(f"race|{agg.race}")
    return keys


@dataclass(frozen=True)
class FeatureSpace:
    config: FeatureConfig
    lab_stats: dict
    feature_index: dict
    support: dict = field(default_factory=dict, compare=False)

    @property
    def dims(self) -> int:
        return len(self.feature_index)

    @property
    def keys(self) -> list:
        return sorted(self.feature_index, key=self.feature_index.__getitem__)

    def to_text(self) -> str:
        c = self.config
        lines = [
            FORMAT_HEADER,
            f"min_support {c.min_support}",
            "count_thresholds " + ",".join(str(t) for t in c.count_thresholds),
            "lab_z_edges " + ",".join(repr(float(e)) for e in c.lab_z_edges),
            f"age_bin_width {c.age_bin_width}",
            f"include_demographics {int(c.include_demographics)}",
            f"labs {len(self.lab_stats)}",
        ]
        for code in sorted(self.lab_stats):
            mean, std = self.lab_stats[code]
            lines.append(f"{code} {mean!r} {std!r}")
        lines.append(f"features {self.dims}")
        for key in self.keys:
            lines.append(f"{self.feature_index[key]} {key}")
        return "\n".join(lines) + "\n"

    @property
    def version(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "FeatureSpace":
        lines = text.splitlines()
        if not lines or lines[0].strip() != FORMAT_HEADER:
            raise FeatureSpaceError(f"not a feature-space file (expected {FORMAT_HEADER!r})")
        it = iter(lines[1:])

        def field_(name):
            k, _, v = next(it).partition(" ")
            if k != name:
                raise FeatureSpaceError(f"expected {name!r}, got {k!r}")
            return v

        try:
            config = FeatureConfig(
                min_support=int(field_("min_support")),
                count_thresholds=tuple(int(x) for x in field_("count_thresholds").split(",")),
                lab_z_edges=tuple(float(x) for x in field_("lab_z_edges").split(",")),
                age_bin_width=int(field_("age_bin_width")),
                include_demographics=bool(int(field_("include_demographics"))),
            )
            lab_stats = {}
            for _ in range(int(field_("labs"))):
                code, mean, std = next(it).split()
                lab_stats[code] = (float(mean), float(std))
            index = {}
            for _ in range(int(field_("features"))):
                col, key = next(it).split(" ", 1)
                index[key] = int(col)
        except StopIteration:
            raise FeatureSpaceError("truncated feature-space file") from None
        if sorted(index.values()) != list(range(len(index))):
            raise FeatureSpaceError("feature columns are not a contiguous 0..n-1 range")
        return cls(config, lab_stats, index)


def fit_lab_stats(aggregates: Sequence[AggregateRecord]) -> dict:
    """Population mean/std of each lab's per-patient maximum, over patients who had it."""
    values: dict = defaultdict(list)
    for agg in aggregates:
        for code, (value, _unit) in agg.lab_max.items():
            values[code].append(value)
    stats = {}
    for code in sorted(values):
        arr = np.asarray(values[code], dtype=float)
        stats[code] = (float(arr.mean()), float(arr.std()))
    return stats


def fit_feature_space(train_aggregates: Sequence[AggregateRecord],
                      config: FeatureConfig = FeatureConfig()) -> FeatureSpace:
    if not train_aggregates:
        raise FeatureSpaceError("no training aggregates")
    lab_stats = fit_lab_stats(train_aggregates)
    support: Counter = Counter()
    for agg in train_aggregates:
        support.update(set(active_keys(agg, config, lab_stats)))
    kept = sorted(k for k, n in support.items() if n >= config.min_support)
    if not kept:
        raise FeatureSpaceError("empty feature space")
    index = {k: i for i, k in enumerate(kept)}
    return FeatureSpace(config, lab_stats, index, {k: support[k] for k in kept})


def encode(agg: AggregateRecord, space: FeatureSpace) -> SparseVector:
    index = space.feature_index
    cols = {index[k] for k in active_keys(agg, space.config, space.lab_stats) if k in index}
    return SparseVector(space.dims, tuple(sorted(cols)))


def to_csr(vectors: Sequence[SparseVector], dims: Optional[int] = None) -> sp.csr_matrix:
    if dims is None:
        if not vectors:
            raise ValueError("cannot infer dims from an empty vector list")
        dims = vectors[0].dims
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dims != dims:
            raise ValueError(f"dimension mismatch: {v.dims} != {dims}")
        indptr[i + 1] = indptr[i] + len(v.active)
    indices = np.fromiter((j for v in vectors for j in v.active), dtype=np.int32, count=int(indptr[-1]))
    data = np.ones(len(indices), dtype=np.float64)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dims))


class FeatureEncoder(TransformerMixin, BaseEstimator):
    """Fit a FeatureSpace on aggregates and transform aggregates to a binary CSR matrix."""

    def __init__(self, min_support=10, count_thresholds=(0, 2, 10),
                 lab_z_edges=(-2.0, -1.0, 1.0, 2.0), age_bin_width=10,
                 include_demographics=False):
        self.min_support = min_support
        self.count_thresholds = count_thresholds
        self.lab_z_edges = lab_z_edges
        self.age_bin_width = age_bin_width
        self.include_demographics = include_demographics

    def _config(self) -> FeatureConfig:
        return FeatureConfig(self.min_support, tuple(self.count_thresholds),
                             tuple(float(e) for e in self.lab_z_edges),
                             self.age_bin_width, bool(self.include_demographics))

    def fit(self, X, y=None):
        self.space_ = fit_feature_space(list(X), self._config())
        self.n_features_out_ = self.space_.dims
        return self

    def transform(self, X):
        space = getattr(self, "space_", None)
        if space is None:
            raise NotFittedError("FeatureEncoder is not fitted yet; call fit first")
        return to_csr([encode(agg, space) for agg in X], space.dims)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.space_.keys, dtype=object)

    @classmethod
    def from_space(cls, space: FeatureSpace) -> "FeatureEncoder":
        c = space.config
        enc = cls(c.min_support, c.count_thresholds, c.lab_z_edges, c.age_bin_width,
                  c.include_demographics)
        enc.space_ = space
        enc.n_features_out_ = space.dims
        return enc
