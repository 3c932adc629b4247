"""Raw patient records to 22 x 48 observation matrices.

Pipeline per patient: entry criteria -> bounds filter -> hourly aggregation
(mean, or sum for urine) -> imputation -> static replication. Standardization
is fitted separately per training split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from mortnet.container import read_container, write_container

HORIZON = 48
COHORT_KIND = "mortnet-cohort"

FWD_BWD_THEN_MEAN = "fwd_bwd_then_mean"
FWD_THEN_MEAN = "fwd_then_mean"
FWD_THEN_NORMAL = "fwd_then_normal"
MEAN_ONLY = "mean_only"
REPLICATE = "replicate"
POLICIES = (FWD_BWD_THEN_MEAN, FWD_THEN_MEAN, FWD_THEN_NORMAL, MEAN_ONLY, REPLICATE)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "temporal" | "static"
    bounds: tuple[float, float] | None
    aggregator: str  # "mean" | "sum" | "none"
    imputation: str
    normal_value: float | None = None
    # cohort reference statistics used to calibrate the synthetic generator
    mean: float | None = None
    std: float | None = None
    missing: float | None = None
    prevalence: float | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("temporal", "static"):
            raise ValueError(f"{self.name}: kind must be temporal or static")
        if self.imputation not in POLICIES:
            raise ValueError(f"{self.name}: unknown imputation policy {self.imputation!r}")


def _t(name, label, lo, hi, mean, std, missing, imputation=FWD_BWD_THEN_MEAN, aggregator="mean",
       normal_value=None):
    return FeatureSpec(name, "temporal", (lo, hi), aggregator, imputation, normal_value,
                       mean, std, missing, label=label)


def _s(name, label, prevalence=None, mean=None, std=None):
    return FeatureSpec(name, "static", None, "none", REPLICATE, mean=mean, std=std,
                       prevalence=prevalence, label=label)


# Channel order is the model's input order: 16 temporal, then 6 static.
FEATURES: tuple[FeatureSpec, ...] = (
    _t("bicarbonate", "Bicarbonate", 5.0, 52.0, 23.296, 4.733, 0.9279),
    _t("bilirubin", "Bilirubin", 0.1, 82.0, 3.098, 6.170, 0.9823),
    _t("bun", "BUN", 1.0, 240.0, 27.497, 22.493, 0.9269),
    _t("diastolic_bp", "Diastolic BP", 1.0, 298.0, 59.648, 14.090, 0.1007),
    _t("fio2", "FiO2", 0.4, 100.0, 50.100, 20.030, 0.8304, FWD_THEN_NORMAL, normal_value=0.2),
    _t("gcs_eyes", "GCS eyes", 1.0, 4.0, 3.140, 1.142, 0.6830, FWD_THEN_MEAN),
    _t("gcs_motor", "GCS motor", 1.0, 6.0, 5.256, 1.440, 0.6845, FWD_THEN_MEAN),
    _t("gcs_verbal", "GCS verbal", 1.0, 5.0, 3.123, 1.902, 0.6839, FWD_THEN_MEAN),
    _t("heart_rate", "Heart rate", 0.35, 280.0, 87.913, 18.951, 0.0753),
    _t("po2", "PO2", 14.0, 763.0, 149.763, 95.724, 0.8935),
    _t("potassium", "Potassium", 0.6, 26.5, 4.192, 0.700, 0.8821),
    _t("sodium", "Sodium", 1.21, 183.0, 138.294, 5.350, 0.9127),
    _t("systolic_bp", "Systolic BP", 0.15, 323.0, 118.518, 22.973, 0.1005),
    _t("temperature", "Temperature", 15.0, 42.222, 37.007, 0.861, 0.6615),
    # negative volumes are discarded, so the lower bound is 0 rather than -4000
    _t("urine_output", "Urine output", 0.0, 4800.0, 113.900, 162.357, 0.3315, MEAN_ONLY, "sum"),
    _t("wbc", "WBC", 0.1, 528.0, 12.743, 11.377, 0.9327),
    _s("age", "Age", mean=63.828, std=15.576),
    _s("elective_admission", "Elective admission", prevalence=0.14134),
    _s("surgical_admission", "Surgical admission", prevalence=0.35827),
    _s("aids", "AIDS", prevalence=0.00504),
    _s("metastatic_cancer", "Metastatic cancer", prevalence=0.03069),
    _s("lymphoma", "Lymphoma", prevalence=0.01414),
)
FEATURE_NAMES = tuple(f.name for f in FEATURES)
TEMPORAL = tuple(f for f in FEATURES if f.kind == "temporal")
STATIC = tuple(f for f in FEATURES if f.kind == "static")
STATIC_FLAGS = tuple(f.name for f in STATIC if f.name != "age")
MORTALITY_RATE = 0.09748
AGE_CLIP = 80.0

SPEC_BY_NAME = {f.name: f for f in FEATURES}


class Observation(NamedTuple):
    feature: str
    offset_hours: float
    value: float


@dataclass
class RawPatientRecord:
    patient_id: str
    admission_age: float
    stay_length: float
    admission_index: int
    flags: dict[str, bool]
    observations: list[Observation]
    died: int


@dataclass
class PatientMatrix:
    patient_id: str
    grid: np.ndarray
    label: int


def apply_entry_criteria(records: Iterable[RawPatientRecord]) -> list[RawPatientRecord]:
    """Keep first ICU admissions of patients older than 16 with stays over 48 h."""
    return [r for r in records
            if r.stay_length > 48 and r.admission_age > 16 and r.admission_index == 1]


def clip_age(age: float) -> float:
    if not age > 0:
        raise ValueError(f"age must be positive, got {age}")
    return min(float(age), AGE_CLIP)


def aggregate_hourly(observations, aggregator: str = "mean", bounds=None,
                     horizon: int = HORIZON) -> np.ndarray:
    """Bin ``(offset_hours, value)`` pairs into hourly slots; NaN marks an empty slot."""
    obs = np.asarray(list(observations), dtype=np.float64).reshape(-1, 2)
    out = np.full(horizon, np.nan)
    if obs.size == 0:
        return out
    offsets, values = obs[:, 0], obs[:, 1]
    if np.any((offsets < 0) | (offsets >= horizon)):
        raise ValueError(f"observation offsets must lie in [0, {horizon})")
    if bounds is not None:
        keep = (values >= bounds[0]) & (values <= bounds[1])
        offsets, values = offsets[keep], values[keep]
    slots = np.floor(offsets).astype(int)
    totals = np.bincount(slots, weights=values, minlength=horizon)
    counts = np.bincount(slots, minlength=horizon)
    seen = counts > 0
    if aggregator == "sum":
        out[seen] = totals[seen]
    elif aggregator == "mean":
        out[seen] = totals[seen] / counts[seen]
    else:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    return out


def _ffill(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    idx = np.where(np.isnan(a), 0, np.arange(n))
    idx = np.maximum.accumulate(idx, axis=-1)
    return np.take_along_axis(a, idx, axis=-1)


def _bfill(a: np.ndarray) -> np.ndarray:
    return _ffill(a[..., ::-1])[..., ::-1]


def impute_series(series, policy: str, cohort_mean: float | None = None,
                  normal_value: float | None = None, feature: str = "?") -> np.ndarray:
    """Fill NaN slots along the last axis. Works on one series or a stack of them."""
    a = np.array(series, dtype=np.float64)
    if policy == REPLICATE:
        val = np.asarray(a, dtype=np.float64)
        if val.ndim == 0:
            return np.full(HORIZON, float(val))
        return val
    if policy in (FWD_BWD_THEN_MEAN, FWD_THEN_MEAN, FWD_THEN_NORMAL):
        a = _ffill(a)
        if policy == FWD_BWD_THEN_MEAN:
            a = _bfill(a)
    elif policy != MEAN_ONLY:
        raise ValueError(f"unknown imputation policy {policy!r}")
    holes = np.isnan(a)
    if holes.any():
        fill = normal_value if policy == FWD_THEN_NORMAL else cohort_mean
        if fill is None:
            what = "normal value" if policy == FWD_THEN_NORMAL else "cohort mean"
            raise ValueError(f"{feature}: {what} required to impute missing slots")
        a[holes] = fill
    return a


def _raw_temporal(record: RawPatientRecord, specs=FEATURES) -> np.ndarray:
    temporal = [s for s in specs if s.kind == "temporal"]
    index = {s.name: i for i, s in enumerate(temporal)}
    per_feature: list[list[tuple[float, float]]] = [[] for _ in temporal]
    for ob in record.observations:
        if ob.feature not in index:
            raise ValueError(f"patient {record.patient_id}: unknown feature {ob.feature!r}")
        per_feature[index[ob.feature]].append((ob.offset_hours, ob.value))
    return np.stack([aggregate_hourly(per_feature[i], s.aggregator, s.bounds)
                     for i, s in enumerate(temporal)])


def slot_means(raw: np.ndarray) -> np.ndarray:
    """Per-feature mean over every observed hourly slot of a (N, F, 48) stack."""
    flat = raw.transpose(1, 0, 2).reshape(raw.shape[1], -1)
    out = np.full(raw.shape[1], np.nan)
    for i, row in enumerate(flat):
        vals = row[~np.isnan(row)]
        if vals.size:
            out[i] = vals.mean()
    return out


def compute_cohort_means(records: Sequence[RawPatientRecord], specs=FEATURES) -> dict[str, float]:
    raw = np.stack([_raw_temporal(r, specs) for r in records])
    temporal = [s for s in specs if s.kind == "temporal"]
    return {s.name: float(m) for s, m in zip(temporal, slot_means(raw)) if not np.isnan(m)}


def impute_temporal(raw: np.ndarray, cohort_means: dict[str, float], specs=FEATURES) -> np.ndarray:
    """Impute a (..., 16, 48) stack of aggregated temporal series."""
    out = np.empty_like(raw)
    for i, s in enumerate(s for s in specs if s.kind == "temporal"):
        out[..., i, :] = impute_series(raw[..., i, :], s.imputation, cohort_means.get(s.name),
                                       s.normal_value, s.name)
    return out


def static_vector(record: RawPatientRecord) -> np.ndarray:
    vals = [clip_age(record.admission_age)]
    for name in STATIC_FLAGS:
        vals.append(1.0 if record.flags.get(name, False) else 0.0)
    return np.array(vals)


def build_matrix(record: RawPatientRecord, cohort_means: dict[str, float],
                 specs=FEATURES) -> PatientMatrix:
    temporal = impute_temporal(_raw_temporal(record, specs), cohort_means, specs)
    static = np.repeat(static_vector(record)[:, None], HORIZON, axis=1)
    grid = np.concatenate([temporal, static], axis=0)
    assert not np.isnan(grid).any()
    return PatientMatrix(record.patient_id, grid, int(record.died))


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


STD_FLOOR = 1e-8


def standardize_fit(grids: np.ndarray) -> StandardizationStats:
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 3 or grids.shape[0] == 0:
        raise ValueError("standardize_fit needs a non-empty (N, C, T) training stack")
    return StandardizationStats(grids.mean(axis=(0, 2)), grids.std(axis=(0, 2)))


def standardize_apply(grids, stats: StandardizationStats) -> np.ndarray:
    grids = np.asarray(grids, dtype=np.float64)
    bshape = (-1, 1)
    return (grids - stats.mean.reshape(bshape)) / np.maximum(stats.std, STD_FLOOR).reshape(bshape)


@dataclass
class CohortDataset:
    grids: np.ndarray  # (N, 22, 48)
    labels: np.ndarray  # (N,) int
    patient_ids: list[str]
    cohort_means: dict[str, float]
    provenance: str = "external"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.patient_ids)) != len(self.patient_ids):
            raise ValueError("patient ids must be unique")
        if len(self.patient_ids) != len(self.grids) or len(self.labels) != len(self.grids):
            raise ValueError("grids, labels and ids must have equal length")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.patient_ids)

    def __getitem__(self, i) -> PatientMatrix:
        return PatientMatrix(self.patient_ids[i], self.grids[i], int(self.labels[i]))

    def index_of(self, patient_id: str) -> int:
        try:
            return self.patient_ids.index(str(patient_id))
        except ValueError:
            raise KeyError(f"no patient {patient_id!r} in cohort") from None

    @property
    def feature_means(self) -> np.ndarray:
        return self.grids.mean(axis=(0, 2))

    @property
    def feature_stds(self) -> np.ndarray:
        return self.grids.std(axis=(0, 2))

    def save(self, path) -> None:
        meta = {"patient_ids": self.patient_ids, "cohort_means": self.cohort_means,
                "provenance": self.provenance, "features": list(FEATURE_NAMES), "extra": self.meta}
        write_container(path, COHORT_KIND, meta, {"grids": self.grids, "labels": self.labels})

    @classmethod
    def load(cls, path) -> "CohortDataset":
        meta, arrays = read_container(path, COHORT_KIND)
        return cls(arrays["grids"], arrays["labels"], meta["patient_ids"], meta["cohort_means"],
                   meta["provenance"], meta.get("extra", {}))


def build_cohort(records: Sequence[RawPatientRecord], provenance="external") -> CohortDataset:
    records = apply_entry_criteria(records)
    if not records:
        raise ValueError("no records pass the entry criteria")
    means = compute_cohort_means(records)
    mats = [build_matrix(r, means) for r in records]
    return CohortDataset(np.stack([m.grid for m in mats]), np.array([m.label for m in mats]),
                         [m.patient_id for m in mats], means, provenance)


PATIENT_COLUMNS = ("patient_id", "age", "stay_hours", "admission_index", *STATIC_FLAGS, "died")
OBSERVATION_COLUMNS = ("patient_id", "feature_name", "offset_hours", "value")


def _truthy(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "y", "t")


def read_records(patients_csv, observations_csv) -> list[RawPatientRecord]:
    obs: dict[str, list[Observation]] = {}
    with open(observations_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(OBSERVATION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{observations_csv}: missing columns {sorted(missing)}")
        for row in reader:
            obs.setdefault(row["patient_id"], []).append(
                Observation(row["feature_name"], float(row["offset_hours"]), float(row["value"])))
    records = []
    with open(patients_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PATIENT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{patients_csv}: missing columns {sorted(missing)}")
        for row in reader:
            pid = row["patient_id"]
            records.append(RawPatientRecord(
                pid, float(row["age"]), float(row["stay_hours"]), int(row["admission_index"]),
                {k: _truthy(row[k]) for k in STATIC_FLAGS}, obs.get(pid, []),
                int(_truthy(row["died"]))))
    return records


def write_records(records: Sequence[RawPatientRecord], patients_csv, observations_csv) -> None:
    with open(patients_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PATIENT_COLUMNS)
        for r in records:
            w.writerow([r.patient_id, repr(r.admission_age), repr(r.stay_length), r.admission_index,
                        *(int(r.flags.get(k, False)) for k in STATIC_FLAGS), r.died])
    with open(observations_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OBSERVATION_COLUMNS)
        for r in records:
            for ob in r.observations:
                w.writerow([r.patient_id, ob.feature, repr(ob.offset_hours), repr(ob.value)])


def load_cohort(path) -> CohortDataset:
    path = Path(path)
    return CohortDataset.load(path)
