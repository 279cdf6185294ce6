"""EHR cohort data model, CSV/JSON ingestion and the observation window."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

Value = Union[float, str]

KINDS = ("static", "temporal")
DTYPES = ("numeric", "categorical")
SECTIONS = ("demographics", "vitals", "assessments", "labs", "medications")

# Univariate PEWS-like channel consumed by the KNN-DTW baseline; not a model input.
EARLY_WARNING_SCORE = "early_warning_score"
AUXILIARY_CHANNELS = (EARLY_WARNING_SCORE,)

DEFAULT_MISSING_CUTOFF = 0.5
MEDICATION_MISSING_CUTOFF = 0.7


class CohortError(ValueError):
    """Schema violation or malformed cohort data."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    dtype: str
    section: str
    categories: tuple[str, ...] | None = None
    reference_range: tuple[float, float] | None = None
    expected_interval_hours: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CohortError(f"{self.name}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.dtype not in DTYPES:
            raise CohortError(f"{self.name}: dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.section not in SECTIONS:
            raise CohortError(f"{self.name}: section must be one of {SECTIONS}, got {self.section!r}")
        if self.categories is not None:
            object.__setattr__(self, "categories", tuple(self.categories))
        if self.reference_range is not None:
            object.__setattr__(self, "reference_range", tuple(float(v) for v in self.reference_range))
        if self.dtype == "categorical":
            if not self.categories:
                raise CohortError(f"{self.name}: categorical feature needs at least one category")
            if len(set(self.categories)) != len(self.categories):
                raise CohortError(f"{self.name}: duplicate categories")
        elif self.categories:
            raise CohortError(f"{self.name}: numeric feature cannot list categories")
        if self.reference_range is not None:
            if self.section != "labs" or self.dtype != "numeric":
                raise CohortError(f"{self.name}: reference_range only allowed on numeric labs")
            low, high = self.reference_range
            if not low < high:
                raise CohortError(f"{self.name}: reference_range needs low < high")
        if self.expected_interval_hours is not None:
            if self.kind != "temporal" or not self.expected_interval_hours > 0:
                raise CohortError(f"{self.name}: expected_interval_hours must be positive, temporal only")

    @property
    def is_numeric(self) -> bool:
        return self.dtype == "numeric"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "dtype": self.dtype,
            "section": self.section,
            "categories": list(self.categories) if self.categories is not None else None,
            "reference_range": list(self.reference_range) if self.reference_range is not None else None,
            "expected_interval_hours": self.expected_interval_hours,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureSpec":
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - allowed
        if unknown:
            raise CohortError(f"unknown FeatureSpec fields {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True, slots=True)
class Observation:
    time_hours: float
    value: Value


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    admission_id: str
    static_values: dict[str, Value]
    temporal_series: dict[str, tuple[Observation, ...]]
    label: int
    auxiliary: dict[str, tuple[Observation, ...]] = field(default_factory=dict)

    def series(self, name: str) -> tuple[Observation, ...]:
        return self.temporal_series.get(name, ())


@dataclass(frozen=True)
class Cohort:
    schema: tuple[FeatureSpec, ...]
    records: tuple[PatientRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def spec(self, name: str) -> FeatureSpec:
        for s in self.schema:
            if s.name == name:
                return s
        raise KeyError(name)

    def subset(self, indices: Iterable[int]) -> "Cohort":
        return Cohort(self.schema, tuple(self.records[i] for i in indices))

    def __len__(self) -> int:
        return len(self.records)


def schema_hash(schema: Sequence[FeatureSpec]) -> str:
    blob = json.dumps([s.to_json() for s in schema], sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def validate_schema(schema: Sequence[FeatureSpec]) -> None:
    names = [s.name for s in schema]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise CohortError(f"duplicate feature names in schema: {dupes}")
    reserved = set(names) & set(AUXILIARY_CHANNELS)
    if reserved:
        raise CohortError(f"feature names reserved for auxiliary channels: {sorted(reserved)}")


def validate_record(record: PatientRecord, schema: Sequence[FeatureSpec]) -> None:
    by_name = {s.name: s for s in schema}
    if record.label not in (0, 1):
        raise CohortError(f"{record.admission_id}: label must be 0 or 1")
    for name, value in record.static_values.items():
        spec = by_name.get(name)
        if spec is None or spec.kind != "static":
            raise CohortError(f"{record.admission_id}: unknown static feature {name!r}")
        _check_value(spec, value, record.admission_id)
    for name, series in record.temporal_series.items():
        spec = by_name.get(name)
        if spec is None or spec.kind != "temporal":
            raise CohortError(f"{record.admission_id}: unknown temporal feature {name!r}")
        _check_series(spec, series, record.admission_id)
    for name, series in record.auxiliary.items():
        if name not in AUXILIARY_CHANNELS:
            raise CohortError(f"{record.admission_id}: unknown auxiliary channel {name!r}")
        _check_series(None, series, record.admission_id)


def _check_value(spec: FeatureSpec | None, value: Value, where: str) -> None:
    if spec is None or spec.is_numeric:
        if isinstance(value, str) or not math.isfinite(value):
            raise CohortError(f"{where}: non-finite or non-numeric value {value!r}")
    elif value not in spec.categories:
        raise CohortError(f"{where}: {value!r} is not a category of {spec.name!r}")


def _check_series(spec: FeatureSpec | None, series: Sequence[Observation], where: str) -> None:
    previous = -math.inf
    for obs in series:
        if not math.isfinite(obs.time_hours):
            raise CohortError(f"{where}: non-finite timestamp")
        if obs.time_hours < 0:
            raise CohortError(f"{where}: negative timestamp {obs.time_hours}")
        if obs.time_hours < previous:
            raise CohortError(f"{where}: unsorted timestamps")
        previous = obs.time_hours
        _check_value(spec, obs.value, where)


def validate_cohort_structure(cohort: Cohort) -> None:
    validate_schema(cohort.schema)
    seen: set[str] = set()
    for record in cohort.records:
        if record.admission_id in seen:
            raise CohortError(f"duplicate admission_id {record.admission_id!r}")
        seen.add(record.admission_id)
        validate_record(record, cohort.schema)


def filter_window(record: PatientRecord, tau: float) -> PatientRecord:
    """Keep observations with time_hours <= tau (inclusive boundary)."""
    if not tau > 0:
        raise ValueError("tau must be positive")

    def cut(series_map):
        return {k: tuple(o for o in s if o.time_hours <= tau) for k, s in series_map.items()}

    return dataclasses.replace(record, temporal_series=cut(record.temporal_series), auxiliary=cut(record.auxiliary))


def window_cohort(cohort: Cohort, tau: float) -> Cohort:
    return Cohort(cohort.schema, tuple(filter_window(r, tau) for r in cohort.records))


# -- files ---------------------------------------------------------------------


def format_number(x: float) -> str:
    """Shortest round-trip decimal; integral values without a fractional part."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _parse_value(spec: FeatureSpec | None, text: str, where: str) -> Value:
    if spec is None or spec.is_numeric:
        try:
            value = float(text)
        except ValueError:
            raise CohortError(f"{where}: malformed numeric value {text!r}") from None
        if not math.isfinite(value):
            raise CohortError(f"{where}: non-finite value {text!r}")
        return value
    if text not in spec.categories:
        raise CohortError(f"{where}: {text!r} is not a category of {spec.name!r}")
    return text


def _format_value(value: Value) -> str:
    return value if isinstance(value, str) else format_number(value)


def load_schema(path: str | Path) -> tuple[FeatureSpec, ...]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise CohortError("schema file must hold a JSON array")
    schema = tuple(FeatureSpec.from_json(obj) for obj in raw)
    validate_schema(schema)
    return schema


def load_cohort(
    schema_path: str | Path,
    static_path: str | Path,
    temporal_path: str | Path,
    labels_path: str | Path | None = None,
) -> Cohort:
    """Read and validate a cohort.

    Labels come from the static file's ``label`` column unless ``labels_path``
    (CSV ``admission_id,label``) is given, which then takes precedence.
    """
    schema = load_schema(schema_path)
    by_name = {s.name: s for s in schema}
    static_names = [s.name for s in schema if s.kind == "static"]

    rows: list[dict] = []
    with open(static_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CohortError(f"{static_path}: missing header")
        expected = ["admission_id", "patient_id", "label"]
        if header[:3] != expected:
            raise CohortError(f"{static_path}:1: header must start with {','.join(expected)}")
        feature_cols = header[3:]
        for name in feature_cols:
            if name not in by_name or by_name[name].kind != "static":
                raise CohortError(f"{static_path}:1: unknown static feature {name!r}")
        missing_cols = set(static_names) - set(feature_cols)
        if missing_cols:
            raise CohortError(f"{static_path}:1: missing static columns {sorted(missing_cols)}")
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            where = f"{static_path}:{lineno}"
            if len(row) != len(header):
                raise CohortError(f"{where}: expected {len(header)} cells, got {len(row)}")
            admission_id, patient_id, label_text = row[:3]
            if admission_id in seen:
                raise CohortError(f"{where}: duplicate admission_id {admission_id!r}")
            seen.add(admission_id)
            label = _parse_label(label_text, where) if labels_path is None or label_text else None
            values = {}
            for name, cell in zip(feature_cols, row[3:]):
                if cell != "":
                    values[name] = _parse_value(by_name[name], cell, f"{where} ({name})")
            rows.append({"admission_id": admission_id, "patient_id": patient_id, "label": label, "static": values})

    index = {r["admission_id"]: r for r in rows}
    series: dict[str, dict[str, list[Observation]]] = {aid: {} for aid in index}
    auxiliary: dict[str, dict[str, list[Observation]]] = {aid: {} for aid in index}
    with open(temporal_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["admission_id", "feature", "time_hours", "value"]:
            raise CohortError(f"{temporal_path}:1: header must be admission_id,feature,time_hours,value")
        for lineno, row in enumerate(reader, start=2):
            where = f"{temporal_path}:{lineno}"
            if len(row) != 4:
                raise CohortError(f"{where}: expected 4 cells, got {len(row)}")
            admission_id, name, time_text, value_text = row
            if admission_id not in index:
                raise CohortError(f"{where}: unknown admission_id {admission_id!r}")
            if name in AUXILIARY_CHANNELS:
                spec = None
                target = auxiliary[admission_id]
            else:
                spec = by_name.get(name)
                if spec is None or spec.kind != "temporal":
                    raise CohortError(f"{where}: unknown temporal feature {name!r}")
                target = series[admission_id]
            try:
                t = float(time_text)
            except ValueError:
                raise CohortError(f"{where}: malformed time_hours {time_text!r}") from None
            if not math.isfinite(t):
                raise CohortError(f"{where}: non-finite timestamp")
            if t < 0:
                raise CohortError(f"{where}: negative timestamp {time_text}")
            if value_text == "":
                raise CohortError(f"{where}: empty value")
            value = _parse_value(spec, value_text, where)
            obs_list = target.setdefault(name, [])
            if obs_list and t < obs_list[-1].time_hours:
                raise CohortError(f"{where}: unsorted timestamps for {name!r}")
            obs_list.append(Observation(t, value))

    if labels_path is not None:
        with open(labels_path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["admission_id", "label"]:
                raise CohortError(f"{labels_path}:1: header must be admission_id,label")
            for lineno, row in enumerate(reader, start=2):
                where = f"{labels_path}:{lineno}"
                if len(row) != 2 or row[0] not in index:
                    raise CohortError(f"{where}: malformed row or unknown admission_id")
                index[row[0]]["label"] = _parse_label(row[1], where)
    for r in rows:
        if r["label"] is None:
            raise CohortError(f"admission {r['admission_id']!r} has no label")

    records = tuple(
        PatientRecord(
            patient_id=r["patient_id"],
            admission_id=r["admission_id"],
            static_values=r["static"],
            temporal_series={k: tuple(v) for k, v in series[r["admission_id"]].items()},
            label=r["label"],
            auxiliary={k: tuple(v) for k, v in auxiliary[r["admission_id"]].items()},
        )
        for r in rows
    )
    return Cohort(schema, records)


def _parse_label(text: str, where: str) -> int:
    if text not in ("0", "1"):
        raise CohortError(f"{where}: label must be 0 or 1, got {text!r}")
    return int(text)


def schema_json(schema: Sequence[FeatureSpec]) -> str:
    return json.dumps([s.to_json() for s in schema], indent=2) + "\n"


def static_csv(cohort: Cohort) -> str:
    static_names = [s.name for s in cohort.schema if s.kind == "static"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["admission_id", "patient_id", "label", *static_names])
    for r in cohort.records:
        cells = [_format_value(r.static_values[n]) if n in r.static_values else "" for n in static_names]
        writer.writerow([r.admission_id, r.patient_id, str(r.label), *cells])
    return buf.getvalue()


def temporal_csv(cohort: Cohort) -> str:
    temporal_names = [s.name for s in cohort.schema if s.kind == "temporal"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["admission_id", "feature", "time_hours", "value"])
    for r in cohort.records:
        for name in [*temporal_names, *AUXILIARY_CHANNELS]:
            source = r.auxiliary if name in AUXILIARY_CHANNELS else r.temporal_series
            for obs in source.get(name, ()):
                writer.writerow([r.admission_id, name, format_number(obs.time_hours), _format_value(obs.value)])
    return buf.getvalue()


def save_cohort(cohort: Cohort, directory: str | Path) -> dict[str, Path]:
    """Write schema.json, static.csv and temporal.csv under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "schema": directory / "schema.json",
        "static": directory / "static.csv",
        "temporal": directory / "temporal.csv",
    }
    paths["schema"].write_text(schema_json(cohort.schema), encoding="utf-8")
    paths["static"].write_text(static_csv(cohort), encoding="utf-8")
    paths["temporal"].write_text(temporal_csv(cohort), encoding="utf-8")
    return paths


def load_cohort_dir(directory: str | Path) -> Cohort:
    directory = Path(directory)
    labels = directory / "labels.csv"
    return load_cohort(
        directory / "schema.json",
        directory / "static.csv",
        directory / "temporal.csv",
        labels if labels.exists() else None,
    )


# -- validation report ---------------------------------------------------------


def missing_cutoff(spec: FeatureSpec) -> float:
    return MEDICATION_MISSING_CUTOFF if spec.section == "medications" else DEFAULT_MISSING_CUTOFF


def validate_cohort(cohort: Cohort, tau: float | None = None, cutoff: float | None = None) -> dict:
    """Prevalence, per-feature missing rates and features above their missing-rate cutoff."""
    records = cohort.records if tau is None else tuple(filter_window(r, tau) for r in cohort.records)
    n = len(records)
    missing_rates: dict[str, float] = {}
    flagged: list[str] = []
    for spec in cohort.schema:
        if n == 0:
            rate = 1.0
        elif spec.kind == "static":
            rate = sum(spec.name not in r.static_values for r in records) / n
        else:
            rate = sum(len(r.series(spec.name)) == 0 for r in records) / n
        missing_rates[spec.name] = rate
        limit = missing_cutoff(spec) if cutoff is None else cutoff
        if rate > limit:
            flagged.append(spec.name)
    labels = [r.label for r in records]
    return {
        "n_admissions": n,
        "n_patients": len({r.patient_id for r in records}),
        "n_positive": int(sum(labels)),
        "prevalence": (sum(labels) / n) if n else 0.0,
        "missing_rates": missing_rates,
        "flagged": flagged,
    }
