"""Synthetic pediatric CICU cohort with planted, known-importance risk factors.

The schema mirrors the published cohort shape (9 static, 129 vitals and
nursing assessments, 49 labs, 5 medications) and its timing: vitals about
hourly, nursing assessments every few hours, labs every 6-12 h, medications
sparse. Labels come from a logistic link on standardized last-in-window values
of the planted features, so the ground-truth importance of every feature is
known.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .records import (
    EARLY_WARNING_SCORE,
    Cohort,
    ConfigError,
    FeatureSpec,
    Observation,
    PatientRecord,
    missing_cutoff,
)

_STATIC = [
    ("Sex", ("Female", "Male"), (0.47, 0.53), 0.0),
    ("Ethnicity", ("Hispanic", "Non-Hispanic"), (0.18, 0.82), 0.06),
    ("First Race", ("White", "Black", "Asian", "Other"), (0.48, 0.36, 0.05, 0.11), 0.02),
    ("Second Race", ("White", "Black", "Asian", "Other", "None"), (0.1, 0.1, 0.05, 0.05, 0.7), 0.4),
    ("Primary Language", ("English", "Spanish", "Other"), (0.86, 0.11, 0.03), 0.01),
    ("Resp Distress", ("No", "Yes"), (0.72, 0.28), 0.03),
    ("Admission Diagnosis", ("HLHS", "TOF", "VSD", "AVSD", "TGA", "Cardiomyopathy", "Arrhythmia", "Other"),
     (0.12, 0.12, 0.16, 0.1, 0.08, 0.12, 0.1, 0.2), 0.05),
    ("Admission ICD Code", ("Q23.4", "Q21.3", "Q21.0", "Q21.2", "Q20.3", "I42.9", "I47.2", "Q24.9"),
     (0.12, 0.12, 0.16, 0.1, 0.08, 0.12, 0.1, 0.2), 0.08),
]

# name, mean, sd, low clip, high clip
_VITALS = [
    ("Heart Rate", 135.0, 22.0, 40.0, 260.0),
    ("Resp Rate", 38.0, 10.0, 5.0, 110.0),
    ("SpO2", 88.0, 7.0, 40.0, 100.0),
    ("Body Temp", 97.9, 1.1, 88.0, 106.0),
    ("Systolic BP", 82.0, 14.0, 30.0, 170.0),
    ("Diastolic BP", 48.0, 10.0, 15.0, 120.0),
    ("Mean BP", 60.0, 11.0, 20.0, 140.0),
    ("CVP", 9.0, 3.0, 0.0, 30.0),
    ("EtCO2", 38.0, 6.0, 10.0, 80.0),
    ("FIO2", 35.0, 12.0, 21.0, 100.0),
    ("Blender O2", 4.0, 2.0, 0.0, 15.0),
    ("NIRS Cerebral", 65.0, 9.0, 15.0, 95.0),
    ("NIRS Renal", 72.0, 10.0, 15.0, 95.0),
    ("Urine Output", 2.5, 1.0, 0.0, 10.0),
    ("Chest Tube Output", 3.0, 2.0, 0.0, 20.0),
]

_ASSESSMENTS = [
    ("Cap Refill", ("Brisk", "Normal", "Delayed", "Sluggish")),
    ("Skin Color", ("Pink", "Pale", "Mottled", "Cyanotic")),
    ("Resp Effort", ("Unlabored", "Labored", "Retractions")),
    ("L Breath Sounds", ("Clear", "Diminished", "Crackles")),
    ("R Breath Sounds", ("Clear", "Diminished", "Crackles")),
    ("Rhythm Strip", ("Sinus", "Tachycardia", "Bradycardia", "Paced")),
    ("LLE CRT", ("Brisk", "Delayed")),
    ("LLE Temp", ("Warm", "Cool", "Cold")),
    ("Pulse Quality", ("Strong", "Weak", "Thready")),
    ("Consciousness", ("Alert", "Lethargic", "Sedated")),
]

_LABS = [
    ("Sodium", 135.0, 145.0),
    ("Potassium", 3.5, 5.0),
    ("Glucose", 70.0, 140.0),
    ("Lactate", 0.5, 2.0),
    ("Bilirubin", 0.1, 1.2),
    ("Hematocrit", 33.0, 45.0),
    ("MPV", 7.5, 11.5),
    ("CO2", 22.0, 29.0),
    ("Anion Gap", 8.0, 16.0),
    ("Chloride", 98.0, 107.0),
    ("BUN", 7.0, 20.0),
    ("Creatinine", 0.2, 0.7),
    ("Calcium", 8.5, 10.5),
    ("Magnesium", 1.7, 2.3),
    ("Phosphorus", 3.0, 6.0),
    ("Hemoglobin", 11.0, 15.0),
    ("WBC", 5.0, 15.0),
    ("Platelets", 150.0, 450.0),
    ("pH", 7.35, 7.45),
    ("pCO2", 35.0, 45.0),
    ("pO2", 80.0, 100.0),
    ("Albumin", 3.4, 5.4),
    ("ALT", 7.0, 56.0),
    ("AST", 10.0, 40.0),
    ("INR", 0.8, 1.2),
]

_MEDICATIONS = ["Milrinone", "Epinephrine", "Furosemide", "Heparin", "D5 1/2NS"]
_MED_CATEGORIES = ("Bolus", "Infusion", "Held")

VITAL_INTERVAL = 1.0
ASSESSMENT_INTERVAL = 4.0
LAB_INTERVAL = (6.0, 12.0)
PLANTED_MISSING_RATE = 0.03


@dataclass(frozen=True)
class GeneratorConfig:
    n_admissions: int = 1000
    admissions_per_patient: float = 4672 / 3566
    prevalence: float = 0.04
    signal_strength: float = 4.0
    n_static: int = 9
    n_vitals: int = 40
    n_assessments: int = 90
    n_labs: int = 49
    n_medications: int = 5
    planted: tuple[str, ...] = ("Heart Rate", "Cap Refill", "Lactate", "Resp Distress")
    tau_hours: float = 24.0
    horizon_hours: float = 28.0

    def validate(self) -> None:
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be nonnegative")
        if self.n_admissions < 1:
            raise ConfigError("n_admissions must be positive")
        if self.admissions_per_patient < 1.0:
            raise ConfigError("admissions_per_patient must be >= 1")
        if not 1 <= self.n_static <= len(_STATIC) + 1:
            raise ConfigError(f"n_static must be in 1..{len(_STATIC) + 1}")
        for key in ("n_vitals", "n_assessments", "n_labs", "n_medications"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")
        if self.n_medications > len(_MEDICATIONS):
            raise ConfigError(f"n_medications must be at most {len(_MEDICATIONS)}")
        if not 0 < self.tau_hours <= self.horizon_hours:
            raise ConfigError("need 0 < tau_hours <= horizon_hours")
        names = {s.name for s in default_schema(self)}
        missing = [p for p in self.planted if p not in names]
        if missing:
            raise ConfigError(f"planted features not in schema: {missing}")

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown generator keys {sorted(unknown)}")
        obj = dict(obj)
        if "planted" in obj:
            obj["planted"] = tuple(obj["planted"])
        return cls(**obj)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["planted"] = list(self.planted)
        return d


def _vital_table(n: int) -> list[tuple[str, float, float, float, float]]:
    table = list(_VITALS[:n])
    for i in range(len(table), n):
        mean = 20.0 + 7.0 * (i % 13)
        table.append((f"Vital {i + 1}", mean, 0.15 * mean, 0.0, 4.0 * mean))
    return table


def _assessment_table(n: int) -> list[tuple[str, tuple[str, ...]]]:
    table = list(_ASSESSMENTS[:n])
    for i in range(len(table), n):
        k = 2 + i % 3
        table.append((f"Assessment {i + 1}", tuple(f"Grade{j}" for j in range(1, k + 1))))
    return table


def _lab_table(n: int) -> list[tuple[str, float, float]]:
    table = list(_LABS[:n])
    for i in range(len(table), n):
        low = 1.0 + 3.0 * (i % 7)
        table.append((f"Lab {i + 1}", low, 2.0 * low))
    return table


def default_schema(config: GeneratorConfig | None = None) -> tuple[FeatureSpec, ...]:
    config = config or GeneratorConfig()
    schema: list[FeatureSpec] = []
    for name, cats, _, _ in _STATIC[: config.n_static - 1]:
        schema.append(FeatureSpec(name, "static", "categorical", "demographics", categories=cats))
    schema.insert(min(6, len(schema)), FeatureSpec("Age", "static", "numeric", "demographics"))
    for name, *_ in _vital_table(config.n_vitals):
        schema.append(FeatureSpec(name, "temporal", "numeric", "vitals", expected_interval_hours=VITAL_INTERVAL))
    for name, cats in _assessment_table(config.n_assessments):
        schema.append(
            FeatureSpec(name, "temporal", "categorical", "assessments", categories=cats,
                        expected_interval_hours=ASSESSMENT_INTERVAL)
        )
    for name, low, high in _lab_table(config.n_labs):
        schema.append(
            FeatureSpec(name, "temporal", "numeric", "labs", reference_range=(low, high),
                        expected_interval_hours=sum(LAB_INTERVAL) / 2)
        )
    for name in _MEDICATIONS[: config.n_medications]:
        schema.append(FeatureSpec(name, "temporal", "categorical", "medications", categories=_MED_CATEGORIES))
    return tuple(schema)


def _last_in_window(series: tuple[Observation, ...], tau: float):
    last = None
    for obs in series:
        if obs.time_hours > tau:
            break
        last = obs.value
    return last


def planted_scores(cohort: Cohort, planted: tuple[str, ...], tau: float) -> np.ndarray:
    """Standardized last-in-window values (n_records x n_planted); missing -> 0.

    Categorical features use the index of the category in the schema's order.
    """
    by_name = {s.name: s for s in cohort.schema}
    z = np.zeros((len(cohort.records), len(planted)))
    for j, name in enumerate(planted):
        spec = by_name[name]
        raw = np.full(len(cohort.records), np.nan)
        for i, r in enumerate(cohort.records):
            v = r.static_values.get(name) if spec.kind == "static" else _last_in_window(r.series(name), tau)
            if v is None:
                continue
            raw[i] = spec.categories.index(v) if not spec.is_numeric else float(v)
        observed = ~np.isnan(raw)
        if observed.sum() > 1:
            mu = raw[observed].mean()
            sd = max(raw[observed].std(), 1e-6)
            z[observed, j] = (raw[observed] - mu) / sd
    return z


def _calibrate_intercept(logits: np.ndarray, prevalence: float) -> float:
    """Bisection on the intercept so the mean predicted risk equals ``prevalence``."""
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(_sigmoid(mid + logits)) < prevalence:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _hourly_times(rng, horizon, interval):
    start = rng.uniform(0.0, interval)
    times = np.arange(start, horizon, interval)
    times = times + rng.uniform(0.0, 0.25 * interval, size=times.size)
    return np.round(times[times < horizon], 2)


def generate_synthetic_cohort(config: GeneratorConfig | None = None, seed: int = 0) -> Cohort:
    config = config or GeneratorConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    schema = default_schema(config)
    horizon = config.horizon_hours
    n = config.n_admissions

    n_patients = max(1, min(n, round(n / config.admissions_per_patient)))
    owner = np.concatenate([np.arange(n_patients), rng.integers(0, n_patients, size=n - n_patients)])
    owner = np.sort(owner)
    patient_age = np.clip(rng.lognormal(math.log(0.6), 2.6, size=n_patients), 0.0, 17.9)

    vitals = {v[0]: v for v in _vital_table(config.n_vitals)}
    assessments = dict(_assessment_table(config.n_assessments))
    labs = {name: (low, high) for name, low, high in _lab_table(config.n_labs)}
    static_specs = {name: (cats, probs, miss) for name, cats, probs, miss in _STATIC}

    missing_rate = {}
    for spec in schema:
        if spec.name in config.planted:
            missing_rate[spec.name] = PLANTED_MISSING_RATE
        elif spec.kind == "static":
            missing_rate[spec.name] = static_specs.get(spec.name, (None, None, 0.02))[2]
        else:
            # Stay comfortably under the cohort-selection cutoffs.
            missing_rate[spec.name] = float(rng.uniform(0.05, missing_cutoff(spec) - 0.12))

    patient_static: list[dict] = []
    for p in range(n_patients):
        values = {}
        for name in ("Sex", "Ethnicity", "First Race", "Second Race", "Primary Language"):
            if name in static_specs:
                cats, probs, _ = static_specs[name]
                values[name] = cats[rng.choice(len(cats), p=probs)]
        patient_static.append(values)

    records = []
    for a in range(n):
        p = int(owner[a])
        static: dict = {}
        temporal: dict = {}
        for spec in schema:
            if rng.random() < missing_rate[spec.name]:
                continue
            name = spec.name
            if spec.kind == "static":
                if name == "Age":
                    static[name] = round(float(patient_age[p] + rng.uniform(0.0, 0.3)), 1)
                elif name in patient_static[p]:
                    static[name] = patient_static[p][name]
                else:
                    cats, probs, _ = static_specs[name]
                    static[name] = cats[rng.choice(len(cats), p=probs)]
                continue
            if spec.section == "vitals":
                _, mu, sd, low, high = vitals[name]
                base = rng.normal(mu, sd)
                times = _hourly_times(rng, horizon, VITAL_INTERVAL)
                values = np.clip(base + rng.normal(0.0, 0.25 * sd, size=times.size), low, high)
                series = [Observation(float(t), round(float(v), 1)) for t, v in zip(times, values)]
            elif spec.section == "assessments":
                cats = assessments[name]
                base = int(rng.integers(len(cats)))
                times = _hourly_times(rng, horizon, ASSESSMENT_INTERVAL)
                flips = rng.random(times.size) < 0.2
                others = rng.integers(len(cats), size=times.size)
                series = [
                    Observation(float(t), cats[int(o) if f else base]) for t, f, o in zip(times, flips, others)
                ]
            elif spec.section == "labs":
                low, high = labs[name]
                center, spread = 0.5 * (low + high), 0.3 * (high - low)
                base = rng.normal(center, spread)
                times = [rng.uniform(0.0, 6.0)]
                while True:
                    nxt = times[-1] + rng.uniform(*LAB_INTERVAL)
                    if nxt >= horizon:
                        break
                    times.append(nxt)
                values = base + rng.normal(0.0, 0.3 * spread, size=len(times))
                series = [Observation(round(float(t), 2), round(float(v), 2)) for t, v in zip(times, values)]
            else:
                k = int(rng.integers(1, 4))
                times = np.sort(np.round(rng.uniform(0.0, config.tau_hours, size=k), 2))
                series = [Observation(float(t), _MED_CATEGORIES[int(rng.integers(3))]) for t in times]
            if series:
                temporal[name] = tuple(series)
        records.append(
            PatientRecord(
                patient_id=f"P{p + 1:05d}",
                admission_id=f"A{a + 1:06d}",
                static_values=static,
                temporal_series=temporal,
                label=0,
            )
        )

    draft = Cohort(schema, tuple(records))
    z = planted_scores(draft, tuple(config.planted), config.tau_hours)
    logits = config.signal_strength * z.sum(axis=1)
    intercept = _calibrate_intercept(logits, config.prevalence)
    labels = (rng.random(n) < _sigmoid(intercept + logits)).astype(int)

    spread = logits.std()
    severity = (logits - logits.mean()) / spread if spread > 0 else np.zeros(n)
    final = []
    for i, r in enumerate(records):
        k = int(rng.integers(3, 13))
        times = np.sort(np.round(rng.uniform(0.0, horizon, size=k), 2))
        scores = np.clip(np.round(3.0 + 1.5 * severity[i] + rng.normal(0.0, 1.0, size=k)), 0.0, 13.0)
        ews = tuple(Observation(float(t), float(s)) for t, s in zip(times, scores))
        final.append(dataclasses.replace(r, label=int(labels[i]), auxiliary={EARLY_WARNING_SCORE: ews}))
    return Cohort(schema, tuple(final))
