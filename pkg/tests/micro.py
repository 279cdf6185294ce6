"""Small hand-built schema and records shared by the model-level tests."""

import numpy as np

from pedca.cohort import FeatureSpec, Observation, PatientRecord

SCHEMA = (
    FeatureSpec("Sex", "static", "categorical", "demographics", categories=("Female", "Male")),
    FeatureSpec("Age", "static", "numeric", "demographics"),
    FeatureSpec("Heart Rate", "temporal", "numeric", "vitals"),
    FeatureSpec("Skin Color", "temporal", "categorical", "assessments", categories=("Pink", "Pale", "Mottled")),
    FeatureSpec("Lactate", "temporal", "numeric", "labs", reference_range=(0.5, 2.0)),
    FeatureSpec("Milrinone", "temporal", "categorical", "medications", categories=("Bolus", "Infusion")),
)

MICRO = dict(d=8, n_layers=1, n_heads=2, d_txt=8, n_layers_txt=1, n_heads_txt=2, d_fusion=8, n_layers_fusion=1,
             n_heads_fusion=2)


def make_record(i: int, rng: np.random.Generator, label: int | None = None) -> PatientRecord:
    hr = [float(rng.normal(130, 20)) for _ in range(2)]
    lactate = float(rng.uniform(0.3, 4.0))
    if label is None:
        label = int(hr[-1] > 130)
    temporal = {
        "Heart Rate": (Observation(1.0, round(hr[0], 1)), Observation(5.0, round(hr[1], 1))),
        "Skin Color": (Observation(2.0, ["Pink", "Pale", "Mottled"][i % 3]),),
        "Lactate": (Observation(3.0, round(lactate, 2)),),
    }
    if i % 4 == 0:
        temporal["Milrinone"] = (Observation(4.0, "Bolus"), Observation(6.0, "Infusion"))
    static = {"Sex": ["Female", "Male"][i % 2], "Age": round(float(rng.uniform(0, 18)), 1)}
    return PatientRecord(f"P{i}", f"A{i}", static, temporal, label)


def make_records(n: int, seed: int = 0) -> list[PatientRecord]:
    rng = np.random.default_rng(seed)
    return [make_record(i, rng) for i in range(n)]


def randomize_parameters(model, seed: int = 0, scale: float = 0.3) -> None:
    """Replace every parameter with fresh draws so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
