"""Multi-resolution EHR records: data model, file I/O, windowing, synthetic cohorts."""

from .records import (
    AUXILIARY_CHANNELS,
    EARLY_WARNING_SCORE,
    Cohort,
    CohortError,
    ConfigError,
    FeatureSpec,
    Observation,
    PatientRecord,
    filter_window,
    format_number,
    load_cohort,
    load_cohort_dir,
    load_schema,
    missing_cutoff,
    save_cohort,
    schema_hash,
    validate_cohort,
    validate_cohort_structure,
    window_cohort,
)
from .synthetic import GeneratorConfig, default_schema, generate_synthetic_cohort, planted_scores

__all__ = [
    "AUXILIARY_CHANNELS",
    "EARLY_WARNING_SCORE",
    "Cohort",
    "CohortError",
    "ConfigError",
    "FeatureSpec",
    "GeneratorConfig",
    "Observation",
    "PatientRecord",
    "default_schema",
    "filter_window",
    "format_number",
    "generate_synthetic_cohort",
    "load_cohort",
    "load_cohort_dir",
    "load_schema",
    "missing_cutoff",
    "planted_scores",
    "save_cohort",
    "schema_hash",
    "validate_cohort",
    "validate_cohort_structure",
    "window_cohort",
]
