from .extractors import (ExtractionStats, ExtractorSpec, PatientSpec, ValueFilter, config_digest,
                         diagnosis_spec, extract_acts, extract_diagnoses, extract_drug_dispenses,
                         extract_hospital_stays, extract_patients, run_extractor)
from .lineage import CohortEntry, code_digest, read_metadata, write_metadata
from .pipeline import ExtractionConfig, ExtractionResult, load_extraction_config, run_extraction
from .transformers import (ExposureSpec, FollowUpSpec, OutcomeSite, TracklossSpec, filter_prevalent_users,
                           merge_dispenses, transform_exposure, transform_followup,
                           transform_observation_period, transform_outcome, transform_trackloss)

__all__ = [
    "CohortEntry", "ExposureSpec", "ExtractionConfig", "ExtractionResult", "ExtractionStats",
    "ExtractorSpec", "FollowUpSpec", "OutcomeSite", "PatientSpec", "TracklossSpec", "ValueFilter",
    "code_digest", "config_digest", "diagnosis_spec", "extract_acts", "extract_diagnoses",
    "extract_drug_dispenses", "extract_hospital_stays", "extract_patients", "filter_prevalent_users",
    "load_extraction_config", "merge_dispenses", "read_metadata", "run_extraction", "run_extractor",
    "transform_exposure", "transform_followup", "transform_observation_period", "transform_outcome",
    "transform_trackloss", "write_metadata",
]
