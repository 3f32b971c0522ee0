"""Phenotype-adaptive sleep-apnea screening from Level IV recordings
(SpO2 plus thoracic/abdominal effort).

Pipeline: load or synthesize a subject database, pick the phenotype-nearest
neighbors of a query subject, train a per-subject RBF SVM on their labeled
epochs, turn epoch predictions into timed events with a desaturation
correction, grade severity from the respiratory event index, and evaluate
the whole chain with leave-one-out cross validation.
"""

__version__ = "0.1.0"

from .detector import DetectedEvent, DetectorConfig, ScreeningReport, screen, severity_from_rei
from .evaluation import EvalReport, match_events, run_loocv, train_subject_model
from .features import EpochFeatures, FeatureConfig, build_epoch_grid, extract_features
from .phenotype_knn import KnnConfig, MetricScales, compute_scales, select_neighbors
from .recording_store import (
    EventAnnotation,
    PhenotypeProfile,
    Subject,
    load_database,
    save_database,
)
from .svm import SvmConfig, TrainedModel, fit, predict, train
from .synth import CohortSpec, generate

__all__ = [
    "CohortSpec",
    "DetectedEvent",
    "DetectorConfig",
    "EpochFeatures",
    "EvalReport",
    "EventAnnotation",
    "FeatureConfig",
    "KnnConfig",
    "MetricScales",
    "PhenotypeProfile",
    "ScreeningReport",
    "Subject",
    "SvmConfig",
    "TrainedModel",
    "build_epoch_grid",
    "compute_scales",
    "extract_features",
    "fit",
    "generate",
    "load_database",
    "match_events",
    "predict",
    "run_loocv",
    "save_database",
    "screen",
    "select_neighbors",
    "severity_from_rei",
    "train",
    "train_subject_model",
    "__version__",
]
