"""carmnav: uncertainty-aware C-arm landmark positioning on synthetic anatomy.

Probabilistic displacement regression with MC-dropout uncertainty, split
conformal calibration with uncertainty-scaled prediction regions, and a
multi-step navigation harness, all on a procedurally generated skeleton
simulator.
"""

__version__ = "0.1.0"

from .anatomy import (BODY_EXTENT_MM, LANDMARK_NAMES, N_LANDMARKS, Patient,
                      SkeletonTemplate, canonical_skeleton, generate_patients,
                      mm_to_units, sample_patient, split_patients, units_to_mm)
from .conformal import (CalibrationTable, ConformalCalibrator, PredictionRegion,
                        calibrate, contains, min_calibration_size,
                        nonconformity_score, prediction_region)
from .losses import nll_loss, skeleton_pose_loss, total_loss
from .metrics import MetricsReport, eval_nll, mean_euclidean_distance, prcp
from .model import (DisplacementRegressor, GaussianPrediction, McdEstimate,
                    aggregate_mcd, load_checkpoint, save_checkpoint)
from .navigation import OracleModel, compare_paths, parse_path, parse_paths, run_path
from .sampling import (AugmentationConfig, Dataset, Sample, apply_position_augmentation,
                       build_dataset, load_dataset, sample_isocenter, save_dataset,
                       synthesize_observation)

__all__ = [
    "AugmentationConfig", "BODY_EXTENT_MM", "CalibrationTable", "ConformalCalibrator",
    "Dataset", "DisplacementRegressor", "GaussianPrediction", "LANDMARK_NAMES",
    "McdEstimate", "MetricsReport", "N_LANDMARKS", "OracleModel", "Patient",
    "PredictionRegion", "Sample", "SkeletonTemplate", "aggregate_mcd",
    "apply_position_augmentation", "build_dataset", "calibrate", "canonical_skeleton",
    "compare_paths", "contains", "eval_nll", "generate_patients", "load_checkpoint",
    "load_dataset", "mean_euclidean_distance", "min_calibration_size", "mm_to_units",
    "nll_loss", "nonconformity_score", "parse_path", "parse_paths", "prcp",
    "prediction_region", "run_path", "sample_isocenter", "sample_patient",
    "save_checkpoint", "save_dataset", "skeleton_pose_loss", "split_patients",
    "synthesize_observation", "total_loss", "units_to_mm",
]
