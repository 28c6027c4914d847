"""Attention-based multi-instance learning for predicting functional change
from multimodal wearable data (activity, sleep, ECG-derived HRV)."""

__version__ = "0.1.0"

from .bags import Bag, build_bags
from .cohort import DeltaClass, Horizon, HorizonWindows, Modality, Task, discretize_delta
from .config import RunConfig, load_config
from .estimator import AttentionMILClassifier
from .evaluation import CohortData, RunReport, run_ablation, run_loso
from .exceptions import ConfigError, EcgError, FrailMILError, NoPeaksError, NumericalError, SchemaError
from .hrv import detect_r_peaks, hrv_features
from .ingest import ModalityTable, load_cohort_dir
from .mil import ModelConfig, count_params_flops, forward, init_model
from .preprocess import FoldStats, MissingMeanScaler, fit_stats
from .synth import SynthConfig, generate_cohort, oracle_accuracy

__all__ = [
    "AttentionMILClassifier",
    "Bag",
    "CohortData",
    "ConfigError",
    "DeltaClass",
    "EcgError",
    "FoldStats",
    "FrailMILError",
    "Horizon",
    "HorizonWindows",
    "MissingMeanScaler",
    "Modality",
    "ModalityTable",
    "ModelConfig",
    "NoPeaksError",
    "NumericalError",
    "RunConfig",
    "RunReport",
    "SchemaError",
    "SynthConfig",
    "Task",
    "build_bags",
    "count_params_flops",
    "detect_r_peaks",
    "discretize_delta",
    "fit_stats",
    "forward",
    "generate_cohort",
    "hrv_features",
    "init_model",
    "load_cohort_dir",
    "load_config",
    "oracle_accuracy",
    "run_ablation",
    "run_loso",
]
