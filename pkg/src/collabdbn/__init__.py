"""Collaborative deep belief network learning for cyberattack detection."""

__version__ = "0.1.0"

from .dataset import ClassLabel, Dataset, SynthConfig, generate_synthetic, load_csv, split, standardize
from .dbn import DbnModel, TrainConfig, init_model, predict, predict_proba
from .collab import CollabConfig, train
from .metrics import compute_metrics, confusion, evaluate

__all__ = [
    "ClassLabel", "Dataset", "SynthConfig", "generate_synthetic", "load_csv", "split", "standardize",
    "DbnModel", "TrainConfig", "init_model", "predict", "predict_proba",
    "CollabConfig", "train", "compute_metrics", "confusion", "evaluate",
]
