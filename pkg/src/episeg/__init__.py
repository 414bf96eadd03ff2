"""Few-shot semantic segmentation by predicting classifier parameters from one example."""

from .data import (Episode, FoldSpec, SegDataset, SyntheticConfig, benchmark_set, build_folds,
                   generate_synthetic, load_dataset, load_dataset_dir, remap_to_fold, sample_episode,
                   save_dataset, split_holdout)
from .metrics import ClassCounts, EvalReport, accumulate, finalize, run_benchmark, time_report
from .model import ModelConfig, TwoBranchModel, predict_kshot, predict_mask
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "ClassCounts", "Episode", "EvalReport", "FoldSpec", "ModelConfig", "SegDataset", "SyntheticConfig",
    "TrainConfig", "TrainLog", "TwoBranchModel", "accumulate", "benchmark_set", "build_folds", "finalize",
    "generate_synthetic", "load_dataset", "load_dataset_dir", "predict_kshot", "predict_mask",
    "remap_to_fold", "run_benchmark", "sample_episode", "save_dataset", "split_holdout", "time_report",
    "train",
]
