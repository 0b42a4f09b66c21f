"""Dual-stream 1D CNN regression of machining quality from vibration and status signals."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluate import EvalReport, mae, pearson_corr, predict, rmse
from .model import DeepMachining, ModelConfig, finetune_mask, insert_adapters, param_counts, pretrain_mask
from .signal_io import NormStats, WorkpieceSample, fit_stats, load_dataset, save_dataset
from .synth import SynthConfig, generate_dataset
from .train import TrainPlan, finetune_two_shot, pretrain, split_random, split_sequential

__all__ = [
    "Checkpoint", "DeepMachining", "EvalReport", "ModelConfig", "NormStats", "SynthConfig", "TrainPlan",
    "WorkpieceSample", "finetune_mask", "finetune_two_shot", "fit_stats", "generate_dataset",
    "insert_adapters", "load_checkpoint", "load_dataset", "mae", "param_counts", "pearson_corr", "predict",
    "pretrain", "pretrain_mask", "rmse", "save_checkpoint", "save_dataset", "split_random", "split_sequential",
]
