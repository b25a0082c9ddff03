"""Noise2Noise training on co-registered repeat slices."""

from .net import DenoiserNet, NetDescriptor, load_model, save_model
from .pairs import PairedSliceDataset, build_pairs, center_crop, pair_count
from .train import TrainConfig, TrainingError, denoise_volume, train, write_loss_csv

__all__ = [
    "DenoiserNet",
    "NetDescriptor",
    "load_model",
    "save_model",
    "PairedSliceDataset",
    "build_pairs",
    "center_crop",
    "pair_count",
    "TrainConfig",
    "TrainingError",
    "denoise_volume",
    "train",
    "write_loss_csv",
]
