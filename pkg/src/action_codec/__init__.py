"""Convolutional residual VQ-VAE action tokenizer and its tooling."""

from .autoencoder import ActionVQVAE, ModelConfig
from .codec import VQTokenizer, bin_decode, bin_encode, vq_decode, vq_encode
from .data import NormalizationStats, Trajectory, load_trajectories, save_trajectories
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ActionVQVAE",
    "Checkpoint",
    "ModelConfig",
    "NormalizationStats",
    "TrainConfig",
    "Trajectory",
    "VQTokenizer",
    "bin_decode",
    "bin_encode",
    "load_checkpoint",
    "load_trajectories",
    "save_checkpoint",
    "save_trajectories",
    "train",
    "vq_decode",
    "vq_encode",
]
