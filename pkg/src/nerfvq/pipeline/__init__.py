"""Data, configuration, training loops, metrics and the command line."""

from .config import TrainConfig, load_config, save_config
from .data import ImageDataset, load_corpus, synthetic_scenes, write_corpus
from .model import Stage1Model
from .train import Stage1Trainer, Stage2Trainer

__all__ = [
    "ImageDataset",
    "Stage1Model",
    "Stage1Trainer",
    "Stage2Trainer",
    "TrainConfig",
    "load_config",
    "load_corpus",
    "save_config",
    "synthetic_scenes",
    "write_corpus",
]
