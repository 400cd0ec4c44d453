"""Replay-based class-incremental learning for environmental sound classification."""

from .engine import build_task_stream, compute_acc, compute_bwt, run_method, run_task
from .model import Classifier, ClassifierConfig
from .replay import ReplayBuffer, Strategy, update_buffer

__version__ = "0.1.0"

__all__ = [
    "Classifier",
    "ClassifierConfig",
    "ReplayBuffer",
    "Strategy",
    "build_task_stream",
    "compute_acc",
    "compute_bwt",
    "run_method",
    "run_task",
    "update_buffer",
]
