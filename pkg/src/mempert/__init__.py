"""Training-data sensitivity from optimizer state: removal and perturbation
estimates, generalisation predictions, and the retraining oracles used to
check them."""

from .data import DataConfig, Dataset, Task
from .errors import MempertError
from .models import ModelSpec
from .optim import Algorithm, Hyper, PreconditionerView, TrainerState

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "DataConfig",
    "Dataset",
    "Hyper",
    "MempertError",
    "ModelSpec",
    "PreconditionerView",
    "Task",
    "TrainerState",
]
